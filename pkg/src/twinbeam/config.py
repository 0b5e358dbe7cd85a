"""TOML experiment configuration: loading, validation, canonical hashing.

Configs are plain nested tables of scalars; nothing in them is executed.
The canonical hash is the SHA-256 of the sorted-key JSON dump, so two
configs that parse to the same values hash identically regardless of
formatting or key order.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .core import SourceSpec
from .errors import DomainError
from .geometry import ModeLayout


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DomainError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise DomainError(f"{p}: invalid TOML: {exc}") from None


def config_hash(cfg: dict) -> bytes:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).digest()


def _walk(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def require(cfg: dict, dotted: str, kind: type | None = None):
    """Fetch a dotted key, raising a config error when absent or mistyped."""
    value = _walk(cfg, dotted)
    if value is None:
        raise DomainError(f"config missing required key '{dotted}'")
    if kind is not None:
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        bad_bool = isinstance(value, bool) and kind is not bool  # bool is an int
        if bad_bool or not isinstance(value, kind):
            raise DomainError(
                f"config key '{dotted}' must be {kind.__name__}, got {type(value).__name__}")
    return value


def optional(cfg: dict, dotted: str, default=None):
    value = _walk(cfg, dotted)
    return default if value is None else value


def resolve_seed(cfg: dict, override: int | None = None) -> int:
    """Seed from --seed flag or [run].seed; never from the wall clock."""
    if override is not None:
        seed = override
    else:
        seed = _walk(cfg, "run.seed")
        if seed is None:
            raise DomainError("no seed: set [run].seed in the config or pass --seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise DomainError(f"seed must be an integer in [0, 2^64), got {seed!r}")
    return seed


def source_from_config(cfg: dict) -> SourceSpec:
    kind = require(cfg, "source.kind", str)
    mu = require(cfg, "source.mu", float)
    modes = float(optional(cfg, "source.modes", 1.0))
    tau = optional(cfg, "source.tau")
    try:
        return SourceSpec(kind, mu, modes, tau if tau is None else float(tau))
    except DomainError as exc:
        raise DomainError(f"[source]: {exc}") from None


def layout_from_config(cfg: dict) -> ModeLayout:
    geo = optional(cfg, "geometry")
    if not isinstance(geo, dict):
        raise DomainError("config missing [geometry] table")
    try:
        if "x" in geo:
            return ModeLayout.from_dimensionless(
                float(geo["x"]), float(geo.get("d", 0.0)),
                float(geo.get("beta", 0.5)),
                float(geo.get("coherence_radius", 1.0)))
        return ModeLayout(
            float(require(cfg, "geometry.coherence_radius", float)),
            float(require(cfg, "geometry.region_size", float)),
            float(geo.get("misalignment", 0.0)),
            float(geo.get("beta", 0.5)))
    except (TypeError, ValueError) as exc:
        raise DomainError(f"[geometry]: {exc}") from None
    except DomainError as exc:
        raise DomainError(f"[geometry]: {exc}") from None
