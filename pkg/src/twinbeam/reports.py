"""Structured report emission: JSON key/value documents and CSV tables.

Every report carries the master seed and the config hash so any number in
any output file can be traced back to the exact run that produced it.
Non-finite floats are serialized as null; the accompanying status field
says why a value is missing.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .estimators import EstimateReport


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, bytes):
        return obj.hex()
    return obj


def estimate_as_dict(rep: EstimateReport) -> dict:
    out = {
        "name": rep.name,
        "value": rep.value,
        "standard_error": rep.standard_error,
        "sample_size": rep.sample_size,
        "status": rep.status,
    }
    if rep.analytic_prediction is not None:
        out["analytic_prediction"] = rep.analytic_prediction
        if rep.status == "ok":
            out["deviation_sigma"] = rep.deviation_sigma()
    if rep.meta:
        out["meta"] = dict(rep.meta)
    return _clean(out)


def write_report(path, command: str, seed: int, cfg_hash: bytes,
                 body: dict) -> dict:
    """Write a JSON report; returns the document that was written."""
    doc = {"command": command, "seed": seed, "config_hash": cfg_hash.hex()}
    doc.update(_clean(body))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False, allow_nan=False)
        fh.write("\n")
    return doc


def write_table(path, columns: list[str], rows, provenance: dict | None = None) -> None:
    """CSV table; provenance key/values are prepended as '# key=value' lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if provenance:
            for key, value in provenance.items():
                fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if v is None else v for v in _clean(list(row))])


def read_table(path) -> tuple[list[str], list[list[str]]]:
    """Read a CSV table written by write_table, skipping provenance lines."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        from .errors import DataError
        raise DataError(f"{path}: empty table")
    return rows[0], rows[1:]


def read_provenance(path) -> dict[str, str]:
    """The '# key=value' header lines of a table, as strings."""
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            out[key.strip()] = value
    return out
