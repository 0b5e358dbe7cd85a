"""Deterministic, splittable random streams.

All stochastic routines draw from numpy Generators derived from a master seed
plus an integer path (e.g. frame chunk index, pixel block, protocol stage).
Derivation goes through SeedSequence spawn keys, so any two distinct paths
give statistically independent streams and the mapping is stable across
processes, platforms, and thread counts.

Work that is split across threads must be split into *fixed-size chunks*
whose streams depend only on the chunk index, never on the worker that
happens to execute them; `frame_chunks` provides the canonical chunking.
"""
from __future__ import annotations

from collections.abc import Iterator

import numpy as np

# Frames per work unit. Fixed constant: results must not depend on --threads.
CHUNK_FRAMES = 4096


def stream(master_seed: int, *path: int) -> np.random.Generator:
    """Return the Generator for `path` under `master_seed`.

    Identical (seed, path) pairs always yield identical streams; distinct
    paths yield independent streams.
    """
    if master_seed < 0:
        raise ValueError("master_seed must be non-negative")
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(int(p) for p in path))
    return np.random.default_rng(ss)


def frame_chunks(n_frames: int, chunk: int = CHUNK_FRAMES) -> Iterator[tuple[int, int, int]]:
    """Yield (chunk_index, start, stop) covering range(n_frames) in order."""
    if n_frames < 0:
        raise ValueError("n_frames must be non-negative")
    idx = 0
    for start in range(0, n_frames, chunk):
        yield idx, start, min(start + chunk, n_frames)
        idx += 1
