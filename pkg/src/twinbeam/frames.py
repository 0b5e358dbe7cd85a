"""Binary FrameSet persistence and delimited export.

A FrameSet is a stack of per-frame, per-pixel detector counts for one or two
channels, plus the provenance needed to regenerate it: the master seed and
the SHA-256 of the generating configuration.

File layout (little-endian throughout):

    offset  size  field
    0       4     magic  b"TBFS"
    4       2     format version (currently 1)
    6       1     dtype code: 0 = uint32 counts, 1 = int32 ADU
    7       1     channels (1 or 2)
    8       4     grid height H
    12      4     grid width  W
    16      8     frame count K
    24      8     master seed
    32      32    SHA-256 of the generating config (zeros if none)
    64      -     payload: (K, channels, H, W) C-order fixed-width integers

Total size is exactly 64 + K * channels * H * W * 4 bytes.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

MAGIC = b"TBFS"
VERSION = 1
HEADER = struct.Struct("<4sHBBIIQQ32s")
HEADER_BYTES = HEADER.size  # 64

_DTYPES = {0: np.dtype("<u4"), 1: np.dtype("<i4")}
_CODES = {np.dtype("uint32"): 0, np.dtype("int32"): 1}

NO_CONFIG = bytes(32)


@dataclass
class FrameSet:
    """In-memory frame stack with provenance.

    frames : (K, channels, H, W) array, uint32 counts or int32 ADU
    seed   : master seed the frames were generated from
    config_hash : SHA-256 digest of the generating config (32 bytes)
    """

    frames: np.ndarray
    seed: int
    config_hash: bytes = field(default=NO_CONFIG)

    def __post_init__(self):
        f = np.ascontiguousarray(self.frames)
        if f.ndim == 3:  # single channel given as (K, H, W)
            f = f[:, None, :, :]
        if f.ndim != 4:
            raise DataError(f"frames must be (K, channels, H, W), got shape {f.shape}")
        if f.dtype not in _CODES:
            if np.issubdtype(f.dtype, np.integer):
                if f.dtype.kind == "u" or f.min() >= 0:
                    if f.size and f.max() > np.iinfo(np.uint32).max:
                        raise DataError("counts exceed the 32-bit storage width")
                    f = f.astype(np.uint32)
                else:
                    f = f.astype(np.int32)
            else:
                raise DataError(f"frames must be integer counts/ADU, got dtype {f.dtype}")
        if f.shape[1] not in (1, 2):
            raise DataError(f"channels must be 1 or 2, got {f.shape[1]}")
        if not (0 <= self.seed < 2**64):
            raise DataError(f"seed must fit in 64 bits, got {self.seed}")
        if len(self.config_hash) != 32:
            raise DataError("config_hash must be a 32-byte digest")
        self.frames = f

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]

    def channel(self, i: int) -> np.ndarray:
        """(K, H, W) view of one channel."""
        if not 0 <= i < self.channels:
            raise DataError(f"channel {i} out of range for {self.channels}-channel set")
        return self.frames[:, i]

    def pair(self) -> tuple[np.ndarray, np.ndarray]:
        if self.channels != 2:
            raise DataError("pair() requires a two-channel FrameSet")
        return self.frames[:, 0], self.frames[:, 1]

    def series(self) -> np.ndarray:
        """Counts flattened to (K,) or (K, channels) for 1x1 grids."""
        if self.grid != (1, 1):
            raise DataError(f"series() requires a 1x1 grid, got {self.grid}")
        out = self.frames[:, :, 0, 0]
        return out[:, 0] if self.channels == 1 else out

    # -- persistence --------------------------------------------------------

    def file_size(self) -> int:
        return HEADER_BYTES + self.frames.size * 4

    def save(self, path) -> None:
        code = _CODES[self.frames.dtype.newbyteorder("=")]
        k, c, h, w = self.frames.shape
        header = HEADER.pack(MAGIC, VERSION, code, c, h, w, k, self.seed,
                             self.config_hash)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.frames.astype(_DTYPES[code], copy=False).tobytes())

    @classmethod
    def load(cls, path, expected_hash: bytes | None = None) -> "FrameSet":
        with open(path, "rb") as fh:
            raw = fh.read(HEADER_BYTES)
            if len(raw) < HEADER_BYTES:
                raise DataError(f"{path}: truncated header")
            magic, version, code, c, h, w, k, seed, digest = HEADER.unpack(raw)
            if magic != MAGIC:
                raise DataError(f"{path}: not a FrameSet file (bad magic {magic!r})")
            if version != VERSION:
                raise DataError(f"{path}: unsupported format version {version}")
            if code not in _DTYPES:
                raise DataError(f"{path}: unknown dtype code {code}")
            if c not in (1, 2):
                raise DataError(f"{path}: invalid channel count {c}")
            expected = k * c * h * w * 4
            payload = fh.read(expected + 1)
        if len(payload) < expected:
            raise DataError(f"{path}: truncated payload "
                            f"({len(payload)} of {expected} bytes)")
        if len(payload) > expected:
            raise DataError(f"{path}: trailing bytes after payload")
        if expected_hash is not None and digest != expected_hash:
            raise DataError(f"{path}: config hash mismatch; file was not "
                            "produced by this configuration")
        frames = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(k, c, h, w)
        return cls(frames.copy(), seed, digest)

    # -- delimited export ---------------------------------------------------

    def to_csv(self, path) -> None:
        """Long-format export: frame,channel,row,col,count."""
        k, c, h, w = self.frames.shape
        rows = np.indices((c, h, w)).reshape(3, -1).T
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "channel", "row", "col", "count"])
            for i in range(k):
                flat = self.frames[i].ravel()
                writer.writerows(
                    (i, int(ch), int(r), int(col), int(v))
                    for (ch, r, col), v in zip(rows, flat))
