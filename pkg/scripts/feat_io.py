#!/usr/bin/env python3
"""
FEAT binary feature files.

Layout (little-endian):
  offset 0   magic    b"FEAT"
  offset 4   version  u16 = 1
  offset 6   flags    u16, bit 0 = label block present
  offset 8   n_rows   u64
  offset 16  dim      u32
  offset 20  dtype    u8 = 1 (float32)
  offset 21  reserved 3 zero bytes
  offset 24  payload  n_rows * dim float32, row-major
  then       labels   n_rows u32 (only when flag bit 0 is set)

Readers reject anything that does not match exactly: short or long files,
unknown flags, non-zero reserved bytes, non-finite payload values.
Every FormatError names the byte offset it tripped on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from soyo_core import FormatError, get_logger

logger = get_logger(__name__)

MAGIC = b"FEAT"
VERSION = 1
DTYPE_F32 = 1
FLAG_LABELS = 0x1
HEADER = struct.Struct("<4sHHQIB3x")
HEADER_SIZE = HEADER.size  # 24


@dataclass(frozen=True, eq=False)
class FeatFile:
    features: np.ndarray  # n x d float32
    labels: Optional[np.ndarray] = None  # n uint32

    def __post_init__(self) -> None:
        feats = np.ascontiguousarray(self.features, dtype="<f4")
        if feats.ndim != 2 or feats.shape[1] < 1:
            raise FormatError(f"features must be n x d with d >= 1, got shape {feats.shape}")
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels)
            if labels.shape != (feats.shape[0],):
                raise FormatError(f"{labels.shape[0]} labels for {feats.shape[0]} rows")
            if labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
                raise FormatError("labels must fit in u32")
            object.__setattr__(self, "labels", labels.astype("<u4"))

    @property
    def n_rows(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


def encode_feat(feat: FeatFile) -> bytes:
    flags = FLAG_LABELS if feat.labels is not None else 0
    parts = [HEADER.pack(MAGIC, VERSION, flags, feat.n_rows, feat.dim, DTYPE_F32), feat.features.tobytes()]
    if feat.labels is not None:
        parts.append(feat.labels.tobytes())
    return b"".join(parts)


def decode_feat(data: bytes) -> FeatFile:
    if len(data) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes", len(data))
    magic, version, flags, n_rows, dim, dtype = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if flags & ~FLAG_LABELS:
        raise FormatError(f"unknown flag bits 0x{flags:04x}", 6)
    if dim < 1:
        raise FormatError("dim must be at least 1", 16)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype {dtype}", 20)
    if any(data[21:24]):
        raise FormatError("reserved bytes must be zero", 21)

    payload_end = HEADER_SIZE + n_rows * dim * 4
    expected = payload_end + (n_rows * 4 if flags & FLAG_LABELS else 0)
    if len(data) < expected:
        raise FormatError(f"truncated payload: file has {len(data)} bytes, header declares {expected}", len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes", expected)

    values = np.frombuffer(data, dtype="<f4", count=n_rows * dim, offset=HEADER_SIZE)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("non-finite payload value", HEADER_SIZE + int(bad[0]) * 4)
    labels = None
    if flags & FLAG_LABELS:
        labels = np.frombuffer(data, dtype="<u4", count=n_rows, offset=payload_end).copy()
    return FeatFile(features=values.reshape(n_rows, dim).copy(), labels=labels)


def write_feat(path: Path, features: np.ndarray, labels: Optional[np.ndarray] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_feat(FeatFile(features, labels)))
    logger.debug("wrote %s", path)


def read_feat(path: Path) -> FeatFile:
    path = Path(path)
    try:
        return decode_feat(path.read_bytes())
    except FormatError as e:
        err = FormatError(f"{path.name}: {e}")
        err.location = e.location
        raise err from e
