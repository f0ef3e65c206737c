"""The 4D volume data model and its on-disk binary format (UQV1).

A volume is an (X, Y, Z, C) float32 scalar field with voxel spacing in
mm and an optional (X, Y, Z) boolean foreground mask. Files are
little-endian: 4-byte magic "UQV1", four u32 dims, three f32 spacings,
u32 flags (bit 0: mask present), u32 reserved, then the voxel data
x-fastest / channel-slowest, then the mask bytes if flagged.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, FormatError

MAGIC = b"UQV1"
HEADER_BYTES = 40


@dataclass
class Volume4D:
    data: np.ndarray                 # (X, Y, Z, C) float32
    spacing: tuple = (1.0, 1.0, 1.0)
    mask: np.ndarray | None = None   # (X, Y, Z) bool

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise DimensionError(f"volume data must be 4-d, got {self.data.ndim}-d")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ContractError(f"spacing must be three positive floats, got {self.spacing}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape[:3]:
                raise DimensionError(
                    f"mask shape {self.mask.shape} != spatial dims {self.data.shape[:3]}"
                )

    @property
    def dims(self):
        return self.data.shape

    def channels(self):
        return self.data.shape[3]


def write_volume(vol: Volume4D, path, allow_nan=False):
    """Deterministic byte stream; refuses non-finite data unless allowed."""
    if not allow_nan and not np.isfinite(vol.data).all():
        raise ContractError(
            "volume contains NaN/Inf; pass allow_nan=True (--allow-nan) to force"
        )
    X, Y, Z, C = vol.dims
    flags = 1 if vol.mask is not None else 0
    header = (
        MAGIC
        + np.array([X, Y, Z, C], "<u4").tobytes()
        + np.array(vol.spacing, "<f4").tobytes()
        + np.array([flags, 0], "<u4").tobytes()
    )
    assert len(header) == HEADER_BYTES
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(vol.data.transpose(3, 2, 1, 0), "<f4").tobytes())
        if vol.mask is not None:
            f.write(np.ascontiguousarray(vol.mask.transpose(2, 1, 0), "u1").tobytes())


def read_volume(path) -> Volume4D:
    """Bit-exact inverse of `write_volume`."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_BYTES:
        raise FormatError(
            f"file too short for header: {len(raw)} < {HEADER_BYTES} bytes",
            offset=len(raw),
        )
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", offset=0)
    X, Y, Z, C = (int(v) for v in np.frombuffer(raw[4:20], "<u4"))
    spacing = tuple(float(v) for v in np.frombuffer(raw[20:32], "<f4"))
    flags, reserved = (int(v) for v in np.frombuffer(raw[32:40], "<u4"))
    nvox = X * Y * Z * C
    need = HEADER_BYTES + 4 * nvox
    if len(raw) < need:
        raise FormatError(
            f"truncated payload: need {need} bytes for {X}x{Y}x{Z}x{C} data, "
            f"file has {len(raw)}", offset=len(raw),
        )
    data = np.frombuffer(raw[HEADER_BYTES:need], "<f4").reshape(C, Z, Y, X)
    data = np.ascontiguousarray(data.transpose(3, 2, 1, 0))
    mask = None
    if flags & 1:
        mneed = need + X * Y * Z
        if len(raw) < mneed:
            raise FormatError(
                f"truncated mask: need {mneed} bytes, file has {len(raw)}",
                offset=len(raw),
            )
        mask = np.frombuffer(raw[need:mneed], "u1").reshape(Z, Y, X)
        mask = np.ascontiguousarray(mask.transpose(2, 1, 0)) != 0
    return Volume4D(data=data, spacing=spacing, mask=mask)


def foreground_mask(vol: Volume4D, threshold: float = 1e-8) -> np.ndarray:
    """Voxel is foreground iff its channel-mean absolute intensity exceeds
    the threshold. Warns (and returns the empty mask) when nothing does."""
    if threshold < 0:
        raise ContractError(f"threshold must be >= 0, got {threshold}")
    mask = np.abs(vol.data).mean(axis=3) > threshold
    if not mask.any():
        warnings.warn("foreground mask is empty: all voxels at/below threshold")
    return mask
