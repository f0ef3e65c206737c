"""Deterministic tensor-field phantoms.

Ground-truth 6-channel volumes for desk-scale experiments: an ellipsoidal
foreground holds a smoothly varying symmetric positive-semidefinite
tensor field, built from band-limited random cosine fields driving three
rotation angles and three eigenvalues. Background is exactly zero. Every
volume is a pure function of its spec (same spec + seed, same bytes).

Optional ingredients: a homogeneous sphere ("anomaly") unseen in normal
training data, and impulsive channel outliers for robustness studies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, GeometryError
from .volume import Volume4D

# channel ordering convention for the symmetric tensor
CHANNELS = ("Dxx", "Dyy", "Dzz", "Dxy", "Dxz", "Dyz")


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    seed: int = 0
    structure_scale: float = 12.0          # smoothness length, voxels
    aniso_range: tuple = (0.3, 1.2)        # eigenvalue bounds, >= 0
    anomaly: dict | None = None            # {center, radius, value}
    outlier_fraction: float = 0.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if any(d < 16 for d in self.dims):
            raise ContractError(f"dims must be >= 16 per axis, got {self.dims}")
        lo, hi = self.aniso_range
        if lo < 0 or hi < lo:
            raise ContractError(f"anisotropy range must satisfy 0 <= lo <= hi, got {self.aniso_range}")
        if not 0 <= self.outlier_fraction < 1:
            raise ContractError(f"outlier_fraction must be in [0,1), got {self.outlier_fraction}")
        if self.structure_scale <= 0:
            raise ContractError("structure_scale must be positive")

    def to_json(self) -> str:
        d = {
            "dims": list(self.dims), "seed": self.seed,
            "structure_scale": self.structure_scale,
            "aniso_range": list(self.aniso_range),
            "anomaly": self.anomaly,
            "outlier_fraction": self.outlier_fraction,
        }
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        d = json.loads(text)
        return cls(dims=tuple(d["dims"]), seed=d["seed"],
                   structure_scale=d["structure_scale"],
                   aniso_range=tuple(d["aniso_range"]),
                   anomaly=d.get("anomaly"),
                   outlier_fraction=d.get("outlier_fraction", 0.0))


def _cosine_field(rng, dims, scale, n_modes=8):
    """Band-limited random field in [0,1]: sum of <=8 cosine modes with
    wavelengths no shorter than `scale` voxels."""
    X, Y, Z = dims
    gx, gy, gz = np.meshgrid(
        np.arange(X) / X, np.arange(Y) / Y, np.arange(Z) / Z, indexing="ij"
    )
    f = np.zeros(dims)
    for _ in range(n_modes):
        kmax = [max(1.0, d / scale) for d in dims]
        k = [rng.uniform(0.0, km) for km in kmax]
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.3, 1.0)
        f += amp * np.cos(2 * np.pi * (k[0] * gx + k[1] * gy + k[2] * gz) + phase)
    lo, hi = f.min(), f.max()
    if hi - lo < 1e-12:
        return np.zeros(dims) + 0.5
    return (f - lo) / (hi - lo)


def _rotations(alpha, beta, gamma):
    """Per-voxel rotation matrices from three angle fields, shape (...,3,3)."""
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    R = np.empty(alpha.shape + (3, 3))
    R[..., 0, 0] = ca * cb
    R[..., 0, 1] = ca * sb * sg - sa * cg
    R[..., 0, 2] = ca * sb * cg + sa * sg
    R[..., 1, 0] = sa * cb
    R[..., 1, 1] = sa * sb * sg + ca * cg
    R[..., 1, 2] = sa * sb * cg - ca * sg
    R[..., 2, 0] = -sb
    R[..., 2, 1] = cb * sg
    R[..., 2, 2] = cb * cg
    return R


def _ellipsoid_mask(dims):
    X, Y, Z = dims
    gx, gy, gz = np.meshgrid(
        (np.arange(X) - (X - 1) / 2) / (0.42 * X),
        (np.arange(Y) - (Y - 1) / 2) / (0.42 * Y),
        (np.arange(Z) - (Z - 1) / 2) / (0.42 * Z),
        indexing="ij",
    )
    return gx ** 2 + gy ** 2 + gz ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec) -> Volume4D:
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims
    mask = _ellipsoid_mask(dims)

    lo, hi = spec.aniso_range
    lam = np.stack(
        [lo + (hi - lo) * _cosine_field(rng, dims, spec.structure_scale)
         for _ in range(3)], axis=-1)
    angles = [np.pi * _cosine_field(rng, dims, spec.structure_scale)
              for _ in range(3)]
    R = _rotations(*angles)
    # D = R diag(lam) R^T, assembled channel-wise
    D = np.einsum("...ij,...j,...kj->...ik", R, lam, R)
    data = np.stack(
        [D[..., 0, 0], D[..., 1, 1], D[..., 2, 2],
         D[..., 0, 1], D[..., 0, 2], D[..., 1, 2]], axis=-1,
    ).astype(np.float32)
    data[~mask] = 0.0

    if spec.anomaly is not None:
        center = np.asarray(spec.anomaly["center"], float)
        radius = float(spec.anomaly["radius"])
        value = float(spec.anomaly.get("value", (lo + hi) / 2))
        gx, gy, gz = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
        sphere = ((gx - center[0]) ** 2 + (gy - center[1]) ** 2
                  + (gz - center[2]) ** 2) <= radius ** 2
        if not sphere.any():
            raise GeometryError("anomaly sphere contains no voxels")
        if not mask[sphere].all():
            raise GeometryError("anomaly sphere extends outside the foreground mask")
        # homogeneous isotropic tensor: diag(value), zero off-diagonals
        data[sphere] = np.array([value, value, value, 0, 0, 0], np.float32)

    return Volume4D(data=data, spacing=(1.0, 1.0, 1.0), mask=mask)


def inject_outliers(vol: Volume4D, fraction: float, magnitude: float = 3.0,
                    seed: int = 0):
    """Replace a random voxel subset's channels with +-magnitude x the
    per-channel p99.9 of |values| over foreground. Returns the corrupted
    copy and the corruption mask (for exclusion from evaluation)."""
    if not 0 <= fraction < 1:
        raise ContractError(f"fraction must be in [0,1), got {fraction}")
    data = vol.data.copy()
    corrupted = np.zeros(vol.dims[:3], dtype=bool)
    if fraction == 0.0:
        return Volume4D(data, vol.spacing, vol.mask), corrupted
    mask = vol.mask if vol.mask is not None else np.ones(vol.dims[:3], bool)
    rng = np.random.default_rng(seed)
    hit = mask & (rng.random(vol.dims[:3]) < fraction)
    fg = np.abs(vol.data[mask])
    p999 = _nearest_rank_percentile(fg, 99.9)       # per channel
    signs = rng.choice([-1.0, 1.0], size=(int(hit.sum()), vol.dims[3]))
    data[hit] = (signs * magnitude * p999).astype(np.float32)
    corrupted[hit] = True
    return Volume4D(data, vol.spacing, vol.mask), corrupted


def _nearest_rank_percentile(samples, q):
    """Nearest-rank percentile along axis 0 of an (N, C) sample block."""
    s = np.sort(samples, axis=0)
    n = s.shape[0]
    idx = min(n - 1, max(0, int(np.ceil(q / 100.0 * n)) - 1))
    return s[idx]
