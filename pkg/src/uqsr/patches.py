"""Patch pipeline: simulated low resolution, pair extraction,
standardization and shift-and-stitch reconstruction.

Geometry: a low-res input cube of side n maps to a high-res target of
side m = (n - margin) * r placed centrally within the upsampled input
footprint; margin is the receptive-field side minus one. Tiling patches
at low-res stride n - margin makes the targets tessellate exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, GeometryError
from .volume import Volume4D, foreground_mask

INTERIOR, EXTERIOR, BACKGROUND = "interior", "exterior", "background"


@dataclass
class PatchPair:
    input: np.ndarray      # (n, n, n, C) float32
    target: np.ndarray     # (m, m, m, C) float32
    origin: tuple          # low-res voxel coordinate of the input cube
    region: str            # interior | exterior


@dataclass
class NormStats:
    mean: np.ndarray       # (C,)
    std: np.ndarray        # (C,)
    clip_lo: np.ndarray    # (C,) p0.1
    clip_hi: np.ndarray    # (C,) p99.9
    constant: np.ndarray   # (C,) bool: flagged, passed through unscaled

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ("mean", "std", "clip_lo", "clip_hi", "constant")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k]) for k in ("mean", "std", "clip_lo", "clip_hi")),
                   constant=np.asarray(d["constant"], bool))


def simulate_lowres(hi: Volume4D, r: int) -> Volume4D:
    """Per-channel r^3 mean filter then r-subsampling (block mean)."""
    if r < 1:
        raise ContractError(f"rate must be >= 1, got {r}")
    X, Y, Z, C = hi.dims
    if any(d % r for d in (X, Y, Z)):
        raise GeometryError(
            f"spatial dims {(X, Y, Z)} not divisible by r={r}; no implicit cropping"
        )
    if r == 1:
        return Volume4D(hi.data.copy(), hi.spacing,
                        None if hi.mask is None else hi.mask.copy())
    blocks = hi.data.reshape(X // r, r, Y // r, r, Z // r, r, C)
    data = blocks.mean(axis=(1, 3, 5)).astype(np.float32)
    mask = None
    if hi.mask is not None:
        mask = hi.mask.reshape(X // r, r, Y // r, r, Z // r, r).any(axis=(1, 3, 5))
    spacing = tuple(s * r for s in hi.spacing)
    return Volume4D(data, spacing, mask)


def nearest_upsample(lo: Volume4D, r: int) -> Volume4D:
    out = np.repeat(np.repeat(np.repeat(lo.data, r, 0), r, 1), r, 2)
    return Volume4D(out, tuple(s / r for s in lo.spacing))


def trilinear_upsample(lo: Volume4D, r: int) -> Volume4D:
    """Separable linear interpolation aligned with the block-mean
    downsampler: low-res voxel i sits at high-res coordinate i*r + (r-1)/2."""
    data = lo.data.astype(np.float64)
    for axis in range(3):
        n = data.shape[axis]
        u = (np.arange(n * r) - (r - 1) / 2) / r
        i0 = np.clip(np.floor(u).astype(int), 0, n - 1)
        i1 = np.clip(i0 + 1, 0, n - 1)
        w = np.clip(u - np.floor(u), 0.0, 1.0)
        w = np.where(u < 0, 0.0, np.where(u > n - 1, 1.0, w))
        a = np.take(data, i0, axis=axis)
        b = np.take(data, i1, axis=axis)
        shape = [1] * data.ndim
        shape[axis] = n * r
        w = w.reshape(shape)
        data = a * (1 - w) + b * w
    return Volume4D(data.astype(np.float32), tuple(s / r for s in lo.spacing))


def region_label(lo_mask: np.ndarray, origin, n: int) -> str:
    ox, oy, oz = origin
    window = lo_mask[ox:ox + n, oy:oy + n, oz:oz + n]
    if window.all():
        return INTERIOR
    if window.any():
        return EXTERIOR
    return BACKGROUND


def extract_patch_pairs(hi: Volume4D, lo: Volume4D, n: int, r: int,
                        margin: int, count: int, seed: int) -> list[PatchPair]:
    """`count` pairs over uniformly sampled foreground-touching origins.

    Sampling is without replacement while count <= available origins,
    with replacement beyond that; deterministic under the seed.
    """
    if n <= margin:
        raise ContractError(f"patch side n={n} must exceed margin={margin}")
    if margin % 2:
        raise ContractError(f"margin must be even (odd kernels), got {margin}")
    m = (n - margin) * r
    lX, lY, lZ, C = lo.dims
    if any(lo.dims[i] * r != hi.dims[i] for i in range(3)):
        raise GeometryError(
            f"low-res dims {lo.dims[:3]} x r={r} do not match high-res {hi.dims[:3]}"
        )
    lo_mask = lo.mask if lo.mask is not None else foreground_mask(lo)

    valid = []
    for ox in range(lX - n + 1):
        for oy in range(lY - n + 1):
            for oz in range(lZ - n + 1):
                label = region_label(lo_mask, (ox, oy, oz), n)
                if label != BACKGROUND:
                    valid.append(((ox, oy, oz), label))
    if not valid:
        raise ContractError("no valid patch origins intersect the foreground")

    rng = np.random.default_rng(seed)
    if count <= len(valid):
        picks = rng.choice(len(valid), size=count, replace=False)
    else:
        picks = rng.choice(len(valid), size=count, replace=True)

    half = margin // 2
    pairs = []
    for idx in picks:
        (ox, oy, oz), label = valid[idx]
        inp = lo.data[ox:ox + n, oy:oy + n, oz:oz + n, :]
        hx, hy, hz = (ox + half) * r, (oy + half) * r, (oz + half) * r
        tgt = hi.data[hx:hx + m, hy:hy + m, hz:hz + m, :]
        pairs.append(PatchPair(input=inp.copy(), target=tgt.copy(),
                               origin=(ox, oy, oz), region=label))
    return pairs


# -------------------------------------------------------- normalization

def _nearest_rank(sorted_col, q):
    n = sorted_col.shape[0]
    idx = min(n - 1, max(0, int(np.ceil(q / 100.0 * n)) - 1))
    return sorted_col[idx]


def fit_norm_stats(vol: Volume4D, mask: np.ndarray | None = None) -> NormStats:
    """Per-channel foreground mean/std plus nearest-rank p0.1/p99.9 bounds."""
    mask = mask if mask is not None else (
        vol.mask if vol.mask is not None else foreground_mask(vol)
    )
    fg = vol.data[mask]
    if fg.shape[0] < 2:
        raise ContractError("need at least 2 foreground voxels per channel")
    mean = fg.mean(axis=0)
    std = fg.std(axis=0)
    s = np.sort(fg, axis=0)
    clip_lo = _nearest_rank(s, 0.1)
    clip_hi = _nearest_rank(s, 99.9)
    constant = std == 0
    if constant.any():
        warnings.warn(
            f"channels {np.where(constant)[0].tolist()} are constant; passed through unscaled"
        )
    std = np.where(constant, 1.0, std)
    return NormStats(mean=mean.astype(np.float64), std=std.astype(np.float64),
                     clip_lo=clip_lo.astype(np.float64),
                     clip_hi=clip_hi.astype(np.float64), constant=constant)


def _norm_array(arr, stats: NormStats, clip: bool):
    out = arr.astype(np.float32, copy=True)
    if clip:
        out = np.clip(out, stats.clip_lo.astype(np.float32),
                      stats.clip_hi.astype(np.float32))
    return ((out - stats.mean) / stats.std).astype(np.float32)


def apply_norm(pairs: list[PatchPair], stats: NormStats, clip: bool = True):
    """Standardize input and target cubes channel-wise (clip first)."""
    return [PatchPair(input=_norm_array(p.input, stats, clip),
                      target=_norm_array(p.target, stats, clip),
                      origin=p.origin, region=p.region) for p in pairs]


def normalize_volume(vol: Volume4D, stats: NormStats, clip: bool = True) -> Volume4D:
    return Volume4D(_norm_array(vol.data, stats, clip), vol.spacing, vol.mask)


def denormalize_mean(arr: np.ndarray, stats: NormStats) -> np.ndarray:
    return (arr * stats.std + stats.mean).astype(np.float32)


def denormalize_variance(arr: np.ndarray, stats: NormStats) -> np.ndarray:
    return (arr * stats.std ** 2).astype(np.float32)


# ----------------------------------------------------- dataset persistence

def save_patch_dataset(stem, hi: Volume4D, lo: Volume4D, pairs: list[PatchPair]):
    """Persist a patch dataset as the two UQV1 volumes plus a text index
    (one line per pair: origin x,y,z and region label)."""
    from .volume import write_volume

    write_volume(hi, f"{stem}.hi.uqv")
    write_volume(lo, f"{stem}.lo.uqv")
    with open(f"{stem}.index.txt", "w") as f:
        for p in pairs:
            f.write(f"{p.origin[0]} {p.origin[1]} {p.origin[2]} {p.region}\n")


def load_patch_dataset(stem, n: int, r: int, margin: int) -> list[PatchPair]:
    """Rebuild the pairs recorded by `save_patch_dataset`."""
    from .volume import read_volume

    hi = read_volume(f"{stem}.hi.uqv")
    lo = read_volume(f"{stem}.lo.uqv")
    m = (n - margin) * r
    half = margin // 2
    pairs = []
    with open(f"{stem}.index.txt") as f:
        for lineno, line in enumerate(f):
            parts = line.split()
            if len(parts) != 4 or parts[3] not in (INTERIOR, EXTERIOR):
                raise ContractError(
                    f"malformed index line {lineno + 1}: {line.rstrip()!r}"
                )
            ox, oy, oz = (int(v) for v in parts[:3])
            hx, hy, hz = (ox + half) * r, (oy + half) * r, (oz + half) * r
            pairs.append(PatchPair(
                input=lo.data[ox:ox + n, oy:oy + n, oz:oz + n, :].copy(),
                target=hi.data[hx:hx + m, hy:hy + m, hz:hz + m, :].copy(),
                origin=(ox, oy, oz), region=parts[3],
            ))
    return pairs


# ------------------------------------------------------------- stitching

def stitch_prediction(patches, out_dims, r: int, margin: int = 0):
    """Tessellate (low-res origin, m^3xC cube) predictions into a volume.

    Every high-res voxel must be covered at most once; overlaps raise with
    the first colliding voxel. Boundary voxels unreachable by any patch
    stay zero and are flagged off in the returned validity mask.
    """
    X, Y, Z, C = out_dims
    out = np.zeros(out_dims, dtype=np.float32)
    covered = np.zeros((X, Y, Z), dtype=bool)
    half = margin // 2
    for origin, cube in patches:
        if cube.ndim != 4 or cube.shape[3] != C:
            raise DimensionError(f"patch block must be (mx,my,mz,{C}), got {cube.shape}")
        mx, my, mz = cube.shape[:3]
        hx, hy, hz = ((o + half) * r for o in origin)
        if hx + mx > X or hy + my > Y or hz + mz > Z:
            raise GeometryError(
                f"patch at origin {origin} exceeds output dims {out_dims[:3]}"
            )
        window = covered[hx:hx + mx, hy:hy + my, hz:hz + mz]
        if window.any():
            first = np.argwhere(window)[0]
            voxel = (int(first[0] + hx), int(first[1] + hy), int(first[2] + hz))
            raise ContractError(f"overlapping patch targets; first collision at voxel {voxel}")
        out[hx:hx + mx, hy:hy + my, hz:hz + mz, :] = cube
        window[:] = True
    return out, covered


def plan_tiling(lo_dims, patch: int, margin: int):
    """Per-axis (origin, size) lists whose outputs tessellate the valid
    region exactly once. The last patch per axis shrinks to fit (the
    stack is fully convolutional, so any size above the receptive field
    works)."""
    if patch <= margin:
        raise ContractError(f"patch side {patch} must exceed margin {margin}")
    plans = []
    for X in lo_dims[:3]:
        if X <= margin:
            raise GeometryError(f"axis extent {X} cannot cover margin {margin}")
        axis = []
        o = 0
        while True:
            size = min(patch, X - o)
            axis.append((o, size))
            nxt = o + size - margin
            if o + size >= X:
                break
            o = nxt
        plans.append(axis)
    return plans
