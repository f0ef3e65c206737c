"""Monte Carlo prediction, uncertainty decomposition and derived maps.

Prediction runs T stochastic forward passes (posterior samples); the
predictive mean is the sample mean of the per-pass means, and the
predictive variance splits by the law of total variance into

* intrinsic:  average of the per-pass likelihood variances,
* parameter:  variance of the per-pass means across passes,

computed from the same samples so the identity holds to float64
accumulation error. For an arbitrary derived quantity g (mean
diffusivity, fractional anisotropy, ...) the split is estimated by
nested sampling: J likelihood draws per posterior sample, Bessel-corrected
within-sample variances averaged over samples (intrinsic) and the
Bessel-corrected variance of within-sample means (parameter).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import patches as pp
from .autodiff import Tensor, no_grad
from .errors import ContractError, DimensionError
from .volume import Volume4D

_NEG_SLACK = 1e-12   # MC variance estimates may go this far negative


@dataclass
class InferenceConfig:
    T: int = 200          # posterior samples
    J: int = 10           # likelihood samples per posterior sample
    seed: int = 0
    patch: int = 16       # preferred low-res tile side at inference

    def __post_init__(self):
        if self.T < 1:
            raise ContractError(f"T must be >= 1, got {self.T}")
        if self.J < 2:
            raise ContractError(f"J must be >= 2 (Bessel correction), got {self.J}")


@dataclass
class UncertaintyDecomposition:
    intrinsic: np.ndarray
    parameter: np.ndarray
    total: np.ndarray
    clamped: int = 0


@dataclass
class DerivedQuantity:
    """Voxelwise transform of the channel vector: identity, MD or FA."""

    tag: str = "identity"

    def __post_init__(self):
        if self.tag not in ("identity", "md", "fa"):
            raise ContractError(f"unknown derived quantity {self.tag!r}")

    @property
    def scalar(self):
        return self.tag in ("md", "fa")

    def apply(self, arr: np.ndarray) -> np.ndarray:
        if self.tag == "identity":
            return arr
        if arr.shape[-1] != 6:
            raise DimensionError(
                f"{self.tag} needs 6 tensor channels, got {arr.shape[-1]}"
            )
        if self.tag == "md":
            return compute_md(arr)[..., None]
        return compute_fa(arr)[..., None]


def compute_md(dt: np.ndarray) -> np.ndarray:
    """Mean diffusivity: trace/3 of (Dxx,Dyy,Dzz,Dxy,Dxz,Dyz) tensors."""
    if dt.shape[-1] != 6:
        raise DimensionError(f"expected 6 channels, got {dt.shape[-1]}")
    return (dt[..., 0] + dt[..., 1] + dt[..., 2]) / 3.0


def compute_fa(dt: np.ndarray) -> np.ndarray:
    """Fractional anisotropy via tensor invariants (no eigendecomposition):
    sqrt(3/2 * ||D - MD*I||_F^2 / ||D||_F^2), clamped to [0, 1]; zero
    tensors map to 0 by convention."""
    if dt.shape[-1] != 6:
        raise DimensionError(f"expected 6 channels, got {dt.shape[-1]}")
    dt = np.asarray(dt, dtype=np.float64)
    md = compute_md(dt)
    dev = ((dt[..., 0] - md) ** 2 + (dt[..., 1] - md) ** 2 + (dt[..., 2] - md) ** 2
           + 2.0 * (dt[..., 3] ** 2 + dt[..., 4] ** 2 + dt[..., 5] ** 2))
    norm = (dt[..., 0] ** 2 + dt[..., 1] ** 2 + dt[..., 2] ** 2
            + 2.0 * (dt[..., 3] ** 2 + dt[..., 4] ** 2 + dt[..., 5] ** 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        fa = np.sqrt(1.5 * dev / norm)
    fa = np.where(norm > 0, fa, 0.0)
    return np.clip(fa, 0.0, 1.0)


def _sample_seeds(seed, tile=0):
    return lambda t: np.random.default_rng([int(seed), int(tile), int(t)])


def _mc_moments(net, x: np.ndarray, cfg: InferenceConfig, tile=0):
    """Float64 accumulators over T passes: mean, E[var], E[mu^2]."""
    make_rng = _sample_seeds(cfg.seed, tile)
    xt = Tensor(np.ascontiguousarray(x))
    s_mu = s_mu2 = s_var = None
    with no_grad():
        for t in range(cfg.T):
            pred = net.forward(xt, rng=make_rng(t), stochastic=net.is_stochastic)
            mu = pred.mean.data.astype(np.float64)
            var = (pred.var.data.astype(np.float64) if pred.var is not None
                   else np.zeros_like(mu))
            if s_mu is None:
                s_mu, s_mu2, s_var = mu.copy(), mu * mu, var.copy()
            else:
                s_mu += mu
                s_mu2 += mu * mu
                s_var += var
    T = float(cfg.T)
    return s_mu / T, s_var / T, s_mu2 / T


def _clamp_nonneg(arr):
    neg = arr < 0
    bad = arr < -_NEG_SLACK
    n = int(bad.sum())
    return np.where(neg, 0.0, arr), n


def mc_predict(net, x: np.ndarray, cfg: InferenceConfig, tile=0):
    """Predictive mean and diagonal variance over T posterior samples."""
    mean, e_var, e_mu2 = _mc_moments(net, x, cfg, tile)
    var = e_var + e_mu2 - mean * mean
    var, _ = _clamp_nonneg(var)
    return mean, var


def decompose_identity(net, x: np.ndarray, cfg: InferenceConfig,
                       tile=0) -> UncertaintyDecomposition:
    """Closed-form split of the MC predictive variance (g = identity)."""
    if net.spec.mode != "heteroscedastic":
        raise ContractError("decomposition needs a heteroscedastic network")
    mean, e_var, e_mu2 = _mc_moments(net, x, cfg, tile)
    param = e_mu2 - mean * mean
    param, clamped = _clamp_nonneg(param)
    total = e_var + param
    return UncertaintyDecomposition(intrinsic=e_var, parameter=param,
                                    total=total, clamped=clamped)


def decompose_transform(net, x: np.ndarray, g: DerivedQuantity,
                        cfg: InferenceConfig, tile=0, denorm=None):
    """Sampled split of the predictive variance of g(y).

    For each posterior sample t draw J outputs y ~ N(mu_t, diag var_t),
    map through g (after optional denormalization), and combine the
    Bessel-corrected within/between variances. Returns the decomposition
    and the grand-mean g map.
    """
    if cfg.J < 2:
        raise ContractError("sampled decomposition needs J >= 2")
    if net.spec.mode != "heteroscedastic":
        raise ContractError("decomposition needs a heteroscedastic network")
    make_rng = _sample_seeds(cfg.seed, tile)
    xt = Tensor(np.ascontiguousarray(x))
    mean_sum = None
    within_sum = None
    means = []
    with no_grad():
        for t in range(cfg.T):
            rng = make_rng(t)
            pred = net.forward(xt, rng=rng, stochastic=net.is_stochastic)
            mu = pred.mean.data.astype(np.float64)
            sd = np.sqrt(pred.var.data.astype(np.float64))
            gs_sum = gs_sq = None
            for _ in range(cfg.J):
                y = mu + sd * rng.standard_normal(mu.shape)
                if denorm is not None:
                    y = y * denorm[1] + denorm[0]
                gy = g.apply(y)
                if gs_sum is None:
                    gs_sum, gs_sq = gy.copy(), gy * gy
                else:
                    gs_sum += gy
                    gs_sq += gy * gy
            J = float(cfg.J)
            m_t = gs_sum / J
            v_t = (gs_sq - J * m_t * m_t) / (J - 1.0)   # Bessel within-sample
            means.append(m_t)
            mean_sum = m_t.copy() if mean_sum is None else mean_sum + m_t
            within_sum = v_t.copy() if within_sum is None else within_sum + v_t
    T = float(cfg.T)
    grand = mean_sum / T
    intrinsic = within_sum / T
    if cfg.T > 1:
        param = sum((m - grand) ** 2 for m in means) / (T - 1.0)
    else:
        param = np.zeros_like(grand)
    intrinsic, c1 = _clamp_nonneg(intrinsic)
    param, c2 = _clamp_nonneg(param)
    dec = UncertaintyDecomposition(intrinsic=intrinsic, parameter=param,
                                   total=intrinsic + param, clamped=c1 + c2)
    return dec, grand


def ensemble_combine(members):
    """Inverse-variance weighted fusion of (mean, variance) maps."""
    if len(members) == 0:
        raise ContractError("ensemble needs at least one member")
    if len(members) == 1:
        return members[0]
    w_sum = None
    wm_sum = None
    import warnings

    for mean, var in members:
        var = np.asarray(var, dtype=np.float64)
        if np.any(var <= 0):
            warnings.warn("zero-variance ensemble member; weight capped at 1e12")
        w = np.minimum(1.0 / np.maximum(var, 0.0), 1e12)
        contrib = w * mean
        w_sum = w.copy() if w_sum is None else w_sum + w
        wm_sum = contrib if wm_sum is None else wm_sum + contrib
    return wm_sum / w_sum, 1.0 / w_sum


@dataclass
class SuperResolved:
    mean: Volume4D
    variance: Volume4D
    intrinsic: Volume4D | None
    parameter: Volume4D | None
    validity: np.ndarray
    derived: dict = field(default_factory=dict)
    clamped: int = 0


def superresolve_volume(nets, lo: Volume4D, cfg: InferenceConfig,
                        norm_stats: pp.NormStats, derived=(),
                        clip_input=True) -> SuperResolved:
    """Tile the low-res volume, run MC inference per tile, stitch all maps.

    `nets` may be one network or an ensemble; ensembles fuse tile-wise by
    inverse intrinsic variance and skip the decomposition maps.
    """
    if not isinstance(nets, (list, tuple)):
        nets = [nets]
    net = nets[0]
    r, margin = net.spec.rate, net.margin
    for other in nets[1:]:
        if other.spec.rate != r or other.margin != margin:
            raise ContractError("ensemble members must share rate and margin")
    if lo.dims[3] != net.spec.channels:
        raise DimensionError(
            f"volume has {lo.dims[3]} channels, network expects {net.spec.channels}"
        )

    normed = pp.normalize_volume(lo, norm_stats, clip=clip_input)
    plans = pp.plan_tiling(lo.dims, cfg.patch, margin)
    out_dims = tuple(d * r for d in lo.dims[:3]) + (lo.dims[3],)
    hetero = net.spec.mode == "heteroscedastic"
    want_decomp = hetero and len(nets) == 1

    std = norm_stats.std.astype(np.float64)
    mean_off = norm_stats.mean.astype(np.float64)

    mean_tiles, var_tiles, intr_tiles, par_tiles = [], [], [], []
    g_tiles = {g.tag: [] for g in derived}
    clamped = 0
    tile_idx = 0
    for ox, nx in plans[0]:
        for oy, ny in plans[1]:
            for oz, nz in plans[2]:
                x = normed.data[None, ox:ox + nx, oy:oy + ny, oz:oz + nz, :]
                origin = (ox, oy, oz)
                if want_decomp:
                    # one MC sweep serves mean, variance and the split
                    mean, e_var, e_mu2 = _mc_moments(net, x, cfg, tile=tile_idx)
                    param, nclamp = _clamp_nonneg(e_mu2 - mean * mean)
                    clamped += nclamp
                    mu_map, var_map = mean, e_var + param
                    intr_tiles.append((origin, e_var[0] * std ** 2))
                    par_tiles.append((origin, param[0] * std ** 2))
                elif len(nets) > 1:
                    # fuse by inverse intrinsic variance per tile
                    fused = []
                    for m in nets:
                        mean, e_var, e_mu2 = _mc_moments(m, x, cfg, tile=tile_idx)
                        intr = e_var if hetero else np.maximum(
                            e_mu2 - mean * mean, 0.0
                        )
                        fused.append((mean, np.maximum(intr, 1e-12)))
                    mu_map, var_map = ensemble_combine(fused)
                else:
                    mu_map, var_map = mc_predict(net, x, cfg, tile=tile_idx)
                for g in derived:
                    dec_g, grand = decompose_transform(
                        net, x, g, cfg, tile=tile_idx, denorm=(mean_off, std)
                    )
                    g_tiles[g.tag].append((origin, grand[0], dec_g.intrinsic[0],
                                           dec_g.parameter[0]))
                mean_tiles.append((origin, mu_map[0] * std + mean_off))
                var_tiles.append((origin, var_map[0] * std ** 2))
                tile_idx += 1

    def _stitch(tiles, C):
        arrs = [(o, np.ascontiguousarray(c.astype(np.float32))) for o, c in tiles]
        return pp.stitch_prediction(arrs, out_dims[:3] + (C,), r, margin)

    C = lo.dims[3]
    spacing = tuple(s / r for s in lo.spacing)
    mean_map, validity = _stitch(mean_tiles, C)
    var_map, _ = _stitch(var_tiles, C)
    result = SuperResolved(
        mean=Volume4D(mean_map, spacing, validity),
        variance=Volume4D(var_map, spacing, validity),
        intrinsic=None, parameter=None, validity=validity, clamped=clamped,
    )
    if want_decomp:
        intr_map, _ = _stitch(intr_tiles, C)
        par_map, _ = _stitch(par_tiles, C)
        result.intrinsic = Volume4D(intr_map, spacing, validity)
        result.parameter = Volume4D(par_map, spacing, validity)
    for g in derived:
        packed = g_tiles[g.tag]
        Cg = packed[0][1].shape[-1]
        gm, _ = _stitch([(o, m) for o, m, _, _ in packed], Cg)
        gi, _ = _stitch([(o, i) for o, _, i, _ in packed], Cg)
        gp, _ = _stitch([(o, p) for o, _, _, p in packed], Cg)
        result.derived[g.tag] = {
            "mean": Volume4D(gm, spacing, validity),
            "intrinsic": Volume4D(gi, spacing, validity),
            "parameter": Volume4D(gp, spacing, validity),
        }
    return result
