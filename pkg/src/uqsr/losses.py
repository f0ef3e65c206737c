"""Training objectives.

The heteroscedastic negative log-likelihood splits into a variance-
weighted squared-error term (the squared Mahalanobis distance under a
diagonal covariance) and a log-determinant entropy term; the additive
Gaussian constant is dropped. The evidence bound for variational
dropout adds the per-weight KL against the log-uniform prior, using the
sigmoid-polynomial approximation from the variational-dropout
literature, scaled by batch/dataset size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DimensionError

# diagonal-variance floor inside log/division; softplus already enforces
# positivity, this guards float32 underflow
VAR_FLOOR = 1e-8

# KL approximation constants from the cited variational-dropout work
_K1, _K2, _K3 = 0.63576, 1.87320, 1.48695


@dataclass
class LossBreakdown:
    """Scalar loss tensor plus the float values of its parts."""

    total: Tensor
    mahalanobis: float = 0.0
    entropy: float = 0.0
    kl: float = 0.0
    reconstruction: float = 0.0

    @property
    def value(self) -> float:
        return float(self.total.data)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {target.shape}")
    return (pred - target).square().mean()


def hetero_nll_terms(mean: Tensor, var: Tensor, target: Tensor) -> LossBreakdown:
    """M + H: batch-mean of per-sample sums over voxels and channels."""
    if mean.shape != target.shape or var.shape != target.shape:
        raise DimensionError(
            f"shape mismatch mean {mean.shape} / var {var.shape} / target {target.shape}"
        )
    # negative variance violates the contract; exact zeros (float32
    # softplus underflow) are what the floor below exists to absorb
    if np.any(var.data < 0):
        raise ContractError("heteroscedastic NLL requires nonnegative variances")
    n = mean.shape[0]
    var_f = var + VAR_FLOOR
    m = ((target - mean).square() / var_f).sum() / float(n)
    h = var_f.log().sum() / float(n)
    total = m + h
    return LossBreakdown(total=total, mahalanobis=float(m.data),
                         entropy=float(h.data))


def hetero_nll(prediction, target: Tensor) -> LossBreakdown:
    """NLL of a GaussianPrediction (mean tower + softplus variance tower)."""
    if prediction.var is None:
        raise ContractError("heteroscedastic NLL needs a variance map")
    return hetero_nll_terms(prediction.mean, prediction.var, target)


def kl_approx(log_alpha: Tensor) -> Tensor:
    """Per-weight KL(q||p) for the log-uniform prior, summed over weights.

    k1 - k1*sigmoid(k2 + k3*log_alpha) + 0.5*log(1 + 1/alpha); the last
    term is softplus(-log_alpha).
    """
    sig = (log_alpha * _K3 + _K2).sigmoid()
    per_weight = (-log_alpha).softplus() * 0.5 + (sig * (-_K1) + _K1)
    return per_weight.sum()


def sum_squared_error(pred: Tensor, target: Tensor) -> Tensor:
    """Batch-mean of per-sample summed squared error (fixed unit variance
    Gaussian NLL up to constants; N*mse for N voxels*channels)."""
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {target.shape}")
    return (pred - target).square().sum() / float(pred.shape[0])


def elbo_loss(net, x: Tensor, target: Tensor, S: int, seed: int,
              dataset_size: int, batch_size: int | None = None) -> LossBreakdown:
    """Negative evidence bound: MC reconstruction + scaled KL.

    reconstruction = (1/S) sum_s NLL(batch; theta_s) with theta_s drawn via
    local reparametrization; KL is summed over all variational kernels and
    scaled by batch_size/dataset_size (minibatch weighting).
    """
    if S < 1:
        raise ContractError(f"S must be >= 1, got {S}")
    if dataset_size < 1:
        raise ContractError("dataset_size must be positive")
    batch_size = batch_size or x.shape[0]

    recon = None
    m_val = h_val = 0.0
    for s in range(S):
        rng = np.random.default_rng([seed, s])
        pred = net.forward(x, rng=rng, stochastic=True, train=True)
        if net.spec.mode == "heteroscedastic":
            part = hetero_nll(pred, target)
            nll = part.total
            m_val += part.mahalanobis / S
            h_val += part.entropy / S
        else:
            nll = sum_squared_error(pred.mean, target)
        recon = nll if recon is None else recon + nll
    recon = recon / float(S)

    layers = net.variational_layers()
    kl_scale = batch_size / float(dataset_size)
    if layers:
        kl_total = layers[0].kl()
        for layer in layers[1:]:
            kl_total = kl_total + layer.kl()
        total = recon + kl_total * kl_scale
        kl_val = float(kl_total.data)
    else:
        total = recon
        kl_val = 0.0
    return LossBreakdown(total=total, mahalanobis=m_val, entropy=h_val,
                         kl=kl_val, reconstruction=float(recon.data))
