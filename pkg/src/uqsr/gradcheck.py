"""Finite-difference verification of analytic gradients.

`finite_diff_check` is the generic harness; `run_gradcheck_suite` wires
it to every differentiable operation the networks and losses use and is
what the `gradcheck` CLI subcommand runs. Checks execute in float64 with
central differences so that failures isolate algorithmic errors rather
than rounding.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


def finite_diff_check(f, params, h=1e-5, max_coords=40, seed=0, atol=1e-6):
    """Max relative error between analytic and numeric gradients.

    `f` must be a deterministic scalar function of the `params` tensors
    (fix any noise seed before calling). Up to `max_coords` coordinates
    per parameter are probed, chosen by a seeded draw.

    Returns max over probed coordinates of
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12). Coordinates
    where both magnitudes sit below `atol` are counted as matching: a
    central difference cannot resolve gradients beneath its own rounding
    noise (~eps*|f|/h), so the ratio carries no information there.
    """
    loss_a = f()
    loss_b = f()
    if not np.array_equal(np.asarray(loss_a.data), np.asarray(loss_b.data)):
        raise ContractError(
            "function is not deterministic under the fixed seed; untestable"
        )

    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            hi = float(f().data)
            flat[c] = orig - h
            lo = float(f().data)
            flat[c] = orig
            numeric = (hi - lo) / (2.0 * h)
            a = float(ga.reshape(-1)[c])
            if abs(a) < atol and abs(numeric) < atol:
                continue
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def run_gradcheck_suite(seed=0):
    """Gradient checks for every differentiable op; returns {name: max_err}.

    Covers conv3d, shuffle, softplus, batchnorm, mse_loss, hetero_nll,
    kl_approx, elbo_loss (fixed noise seed) and the Bayesian convolution.
    """
    from . import autodiff as ad
    from . import losses
    from .networks import LayerSpec, NetworkSpec, build_network

    rng = np.random.default_rng(seed)
    results = {}

    x = Tensor(rng.standard_normal((2, 5, 5, 5, 3)))
    w1 = _rand(rng, 3, 3, 3, 3, 4)
    b1 = _rand(rng, 4)
    w2 = _rand(rng, 3, 3, 3, 4, 2)
    b2 = _rand(rng, 2)

    def two_layer_conv():
        h = ad.conv3d(x, w1, b1).relu()
        return ad.conv3d(h, w2, b2).square().sum()

    results["conv3d"] = finite_diff_check(two_layer_conv, [w1, b1, w2, b2], seed=seed)

    xs = _rand(rng, 2, 3, 3, 3, 16)

    def shuffle_loss():
        return (ad.shuffle3d(xs, 2) * Tensor(mix)).square().sum()

    mix = np.random.default_rng(seed + 1).standard_normal((2, 6, 6, 6, 2))
    results["shuffle"] = finite_diff_check(shuffle_loss, [xs], seed=seed)

    xp = _rand(rng, 40)
    results["softplus"] = finite_diff_check(
        lambda: (xp.softplus() * Tensor(np.linspace(-1, 1, 40))).sum(), [xp], seed=seed
    )

    xb = _rand(rng, 4, 3, 3, 3, 5)
    gamma = _rand(rng, 5)
    beta = _rand(rng, 5)
    # weighted linear readout: a plain sum of squares is almost invariant
    # to the input under normalization, leaving nothing to check
    mixb = np.random.default_rng(seed + 4).standard_normal((4, 3, 3, 3, 5))

    def batchnorm_loss():
        mu = xb.mean(axis=(0, 1, 2, 3), keepdims=True)
        var = (xb - mu).square().mean(axis=(0, 1, 2, 3), keepdims=True)
        xn = (xb - mu) / (var + 1e-5).sqrt()
        return ((xn * gamma + beta) * Tensor(mixb)).sum()

    results["batchnorm"] = finite_diff_check(batchnorm_loss, [xb, gamma, beta], seed=seed)

    pred = _rand(rng, 2, 4, 4, 4, 3)
    target = Tensor(rng.standard_normal((2, 4, 4, 4, 3)))
    results["mse_loss"] = finite_diff_check(
        lambda: losses.mse_loss(pred, target), [pred], seed=seed
    )

    mu = _rand(rng, 2, 3, 3, 3, 2)
    raw = _rand(rng, 2, 3, 3, 3, 2)
    y = Tensor(rng.standard_normal((2, 3, 3, 3, 2)))
    results["hetero_nll"] = finite_diff_check(
        lambda: losses.hetero_nll_terms(mu, raw.softplus(), y).total, [mu, raw], seed=seed
    )

    la = Tensor(rng.uniform(-4, 2, size=30), requires_grad=True)
    results["kl_approx"] = finite_diff_check(
        lambda: losses.kl_approx(la), [la], seed=seed
    )

    spec = NetworkSpec(
        layers=[LayerSpec(kernel=3, filters=6), LayerSpec(kernel=1, filters=8, relu=False)],
        rate=1, channels=8, mode="heteroscedastic", dropout="var1",
    )
    net = build_network(spec, init_seed=seed, dtype=np.float64)
    xe = Tensor(rng.standard_normal((2, 5, 5, 5, 8)))
    ye = Tensor(rng.standard_normal((2, 3, 3, 3, 8)))

    def elbo():
        return losses.elbo_loss(net, xe, ye, S=2, seed=seed + 7, dataset_size=64,
                                batch_size=2).total

    results["elbo_loss"] = finite_diff_check(elbo, net.parameters(), max_coords=8, seed=seed)

    from .networks import VariationalConv3d

    layer = VariationalConv3d(3, 4, k=3, flavour="var1",
                              rng=np.random.default_rng(seed), dtype=np.float64)
    xv = Tensor(rng.standard_normal((2, 4, 4, 4, 3)))
    mixv = np.random.default_rng(seed + 2).standard_normal((2, 2, 2, 2, 4))

    def bayes():
        out = layer.forward(xv, rng=np.random.default_rng(seed + 3), stochastic=True)
        return (out * Tensor(mixv)).square().sum()

    results["bayes_conv"] = finite_diff_check(
        bayes, [layer.eta, layer.log_alpha, layer.bias], max_coords=20, seed=seed
    )
    return results
