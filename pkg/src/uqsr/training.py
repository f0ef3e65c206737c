"""Adam optimization, validation-based model selection, region metrics.

Training follows the recipe: Adam at lr 1e-3, betas (0.9, 0.999),
minibatches of 12, half the pairs held out for validation, best model
picked by validation MSE (MC-averaged over 8 passes for stochastic
networks). A NaN loss or gradient aborts back to the last epoch-end
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .autodiff import Tensor, no_grad
from .errors import ContractError
from .networks import SRNetwork
from .patches import EXTERIOR, INTERIOR, PatchPair, plan_tiling

LOSSES = ("mse", "hetero", "elbo", "hetero+elbo")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch: int = 12
    epochs: int = 200
    S: int = 1
    val_fraction: float = 0.5
    seed: int = 0
    loss: str = "mse"
    val_mc: int = 8        # MC passes for validation of stochastic nets
    select: str = "best"   # best: min-val-MSE weights; last: final epoch

    def __post_init__(self):
        if self.select not in ("best", "last"):
            raise ContractError(f"select must be best|last, got {self.select!r}")
        if not 0 < self.val_fraction < 1:
            raise ContractError(f"val_fraction must be in (0,1), got {self.val_fraction}")
        if self.batch < 1:
            raise ContractError(f"batch must be >= 1, got {self.batch}")
        if self.loss not in LOSSES:
            raise ContractError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.S < 1:
            raise ContractError(f"S must be >= 1, got {self.S}")


class Adam:
    """Standard Adam with bias correction; skips steps on NaN gradients."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.faults = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self) -> bool:
        """Returns False (and records a fault) if any gradient is non-finite."""
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                self.faults += 1
                return False
            grads.append(g)
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return True


@dataclass
class TrainResult:
    history: list                  # rows: dict per epoch
    best_epoch: int
    best_val_mse: float
    aborted: bool = False


def _stack(pairs):
    x = np.stack([p.input for p in pairs]).astype(np.float32)
    y = np.stack([p.target for p in pairs]).astype(np.float32)
    return x, y


def _snapshot(net):
    return [np.array(p.data, copy=True) for p in net.parameters()]


def _restore(net, snap):
    for p, s in zip(net.parameters(), snap):
        p.data = np.array(s, copy=True)


def validation_mse(net: SRNetwork, x, y, mc_passes=8, seed=0, batch=64) -> float:
    """MSE of the (MC-averaged, for stochastic nets) prediction."""
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, x.shape[0], batch):
            xb = Tensor(x[s:s + batch])
            if net.is_stochastic:
                acc = None
                for t in range(mc_passes):
                    rng = np.random.default_rng([seed, s, t])
                    out = net.forward(xb, rng=rng, stochastic=True).mean.data
                    acc = out.astype(np.float64) if acc is None else acc + out
                pred = acc / mc_passes
            else:
                pred = net.forward(xb, stochastic=False).mean.data
            diff = pred - y[s:s + batch]
            total += float((diff * diff).sum())
            count += diff.size
    return total / count


def train(net: SRNetwork, pairs: list[PatchPair], cfg: TrainConfig) -> TrainResult:
    """Runs cfg.epochs epochs and leaves the best-validation weights on
    `net`. History rows carry epoch, train loss terms and validation MSE."""
    if len(pairs) < 2:
        raise ContractError("need at least 2 patch pairs")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(pairs))
    n_val = max(1, int(round(len(pairs) * cfg.val_fraction)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise ContractError("validation split leaves no training pairs")
    xval, yval = _stack([pairs[i] for i in val_idx])
    xtr, ytr = _stack([pairs[i] for i in train_idx])

    opt = Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    stochastic = net.spec.dropout != "none"
    hetero = net.spec.mode == "heteroscedastic"
    if cfg.loss in ("hetero", "hetero+elbo") and not hetero:
        raise ContractError(f"loss {cfg.loss!r} needs a heteroscedastic network")
    use_elbo = cfg.loss in ("elbo", "hetero+elbo")
    if use_elbo and not stochastic:
        raise ContractError("the evidence-bound loss needs a variational network")

    history = []
    best = (np.inf, -1, _snapshot(net))
    last_good = _snapshot(net)
    aborted = False

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_idx))
        sums = {"loss": 0.0, "M": 0.0, "H": 0.0, "KL": 0.0}
        steps = 0
        diverged = False
        for s in range(0, len(order), cfg.batch):
            sel = order[s:s + cfg.batch]
            x = Tensor(np.ascontiguousarray(xtr[sel]))
            y = Tensor(np.ascontiguousarray(ytr[sel]))
            step_seed = [cfg.seed, epoch, steps]
            opt.zero_grad()
            if use_elbo:
                bd = losses.elbo_loss(net, x, y, S=cfg.S,
                                      seed=(cfg.seed * 1000003 + epoch * 1009
                                            + steps) % 2 ** 31,
                                      dataset_size=len(train_idx),
                                      batch_size=len(sel))
                loss = bd.total
                sums["M"] += bd.mahalanobis
                sums["H"] += bd.entropy
                sums["KL"] += bd.kl
            else:
                srng = np.random.default_rng(step_seed)
                pred = net.forward(x, rng=srng if stochastic else None,
                                   stochastic=stochastic, train=True)
                if cfg.loss == "hetero":
                    bd = losses.hetero_nll(pred, y)
                    loss = bd.total
                    sums["M"] += bd.mahalanobis
                    sums["H"] += bd.entropy
                else:
                    loss = losses.mse_loss(pred.mean, y)
            lval = float(loss.data)
            if not np.isfinite(lval):
                diverged = True
                break
            loss.backward()
            opt.step()
            sums["loss"] += lval
            steps += 1
        if diverged:
            _restore(net, last_good)
            aborted = True
            break
        last_good = _snapshot(net)
        vmse = validation_mse(net, xval, yval, mc_passes=cfg.val_mc, seed=cfg.seed)
        row = {
            "epoch": epoch,
            "train_loss": sums["loss"] / max(1, steps),
            "train_M": sums["M"] / max(1, steps),
            "train_H": sums["H"] / max(1, steps),
            "train_KL": sums["KL"] / max(1, steps),
            "val_mse": vmse,
        }
        history.append(row)
        if vmse < best[0]:
            best = (vmse, epoch, _snapshot(net))

    if cfg.select == "best" and best[1] >= 0:
        _restore(net, best[2])
    return TrainResult(history=history, best_epoch=best[1],
                       best_val_mse=best[0] if best[1] >= 0 else float("nan"),
                       aborted=aborted)


def history_csv(history) -> str:
    lines = ["epoch,train_loss,train_M,train_H,train_KL,val_mse"]
    for row in history:
        lines.append("%d,%.8g,%.8g,%.8g,%.8g,%.8g" % (
            row["epoch"], row["train_loss"], row["train_M"],
            row["train_H"], row["train_KL"], row["val_mse"]))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------- metrics

PSNR_CAP = 300.0


def region_metrics(pred, truth, lo_mask, r: int, margin: int,
                   patch: int | None = None, exclude=None) -> dict:
    """RMSE/PSNR pooled over voxels of interior tiles and exterior tiles.

    A tile is interior when its low-res footprint lies entirely in the
    mask, exterior when it straddles the boundary. The default tile side
    is the receptive field (margin+1), i.e. each output block is labeled
    by exactly the input window that produced it. `exclude` masks out
    high-res voxels (e.g. injected outliers). Empty regions are reported
    as absent.
    """
    if patch is None:
        patch = margin + 1
    lo_dims = lo_mask.shape
    plans = plan_tiling(lo_dims + (truth.shape[3],), patch, margin)
    half = margin // 2
    fg_hi = np.repeat(np.repeat(np.repeat(lo_mask, r, 0), r, 1), r, 2)
    t_fg = truth[fg_hi]
    rng_range = float(t_fg.max() - t_fg.min()) if t_fg.size else 0.0

    pools = {INTERIOR: [], EXTERIOR: []}
    for ox, nx in plans[0]:
        for oy, ny in plans[1]:
            for oz, nz in plans[2]:
                win = lo_mask[ox:ox + nx, oy:oy + ny, oz:oz + nz]
                label = INTERIOR if win.all() else (EXTERIOR if win.any() else None)
                if label is None:
                    continue
                hx, hy, hz = (ox + half) * r, (oy + half) * r, (oz + half) * r
                mx, my, mz = (nx - margin) * r, (ny - margin) * r, (nz - margin) * r
                d = (pred[hx:hx + mx, hy:hy + my, hz:hz + mz, :]
                     - truth[hx:hx + mx, hy:hy + my, hz:hz + mz, :]).astype(np.float64)
                if exclude is not None:
                    keep = ~exclude[hx:hx + mx, hy:hy + my, hz:hz + mz]
                    d = d[keep]
                pools[label].append(d.reshape(-1))

    out = {}
    for label, chunks in pools.items():
        if not chunks:
            continue
        d = np.concatenate(chunks)
        if d.size == 0:
            continue
        rmse = float(np.sqrt((d * d).mean()))
        if rmse == 0.0:
            psnr = PSNR_CAP
        elif rng_range == 0.0:
            psnr = float("nan")
        else:
            psnr = min(PSNR_CAP, 20.0 * np.log10(rng_range / rmse))
        out[label] = {"rmse": rmse, "psnr": psnr, "voxels": int(d.size)}
    return out
