"""Network building blocks and architectures.

The super-resolution stack is a sequence of valid 3D convolutions
followed by a subpixel shuffle: spatial side (s - margin) * r comes out
of side s. The heteroscedastic variant owns two such stacks ("mean" and
"covariance" towers); the covariance output passes through softplus so
predicted variances stay strictly positive.

Every convolution can be variational: weights carry a mean kernel eta
and dropout rates alpha = exp(log_alpha) defining the factorized
posterior N(eta, alpha*eta^2). Sampling uses the local reparametrization:
the layer convolves the input with eta and the squared input with
alpha*eta^2, then injects unit Gaussian noise scaled by the resulting
standard deviation. Flavours: `var1` learns one rate per weight, `var2`
one per output filter, `gauss:p` freezes a shared rate at p/(1-p), and
`none` is a plain convolution.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, FormatError, GeometryError

# keeps sqrt differentiable when a sampled pre-activation variance
# underflows to exactly zero (all-zero receptive field after ReLU)
_VAR_TINY = 1e-12


@dataclass
class LayerSpec:
    kernel: int
    filters: int
    relu: bool = True
    batchnorm: bool = False


@dataclass
class NetworkSpec:
    """Architecture description; `layers` includes the final projection."""

    layers: list[LayerSpec]
    rate: int
    channels: int
    mode: str = "baseline"              # baseline | heteroscedastic
    dropout: str = "none"               # none | var1 | var2 | gauss:p

    def __post_init__(self):
        if self.mode not in ("baseline", "heteroscedastic"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if not (self.dropout in ("none", "var1", "var2")
                or self.dropout.startswith("gauss:")):
            raise ContractError(f"unknown dropout flavour {self.dropout!r}")
        want = self.channels * self.rate ** 3
        if self.layers[-1].filters != want:
            raise ContractError(
                f"final layer must emit channels*r^3 = {want} filters, "
                f"got {self.layers[-1].filters}"
            )

    @property
    def margin(self):
        return sum(l.kernel - 1 for l in self.layers)

    @classmethod
    def sr_default(cls, rate, channels=6, mode="baseline", dropout="none"):
        """The (3^3,50) -> (1^3,100) -> (3^3, C*r^3) stack."""
        return cls(
            layers=[
                LayerSpec(kernel=3, filters=50),
                LayerSpec(kernel=1, filters=100),
                LayerSpec(kernel=3, filters=channels * rate ** 3, relu=False),
            ],
            rate=rate, channels=channels, mode=mode, dropout=dropout,
        )

    def to_dict(self):
        return {
            "layers": [vars(l) for l in self.layers],
            "rate": self.rate, "channels": self.channels,
            "mode": self.mode, "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(layers=[LayerSpec(**l) for l in d["layers"]],
                   rate=d["rate"], channels=d["channels"],
                   mode=d["mode"], dropout=d["dropout"])


@dataclass
class GaussianPrediction:
    """Per-voxel, per-channel mean and strictly positive diagonal variance."""

    mean: Tensor
    var: Tensor | None


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class VariationalConv3d:
    """Convolution whose kernel is a factorized Gaussian posterior."""

    def __init__(self, cin, cout, k, flavour="none", rng=None, dtype=np.float32,
                 log_alpha_init=-6.0):
        rng = rng or np.random.default_rng()
        fan_in = cin * k ** 3
        self.k, self.cin, self.cout = k, cin, cout
        self.flavour = flavour
        self.eta = Tensor(_uniform(rng, (k, k, k, cin, cout), fan_in, dtype),
                          requires_grad=True)
        self.bias = Tensor(_uniform(rng, (cout,), fan_in, dtype),
                           requires_grad=True)
        if flavour == "var1":
            la = np.full((k, k, k, cin, cout), log_alpha_init, dtype)
            self.log_alpha = Tensor(la, requires_grad=True)
        elif flavour == "var2":
            la = np.full((1, 1, 1, 1, cout), log_alpha_init, dtype)
            self.log_alpha = Tensor(la, requires_grad=True)
        elif flavour.startswith("gauss:"):
            p = float(flavour.split(":", 1)[1])
            if not 0.0 < p < 1.0:
                raise ContractError(f"gaussian dropout rate must be in (0,1), got {p}")
            la = np.full((1, 1, 1, 1, 1), np.log(p / (1.0 - p)), dtype)
            self.log_alpha = Tensor(la, requires_grad=False)
        elif flavour == "none":
            self.log_alpha = None
        else:
            raise ContractError(f"unknown dropout flavour {flavour!r}")

    def parameters(self):
        ps = [self.eta, self.bias]
        if self.log_alpha is not None and self.log_alpha.requires_grad:
            ps.append(self.log_alpha)
        return ps

    def forward(self, x: Tensor, rng=None, stochastic=False) -> Tensor:
        mu = ad.conv3d(x, self.eta, self.bias)
        if not stochastic or self.log_alpha is None:
            return mu
        if rng is None:
            raise ContractError("stochastic forward requires an rng")
        var_kernel = self.log_alpha.exp() * self.eta.square()
        var = ad.conv3d(x.square(), var_kernel)
        dtype = mu.dtype if mu.dtype in (np.float32, np.float64) else np.float64
        eps = rng.standard_normal(mu.shape, dtype=dtype)
        return mu + (var + _VAR_TINY).sqrt() * Tensor(eps)

    def kl(self) -> Tensor:
        """KL(q||p) against the log-uniform prior, counted per weight."""
        from .losses import kl_approx

        if self.log_alpha is None:
            raise ContractError("deterministic layer has no KL term")
        multiplicity = self.eta.size / self.log_alpha.size
        return kl_approx(self.log_alpha) * float(multiplicity)


class BatchNorm3d:
    """Per-channel normalization with running statistics (momentum 0.9)."""

    def __init__(self, channels, rng=None, dtype=np.float32,
                 momentum=0.9, eps=1e-5):
        self.gamma = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x: Tensor, train: bool) -> Tensor:
        if train:
            mu = x.mean(axis=(0, 1, 2, 3), keepdims=True)
            var = (x - mu).square().mean(axis=(0, 1, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean = (m * self.running_mean
                                 + (1 - m) * mu.data.reshape(-1))
            self.running_var = (m * self.running_var
                                + (1 - m) * var.data.reshape(-1))
        else:
            mu = Tensor(self.running_mean.reshape(1, 1, 1, 1, -1))
            var = Tensor(self.running_var.reshape(1, 1, 1, 1, -1))
        xn = (x - mu) / (var + self.eps).sqrt()
        return xn * self.gamma + self.beta


class ConvStack:
    """Conv/(noise)/(batchnorm)/(relu) chain ending in a subpixel shuffle."""

    def __init__(self, spec: NetworkSpec, rng, dtype, prefix="",
                 log_alpha_init=-6.0):
        self.spec = spec
        self.prefix = prefix
        self.convs = []
        self.norms = []
        cin = spec.channels
        for ls in spec.layers:
            self.convs.append(VariationalConv3d(
                cin, ls.filters, ls.kernel, flavour=spec.dropout,
                rng=rng, dtype=dtype, log_alpha_init=log_alpha_init,
            ))
            self.norms.append(BatchNorm3d(ls.filters, dtype=dtype)
                              if ls.batchnorm else None)
            cin = ls.filters

    def forward(self, x: Tensor, rng=None, stochastic=False, train=False) -> Tensor:
        h = x
        for ls, conv, norm in zip(self.spec.layers, self.convs, self.norms):
            h = conv.forward(h, rng=rng, stochastic=stochastic)
            if norm is not None:
                h = norm.forward(h, train=train)
            if ls.relu:
                h = h.relu()
        return ad.shuffle3d(h, self.spec.rate)

    def parameters(self):
        ps = []
        for conv, norm in zip(self.convs, self.norms):
            ps.extend(conv.parameters())
            if norm is not None:
                ps.extend(norm.parameters())
        return ps

    def named_parameters(self):
        named = []
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            base = f"{self.prefix}conv{i}"
            named.append((f"{base}.eta", conv.eta))
            named.append((f"{base}.bias", conv.bias))
            if conv.log_alpha is not None:
                named.append((f"{base}.log_alpha", conv.log_alpha))
            if norm is not None:
                named.append((f"{base}.gamma", norm.gamma))
                named.append((f"{base}.beta", norm.beta))
                named.append((f"{base}.running_mean", norm.running_mean))
                named.append((f"{base}.running_var", norm.running_var))
        return named

    def variational_layers(self):
        return [c for c in self.convs if c.log_alpha is not None]


class SRNetwork:
    """Baseline or heteroscedastic super-resolution network."""

    def __init__(self, spec: NetworkSpec, init_seed=0, dtype=np.float32,
                 log_alpha_init=-6.0):
        rng = np.random.default_rng(init_seed)
        self.spec = spec
        self.dtype = dtype
        self.force_deterministic = False
        self.mean_net = ConvStack(spec, rng, dtype, prefix="mean.",
                                  log_alpha_init=log_alpha_init)
        self.var_net = (ConvStack(spec, rng, dtype, prefix="cov.",
                                  log_alpha_init=log_alpha_init)
                        if spec.mode == "heteroscedastic" else None)
        if self.var_net is not None:
            # start the predicted variance near the marginal target scale
            # (standardized data): softplus(-1.26) ~ 0.25, so the entropy
            # and Mahalanobis terms are balanced from the first step
            self.var_net.convs[-1].bias.data[...] = -1.26

    @property
    def margin(self):
        return self.spec.margin

    @property
    def is_stochastic(self):
        return self.spec.dropout != "none" and not self.force_deterministic

    def forward(self, x: Tensor, rng=None, stochastic=False,
                train=False) -> GaussianPrediction:
        if x.shape[4] != self.spec.channels:
            raise DimensionError(
                f"network expects {self.spec.channels} channels, got {x.shape[4]}"
            )
        if min(x.shape[1:4]) <= self.margin:
            raise GeometryError(
                f"input side {x.shape[1:4]} does not cover the receptive field "
                f"({self.margin + 1})"
            )
        stochastic = stochastic and not self.force_deterministic
        mean = self.mean_net.forward(x, rng=rng, stochastic=stochastic, train=train)
        if self.var_net is None:
            return GaussianPrediction(mean=mean, var=None)
        raw = self.var_net.forward(x, rng=rng, stochastic=stochastic, train=train)
        return GaussianPrediction(mean=mean, var=raw.softplus())

    def parameters(self):
        ps = self.mean_net.parameters()
        if self.var_net is not None:
            ps.extend(self.var_net.parameters())
        return ps

    def named_parameters(self):
        named = self.mean_net.named_parameters()
        if self.var_net is not None:
            named.extend(self.var_net.named_parameters())
        return named

    def variational_layers(self):
        layers = self.mean_net.variational_layers()
        if self.var_net is not None:
            layers.extend(self.var_net.variational_layers())
        return layers

    def output_side(self, input_side):
        return (input_side - self.margin) * self.spec.rate


def build_network(spec: NetworkSpec, init_seed=0, dtype=np.float32,
                  log_alpha_init=-6.0) -> SRNetwork:
    return SRNetwork(spec, init_seed=init_seed, dtype=dtype,
                     log_alpha_init=log_alpha_init)


def deterministic_mode(net: SRNetwork) -> SRNetwork:
    """Shallow copy whose Bayesian convolutions evaluate at eps = 0."""
    out = copy.copy(net)
    out.force_deterministic = True
    return out


# ------------------------------------------------------------ checkpoints

_CKPT_MAGIC = b"UQCK"
_CKPT_VERSION = 1


def save_checkpoint(path, net: SRNetwork, norm_stats=None, metadata=None):
    """JSON header + named little-endian float32 parameter blocks."""
    named = net.named_parameters()
    blocks, index, offset = [], [], 0
    for name, p in named:
        arr = (p.data if isinstance(p, Tensor) else p).astype("<f4")
        blocks.append(arr.tobytes())
        index.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blocks[-1])})
        offset += len(blocks[-1])
    header = {
        "format_version": _CKPT_VERSION,
        "spec": net.spec.to_dict(),
        "dropout": net.spec.dropout,
        "rate": net.spec.rate,
        "norm_stats": norm_stats,
        "metadata": metadata or {},
        "params": index,
    }
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(np.uint32(len(hbytes)).tobytes())
        f.write(hbytes)
        for b in blocks:
            f.write(b)


def load_checkpoint(path, dtype=np.float32):
    """Returns (net, norm_stats, metadata)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}", offset=0)
    hlen = int(np.frombuffer(raw[4:8], "<u4")[0])
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", offset=8) from exc
    if header.get("format_version") != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')}")
    spec = NetworkSpec.from_dict(header["spec"])
    net = SRNetwork(spec, init_seed=0, dtype=dtype)
    base = 8 + hlen
    by_name = dict(net.named_parameters())
    for entry in header["params"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise FormatError(
                f"checkpoint truncated: block {entry['name']} needs bytes "
                f"{start}..{end}, file has {len(raw)}", offset=len(raw),
            )
        arr = np.frombuffer(raw[start:end], "<f4").reshape(entry["shape"])
        target = by_name[entry["name"]]
        if isinstance(target, Tensor):
            target.data = arr.astype(dtype)
        else:  # running statistics buffers
            target[...] = arr.astype(target.dtype)
    return net, header.get("norm_stats"), header.get("metadata", {})
