"""Squeeze-and-Excitation, Group Normalization and Adaptive Group Normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

LEAKY_SLOPE = 0.01
GN_EPS = 1e-5


def se_reduction(channels: int, preferred: int = 16, min_hidden: int = 4) -> int:
    """Largest power-of-two ratio <= ``preferred`` dividing ``channels`` with >= ``min_hidden`` units left."""
    r = preferred
    while r > 1:
        if channels % r == 0 and channels // r >= min_hidden:
            return r
        r //= 2
    return 1


def gn_groups(channels: int, max_groups: int = 8) -> int:
    return max(g for g in range(1, max_groups + 1) if channels % g == 0)


# layer descriptions -----------------------------------------------------------

@dataclass(frozen=True)
class AffineSpec:
    d_in: int
    d_out: int


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class SESpec:
    channels: int
    reduction: int | None = None


@dataclass(frozen=True)
class GNConfig:
    groups: int
    eps: float = GN_EPS

    def __post_init__(self):
        if self.groups < 1 or self.eps <= 0:
            raise ContractError(f"invalid GNConfig {self}")


@dataclass(frozen=True)
class AdaGNSpec:
    channels: int
    context_dim: int
    groups: int | None = None
    eps: float = GN_EPS
    leaky_slope: float = LEAKY_SLOPE


# parameter containers ---------------------------------------------------------

@dataclass
class AffineParams:
    weight: Tensor
    bias: Tensor

    def tensors(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor
    stride: int
    padding: int

    def tensors(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class SEParams:
    channels: int
    reduction: int
    fc1: AffineParams
    fc2: AffineParams

    def __post_init__(self):
        if self.channels % self.reduction:
            raise ContractError(f"SE: {self.channels} channels not divisible by r={self.reduction}")
        if self.fc2.weight.shape[0] != self.channels:
            raise ContractError("SE: fc2 output width must equal channel count")

    def tensors(self):
        return {"fc1.weight": self.fc1.weight, "fc1.bias": self.fc1.bias,
                "fc2.weight": self.fc2.weight, "fc2.bias": self.fc2.bias}


@dataclass
class AdaGNParams:
    gn: GNConfig
    context_dim: int
    fc: AffineParams
    leaky_slope: float = LEAKY_SLOPE

    @property
    def channels(self) -> int:
        return self.fc.weight.shape[0] // 2

    def __post_init__(self):
        if self.fc.weight.shape != (self.fc.weight.shape[0], self.context_dim) or self.fc.weight.shape[0] % 2:
            raise ContractError("AdaGN: fc must map context_dim -> 2*C")

    def tensors(self):
        return {"fc.weight": self.fc.weight, "fc.bias": self.fc.bias}


# initialization ---------------------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros(n), requires_grad=True)


def _affine(rng, d_in, d_out):
    return AffineParams(_uniform(rng, (d_out, d_in), d_in), _zeros(d_out))


def init_params(spec, seed: int):
    """Deterministically initialize the parameters described by ``spec``.

    Weights are uniform in +-1/sqrt(fan_in), biases zero.  AdaGN is the
    exception: its fc starts at zero weights with the scale-half bias at 1,
    so the layer begins as plain group normalization.
    """
    rng = np.random.default_rng(seed)
    if isinstance(spec, AffineSpec):
        return _affine(rng, spec.d_in, spec.d_out)
    if isinstance(spec, ConvLayerSpec):
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        return ConvParams(_uniform(rng, shape, fan_in), _zeros(spec.out_channels), spec.stride, spec.padding)
    if isinstance(spec, SESpec):
        r = spec.reduction or se_reduction(spec.channels)
        hidden = spec.channels // r
        return SEParams(spec.channels, r, _affine(rng, spec.channels, hidden), _affine(rng, hidden, spec.channels))
    if isinstance(spec, AdaGNSpec):
        c = spec.channels
        bias = np.zeros(2 * c)
        bias[c:] = 1.0
        fc = AffineParams(Tensor(np.zeros((2 * c, spec.context_dim)), requires_grad=True),
                          Tensor(bias, requires_grad=True))
        return AdaGNParams(GNConfig(spec.groups or gn_groups(c), spec.eps), spec.context_dim, fc, spec.leaky_slope)
    raise ContractError(f"no initializer for {type(spec).__name__}")


# forward ops ------------------------------------------------------------------

def _batched(x: Tensor):
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ContractError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def _unbatch(out: Tensor, squeeze: bool):
    return T.reshape(out, out.shape[1:]) if squeeze else out


def se_weights(f_in: Tensor, params: SEParams) -> Tensor:
    """Per-(sample, channel) attention weights in (0, 1)."""
    x, _ = _batched(f_in)
    if x.shape[1] != params.channels:
        raise ContractError(f"SE: input has {x.shape[1]} channels, params expect {params.channels}")
    pooled = T.global_avg_pool(x)
    hidden = T.relu(T.affine(pooled, params.fc1.weight, params.fc1.bias))
    return T.sigmoid(T.affine(hidden, params.fc2.weight, params.fc2.bias))


def se_forward(f_in: Tensor, params: SEParams) -> Tensor:
    x, squeeze = _batched(f_in)
    return _unbatch(T.scale_channels(x, se_weights(x, params)), squeeze)


def group_normalize(f_in: Tensor, cfg: GNConfig) -> Tensor:
    """Group normalization with no learned scale or shift."""
    x, squeeze = _batched(f_in)
    n, c, h, w = x.shape
    g = cfg.groups
    if c % g:
        raise ContractError(f"GN: {g} groups do not divide {c} channels")
    xg = x.data.reshape(n, g, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(cfg.eps))
    xhat = centered * rstd

    def bw(grad):
        gg = grad.reshape(n, g, -1)
        dx = rstd * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        T.accumulate(x, dx.reshape(x.shape))

    out = T.make_node(xhat.reshape(x.shape), (x,), bw, "group_norm")
    return _unbatch(out, squeeze)


def adagn_scale_shift(context: Tensor, params: AdaGNParams) -> tuple[Tensor, Tensor]:
    ctx = T.reshape(context, (1, -1)) if context.ndim == 1 else context
    if ctx.shape[1] != params.context_dim:
        raise ContractError(f"AdaGN: context width {ctx.shape[1]} != {params.context_dim}")
    act = T.leaky_relu(T.affine(ctx, params.fc.weight, params.fc.bias), params.leaky_slope)
    c = params.channels
    return T.slice_axis(act, c, 2 * c), T.slice_axis(act, 0, c)


def adagn_forward(f_in: Tensor, context: Tensor, params: AdaGNParams) -> Tensor:
    """GN(f_in) scaled and shifted per channel by a leaky-ReLU'd affine map of the context."""
    x, squeeze = _batched(f_in)
    if x.shape[1] != params.channels:
        raise ContractError(f"AdaGN: input has {x.shape[1]} channels, params expect {params.channels}")
    scale, shift = adagn_scale_shift(context, params)
    if scale.shape[0] != x.shape[0]:
        raise ContractError(f"AdaGN: {scale.shape[0]} contexts for a batch of {x.shape[0]}")
    out = T.shift_channels(T.scale_channels(group_normalize(x, params.gn), scale), shift)
    return _unbatch(out, squeeze)
