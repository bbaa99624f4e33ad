"""AFF-Net: face, Rects and shared-weight eye streams with stacked SE fusion and AdaGN.

Parameters live in one flat ``name -> Tensor`` mapping.  The eye stream is
stored once under ``eye.*`` and used for both eyes, so weight sharing holds by
construction.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, GeometryError
from .layers import (
    AdaGNParams,
    AdaGNSpec,
    AffineParams,
    AffineSpec,
    ConvLayerSpec,
    ConvParams,
    GNConfig,
    SEParams,
    SESpec,
    adagn_forward,
    gn_groups,
    group_normalize,
    init_params,
    se_forward,
    se_reduction,
)
from .tensor import Tensor

VARIANTS = ("Full", "NoST", "NoSE", "NoAdaGN")


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int
    padding: int

    def __post_init__(self):
        if min(self.out_channels, self.kernel, self.stride) < 1 or self.padding < 0:
            raise GeometryError(f"invalid conv spec {self}")


def _convs(*tuples):
    return tuple(ConvSpec(*t) for t in tuples)


FACE_CONVS = _convs((48, 5, 2, 0), (96, 5, 1, 0), (128, 5, 1, 2), (192, 3, 1, 1), (128, 3, 2, 0), (64, 3, 2, 0))
EYE_CONVS = _convs((24, 5, 2, 0), (48, 5, 1, 0), (64, 5, 1, 1), (128, 3, 1, 1), (64, 3, 1, 1))


@dataclass(frozen=True)
class ModelConfig:
    face_convs: tuple = FACE_CONVS
    eye_convs: tuple = EYE_CONVS
    fusion_conv: ConvSpec = ConvSpec(64, 3, 2, 1)
    rects_fc_widths: tuple = (64, 96, 128, 64)
    face_fc_widths: tuple = (128, 64)
    eye_fc_width: int = 128
    head_widths: tuple = (128, 2)
    variant: str = "Full"
    face_size: int = 224
    eye_size: int = 112
    rects_dim: int = 12
    pool_kernel: int = 3
    pool_stride: int = 2
    # zero-based conv indices
    face_pool_after: tuple = (1, 2)
    eye_pool_after: tuple = (1, 2)
    face_se_after: tuple = (3, 4, 5)
    eye_se_after: tuple = (1, 3, 4)
    eye_stack_from: tuple = (2, 4)
    se_reduction: int = 16
    gn_max_groups: int = 8
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("face_convs", "eye_convs"):
            if key in d:
                d[key] = tuple(ConvSpec(**c) if isinstance(c, dict) else ConvSpec(*c) for c in d[key])
        if "fusion_conv" in d:
            c = d["fusion_conv"]
            d["fusion_conv"] = ConvSpec(**c) if isinstance(c, dict) else ConvSpec(*c)
        for key, val in list(d.items()):
            if isinstance(val, list):
                d[key] = tuple(val)
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def context_dim(self) -> int:
        return self.rects_fc_widths[-1] + self.face_fc_widths[-1]


def make_variant(config: ModelConfig, variant: str) -> ModelConfig:
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return dataclasses.replace(config, variant=variant)


def width_scaled(config: ModelConfig, divisor: int) -> ModelConfig:
    """Divide every conv's output channel count by ``divisor`` (rounding up)."""
    def scale(specs):
        return tuple(dataclasses.replace(s, out_channels=-(-s.out_channels // divisor)) for s in specs)

    return dataclasses.replace(
        config,
        face_convs=scale(config.face_convs),
        eye_convs=scale(config.eye_convs),
        fusion_conv=scale((config.fusion_conv,))[0],
    )


def tiny_config(variant: str = "Full") -> ModelConfig:
    """Architecture clone on 32x32 faces / 16x16 eyes with channels and widths divided by 8.

    Kernels shrink to 3 so the spatial chain stays positive at this size.  GN
    uses at most 2 groups: the fusion conv output is 1x1 here, and 8 groups of
    one value each would normalize the eye features away.
    """
    return ModelConfig(
        face_convs=_convs((6, 3, 1, 0), (12, 3, 1, 0), (16, 3, 1, 1), (24, 3, 1, 1), (16, 3, 2, 0), (8, 3, 1, 1)),
        eye_convs=_convs((3, 3, 1, 0), (6, 3, 1, 0), (8, 3, 1, 1), (16, 3, 1, 1), (8, 3, 1, 1)),
        fusion_conv=ConvSpec(8, 3, 2, 1),
        rects_fc_widths=(8, 12, 16, 8),
        face_fc_widths=(16, 8),
        eye_fc_width=16,
        head_widths=(16, 2),
        variant=variant,
        face_size=32,
        eye_size=16,
        gn_max_groups=2,
    )


# shape bookkeeping -------------------------------------------------------------

def _conv_shape(shape, spec: ConvSpec, name):
    c, h, w = shape
    ho = T.conv_out_extent(h, spec.kernel, spec.stride, spec.padding)
    wo = T.conv_out_extent(w, spec.kernel, spec.stride, spec.padding)
    if ho <= 0 or wo <= 0 or spec.kernel > h + 2 * spec.padding:
        raise GeometryError(f"{name}: {spec} produces a non-positive extent from {shape}")
    return (spec.out_channels, ho, wo)


def _pool_shape(shape, cfg: ModelConfig, name):
    c, h, w = shape
    if cfg.pool_kernel > min(h, w):
        raise GeometryError(f"{name}: pool window {cfg.pool_kernel} larger than {h}x{w}")
    return (c, (h - cfg.pool_kernel) // cfg.pool_stride + 1, (w - cfg.pool_kernel) // cfg.pool_stride + 1)


def shape_trace(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-sample output shape of every spatial layer and flatten, in execution order."""
    trace = []
    shape = (3, config.face_size, config.face_size)
    trace.append(("face.input", shape))
    for i, spec in enumerate(config.face_convs):
        shape = _conv_shape(shape, spec, f"face.conv{i + 1}")
        trace.append((f"face.conv{i + 1}", shape))
        if i in config.face_pool_after:
            shape = _pool_shape(shape, config, f"face.pool{i + 1}")
            trace.append((f"face.pool{i + 1}", shape))
    trace.append(("face.flatten", (int(np.prod(shape)),)))

    shape = (3, config.eye_size, config.eye_size)
    trace.append(("eye.input", shape))
    taps = {}
    for i, spec in enumerate(config.eye_convs):
        shape = _conv_shape(shape, spec, f"eye.conv{i + 1}")
        trace.append((f"eye.conv{i + 1}", shape))
        if i in config.eye_pool_after:
            shape = _pool_shape(shape, config, f"eye.pool{i + 1}")
            trace.append((f"eye.pool{i + 1}", shape))
        taps[i] = shape

    if config.variant == "NoST":
        shape = _conv_shape(taps[len(config.eye_convs) - 1], config.fusion_conv, "eye.fuse_conv")
        trace.append(("eye.fuse_conv", shape))
        trace.append(("eye.flatten", (int(np.prod(shape)),)))
        trace.append(("eyes.concat", (2 * int(np.prod(shape)),)))
    else:
        a, b = (taps[i] for i in config.eye_stack_from)
        if a[1:] != b[1:]:
            raise GeometryError(f"stacked eye maps disagree spatially: {a} vs {b}")
        shape = (2 * (a[0] + b[0]),) + a[1:]
        trace.append(("fuse.stack", shape))
        shape = _conv_shape(shape, config.fusion_conv, "fuse.conv")
        trace.append(("fuse.conv", shape))
        trace.append(("fuse.flatten", (int(np.prod(shape)),)))
    return trace


def _trace_dict(config):
    return dict(shape_trace(config))


# parameters ------------------------------------------------------------------

class ModelParams:
    """All learnable tensors of one model, keyed by stable layer paths."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def has(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)

    def stream(self, name: str) -> dict[str, Tensor]:
        """Tensors of one stream; ``eye_left`` and ``eye_right`` resolve to the same objects."""
        prefix = {"eye_left": "eye", "eye_right": "eye"}.get(name, name) + "."
        return {k[len(prefix):]: t for k, t in self.tensors.items() if k.startswith(prefix)}

    def to(self, dtype) -> "ModelParams":
        """Cast every tensor in place (object identity is preserved)."""
        for t in self.tensors.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()})

    def conv(self, name: str, spec: ConvSpec) -> ConvParams:
        return ConvParams(self.tensors[name + ".weight"], self.tensors[name + ".bias"], spec.stride, spec.padding)

    def affine(self, name: str) -> AffineParams:
        return AffineParams(self.tensors[name + ".weight"], self.tensors[name + ".bias"])

    def se(self, name: str) -> SEParams:
        fc1, fc2 = self.affine(name + ".fc1"), self.affine(name + ".fc2")
        c = fc2.weight.shape[0]
        return SEParams(c, c // fc1.weight.shape[0], fc1, fc2)

    def adagn(self, name: str) -> AdaGNParams:
        fc = self.affine(name + ".fc")
        c = fc.weight.shape[0] // 2
        return AdaGNParams(GNConfig(gn_groups(c, self.config.gn_max_groups)), fc.weight.shape[1], fc, self.config.leaky_slope)


def _layer_specs(config: ModelConfig):
    """Ordered (name, layer spec) pairs for every parametrized layer."""
    trace = _trace_dict(config)
    specs = []
    ctx = config.context_dim
    full_se = config.variant != "NoSE"

    c_in = 3
    for i, s in enumerate(config.face_convs):
        specs.append((f"face.conv{i + 1}", ConvLayerSpec(c_in, s.out_channels, s.kernel, s.stride, s.padding)))
        if full_se and i in config.face_se_after:
            specs.append((f"face.se{i + 1}", SESpec(s.out_channels, se_reduction(s.out_channels, config.se_reduction))))
        c_in = s.out_channels
    d = trace["face.flatten"][0]
    for i, width in enumerate(config.face_fc_widths):
        specs.append((f"face.fc{i + 1}", AffineSpec(d, width)))
        d = width

    d = config.rects_dim
    for i, width in enumerate(config.rects_fc_widths):
        specs.append((f"rects.fc{i + 1}", AffineSpec(d, width)))
        d = width

    use_adagn = config.variant != "NoAdaGN"
    c_in = 3
    for i, s in enumerate(config.eye_convs):
        specs.append((f"eye.conv{i + 1}", ConvLayerSpec(c_in, s.out_channels, s.kernel, s.stride, s.padding)))
        if use_adagn:
            specs.append((f"eye.adagn{i + 1}", AdaGNSpec(s.out_channels, ctx, gn_groups(s.out_channels, config.gn_max_groups), leaky_slope=config.leaky_slope)))
        if full_se and i in config.eye_se_after:
            specs.append((f"eye.se{i + 1}", SESpec(s.out_channels, se_reduction(s.out_channels, config.se_reduction))))
        c_in = s.out_channels

    f = config.fusion_conv
    if config.variant == "NoST":
        c_in = config.eye_convs[-1].out_channels
        specs.append(("eye.fuse_conv", ConvLayerSpec(c_in, f.out_channels, f.kernel, f.stride, f.padding)))
        if use_adagn:
            specs.append(("eye.fuse_adagn", AdaGNSpec(f.out_channels, ctx, gn_groups(f.out_channels, config.gn_max_groups), leaky_slope=config.leaky_slope)))
        specs.append(("eyes.fc", AffineSpec(trace["eyes.concat"][0], config.eye_fc_width)))
    else:
        stacked = trace["fuse.stack"][0]
        if full_se:
            specs.append(("fuse.se", SESpec(stacked, se_reduction(stacked, config.se_reduction))))
        specs.append(("fuse.conv", ConvLayerSpec(stacked, f.out_channels, f.kernel, f.stride, f.padding)))
        if use_adagn:
            specs.append(("fuse.adagn", AdaGNSpec(f.out_channels, ctx, gn_groups(f.out_channels, config.gn_max_groups), leaky_slope=config.leaky_slope)))
        specs.append(("fuse.fc", AffineSpec(trace["fuse.flatten"][0], config.eye_fc_width)))

    d = config.eye_fc_width + config.face_fc_widths[-1] + config.rects_fc_widths[-1]
    for i, width in enumerate(config.head_widths):
        specs.append((f"head.fc{i + 1}", AffineSpec(d, width)))
        d = width
    return specs


def build(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Initialize a model deterministically from ``seed``."""
    tensors: dict[str, Tensor] = {}
    for index, (name, spec) in enumerate(_layer_specs(config)):
        layer_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
        for key, t in init_params(spec, layer_seed).tensors().items():
            tensors[f"{name}.{key}"] = t
    return ModelParams(config, tensors)


# forward ---------------------------------------------------------------------

def _check_input(x: Tensor, expected: tuple, what: str):
    if x.ndim != len(expected) + 1 or x.shape[1:] != expected:
        raise ContractError(f"{what}: expected (N, {', '.join(map(str, expected))}), got {x.shape}")


def _conv_block(x, params: ModelParams, prefix: str, i: int, spec: ConvSpec, norm):
    cfg = params.config
    name = f"{prefix}.conv{i + 1}"
    cp = params.conv(name, spec)
    x = T.conv2d(x, cp.weight, cp.bias, cp.stride, cp.padding)
    x = norm(x)
    if params.has(f"{prefix}.se{i + 1}"):
        x = se_forward(x, params.se(f"{prefix}.se{i + 1}"))
    x = T.relu(x)
    if i in (cfg.face_pool_after if prefix == "face" else cfg.eye_pool_after):
        x = T.maxpool2d(x, cfg.pool_kernel, cfg.pool_stride)
    return x


def _mlp(x, params: ModelParams, prefix: str, n_layers: int, last_linear=False):
    slope = params.config.leaky_slope
    for i in range(n_layers):
        p = params.affine(f"{prefix}.fc{i + 1}")
        x = T.affine(x, p.weight, p.bias)
        if not (last_linear and i == n_layers - 1):
            x = T.leaky_relu(x, slope)
    return x


def face_stream(face: Tensor, params: ModelParams) -> Tensor:
    cfg = params.config
    _check_input(face, (3, cfg.face_size, cfg.face_size), "face_stream")
    x = face
    for i, spec in enumerate(cfg.face_convs):
        groups = gn_groups(spec.out_channels, cfg.gn_max_groups)
        x = _conv_block(x, params, "face", i, spec, lambda v, g=groups: group_normalize(v, GNConfig(g)))
    return _mlp(T.flatten(x), params, "face", len(cfg.face_fc_widths))


def rects_stream(rects: Tensor, params: ModelParams) -> Tensor:
    cfg = params.config
    if rects.ndim != 2 or rects.shape[1] != cfg.rects_dim:
        raise ContractError(f"rects_stream: expected (N, {cfg.rects_dim}), got {rects.shape}")
    return _mlp(rects, params, "rects", len(cfg.rects_fc_widths))


def _eye_norm(params: ModelParams, name: str, channels: int, context: Tensor):
    if params.has(name):
        p = params.adagn(name)
        return lambda v: adagn_forward(v, context, p)
    g = gn_groups(channels, params.config.gn_max_groups)
    return lambda v: group_normalize(v, GNConfig(g))


def eye_stream(eye: Tensor, context: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Return the conv3 (post-pool) and conv5 feature maps of one eye."""
    cfg = params.config
    _check_input(eye, (3, cfg.eye_size, cfg.eye_size), "eye_stream")
    if context.ndim != 2 or context.shape != (eye.shape[0], cfg.context_dim):
        raise ContractError(f"eye_stream: context must be (N, {cfg.context_dim}), got {context.shape}")
    taps = {}
    x = eye
    for i, spec in enumerate(cfg.eye_convs):
        x = _conv_block(x, params, "eye", i, spec, _eye_norm(params, f"eye.adagn{i + 1}", spec.out_channels, context))
        taps[i] = x
    a, b = cfg.eye_stack_from
    return taps[a], taps[b]


def _fusion_conv(x, context, params: ModelParams, conv_name: str, norm_name: str):
    spec = params.config.fusion_conv
    cp = params.conv(conv_name, spec)
    x = T.conv2d(x, cp.weight, cp.bias, cp.stride, cp.padding)
    x = _eye_norm(params, norm_name, spec.out_channels, context)(x)
    return T.relu(x)


def fuse_eyes(l3: Tensor, l5: Tensor, r3: Tensor, r5: Tensor, context: Tensor, params: ModelParams) -> Tensor:
    """Stack (left3, left5, right3, right5) channel-wise, reweight with SE and compress to the eye feature."""
    shapes = {l3.shape, l5.shape, r3.shape, r5.shape}
    if len({s[:1] + s[2:] for s in shapes}) != 1 or l3.shape != r3.shape or l5.shape != r5.shape:
        raise GeometryError(f"fuse_eyes: incompatible maps {l3.shape}, {l5.shape}, {r3.shape}, {r5.shape}")
    x = T.channel_concat([l3, l5, r3, r5])
    if params.has("fuse.se"):
        x = se_forward(x, params.se("fuse.se"))
    x = _fusion_conv(x, context, params, "fuse.conv", "fuse.adagn")
    p = params.affine("fuse.fc")
    return T.leaky_relu(T.affine(T.flatten(x), p.weight, p.bias), params.config.leaky_slope)


def eye_vectors_unstacked(l5: Tensor, r5: Tensor, context: Tensor, params: ModelParams) -> Tensor:
    """NoST path: the fusion conv closes each eye stream; flattened eyes are concatenated."""
    left = T.flatten(_fusion_conv(l5, context, params, "eye.fuse_conv", "eye.fuse_adagn"))
    right = T.flatten(_fusion_conv(r5, context, params, "eye.fuse_conv", "eye.fuse_adagn"))
    p = params.affine("eyes.fc")
    return T.leaky_relu(T.affine(T.concat([left, right], axis=1), p.weight, p.bias), params.config.leaky_slope)


def forward(params: ModelParams, batch) -> Tensor:
    """Predict (N, 2) gaze points in cm relative to the camera.

    ``batch`` needs ``face``, ``eye_left``, ``eye_right`` (already flipped)
    and ``rects`` tensors.
    """
    cfg = params.config
    f_rects = rects_stream(batch.rects, params)
    f_face = face_stream(batch.face, params)
    context = T.concat([f_rects, f_face], axis=1)
    l3, l5 = eye_stream(batch.eye_left, context, params)
    r3, r5 = eye_stream(batch.eye_right, context, params)
    if cfg.variant == "NoST":
        f_eye = eye_vectors_unstacked(l5, r5, context, params)
    else:
        f_eye = fuse_eyes(l3, l5, r3, r5, context, params)
    return _mlp(T.concat([f_eye, f_face, f_rects], axis=1), params, "head", len(cfg.head_widths), last_linear=True)


@dataclass
class BatchInput:
    face: Tensor
    eye_left: Tensor
    eye_right: Tensor
    rects: Tensor
    labels: Tensor | None = None
    meta: list = field(default_factory=list)

    def __len__(self):
        return self.face.shape[0]
