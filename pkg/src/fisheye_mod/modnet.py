"""Two-stream moving-object segmentation network.

Each input frame goes through its own ShuffleNet-style encoder (or one shared
encoder), the two bottleneck feature maps are fused, and three stride-2
transposed convolutions bring the fused map back to input resolution as
two-class logits.

Parameter names follow ``enc{A|B}.stage{k}.unit{j}.{op}.{w|b|gamma|beta}``
for the encoders (the stem is ``stage0.unit0``) and ``dec.{k}.{op}.*`` for
the decoder.  Batch-norm running statistics live in a separate buffer map
under the same prefixes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, ConfigMismatch, DataError, ShapeError
from .tensor import (
    Tensor,
    add,
    avg_pool2d,
    batch_norm,
    channel_shuffle,
    concat,
    conv2d,
    conv2d_transposed,
    fmod,
    relu,
)

DECONV_K, DECONV_S, DECONV_P = 4, 2, 1


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 96
    in_channels: int = 3
    stem_channels: int = 16
    # (output channels, unit count) per stage; the first unit of each stage has stride 2
    stages: tuple[tuple[int, int], ...] = ((32, 2), (64, 2))
    groups: int = 2
    share_encoders: bool = False
    fusion: str = "concat"
    decoder: tuple[int, int, int] = (64, 32, 2)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        object.__setattr__(self, "decoder", tuple(int(v) for v in self.decoder))
        if len(self.stages) != 2:
            raise ConfigError("the encoder needs exactly two stages (stem x2, stages x4: total stride 8)")
        if self.height % 8 or self.width % 8:
            raise ConfigError(f"input {self.height}x{self.width} must be divisible by 8")
        if len(self.decoder) != 3 or self.decoder[-1] != 2:
            raise ConfigError("decoder needs three entries ending in 2 output classes")
        if self.fusion not in ("concat", "add"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        g = self.groups
        cin = self.stem_channels
        for out, n in self.stages:
            if n < 1:
                raise ConfigError("each stage needs at least one unit")
            if out <= cin:
                raise ConfigError("stage channels must grow (stride-2 units concatenate a shortcut)")
            for c in (out - cin, out // 4, out):
                if c % g:
                    raise ConfigError(f"channel count {c} not divisible by groups={g}")
            if out % 4:
                raise ConfigError(f"stage channels {out} must be divisible by 4")
            cin = out

    @property
    def encoder_channels(self) -> int:
        return self.stages[-1][0]

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["decoder"] = list(self.decoder)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        d = dict(d)
        if "stages" in d:
            d["stages"] = tuple(tuple(s) for s in d["stages"])
        if "decoder" in d:
            d["decoder"] = tuple(d["decoder"])
        return cls(**d)

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------- layout ---


@dataclass(frozen=True)
class ConvSpec:
    """One convolution (or transposed convolution) in the network."""

    name: str
    cin: int
    cout: int
    k: int
    stride: int
    pad: int
    groups: int
    out_hw: tuple[int, int]
    transposed: bool = False
    bias: bool = False
    bn: bool = True

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.transposed:
            return (self.cin, self.cout, self.k, self.k)
        return (self.cout, self.cin // self.groups, self.k, self.k)

    @property
    def fan_in(self) -> int:
        # for a transposed conv, each output pixel gathers from cout-indexed slices, as in torch
        w = self.weight_shape
        return w[1] * w[2] * w[3]


def _unit_plan(cfg: ModelConfig) -> list[tuple[int, int, int, int, int]]:
    """(stage, unit, cin, cout, stride) for every ShuffleUnit."""
    plan = []
    cin = cfg.stem_channels
    for s, (cout, n) in enumerate(cfg.stages, start=1):
        for j in range(n):
            stride = 2 if j == 0 else 1
            plan.append((s, j, cin, cout, stride))
            cin = cout
    return plan


def encoder_convs(cfg: ModelConfig, stream: str = "A") -> list[ConvSpec]:
    h, w = cfg.height // 2, cfg.width // 2
    p = f"enc{stream}"
    g = cfg.groups
    convs = [ConvSpec(f"{p}.stage0.unit0.conv", cfg.in_channels, cfg.stem_channels, 3, 2, 1, 1, (h, w))]
    for s, j, cin, cout, stride in _unit_plan(cfg):
        if stride == 2:
            h, w = h // 2, w // 2
        branch = cout - cin if stride == 2 else cout
        mid = cout // 4
        pre = f"{p}.stage{s}.unit{j}"
        convs += [
            ConvSpec(f"{pre}.gconv1", cin, mid, 1, 1, 0, g, (h * stride, w * stride)),
            ConvSpec(f"{pre}.dwconv", mid, mid, 3, stride, 1, mid, (h, w)),
            ConvSpec(f"{pre}.gconv2", mid, branch, 1, 1, 0, g, (h, w)),
        ]
    return convs


def decoder_convs(cfg: ModelConfig) -> list[ConvSpec]:
    c = cfg.encoder_channels * (2 if cfg.fusion == "concat" else 1)
    h, w = cfg.height // 8, cfg.width // 8
    convs = []
    for k, cout in enumerate(cfg.decoder):
        h, w = h * 2, w * 2
        last = k == len(cfg.decoder) - 1
        convs.append(ConvSpec(f"dec.{k}.deconv", c, cout, DECONV_K, DECONV_S, DECONV_P, 1, (h, w), True, last, not last))
        c = cout
    return convs


def _bn_name(conv: ConvSpec) -> str:
    prefix, op = conv.name.rsplit(".", 1)
    return {"gconv1": f"{prefix}.bn1", "dwconv": f"{prefix}.bn2", "gconv2": f"{prefix}.bn3"}.get(op, f"{prefix}.bn")


def _streams(cfg: ModelConfig) -> tuple[str, ...]:
    return ("A",) if cfg.share_encoders else ("A", "B")


def all_convs(cfg: ModelConfig) -> list[ConvSpec]:
    convs = []
    for s in _streams(cfg):
        convs += encoder_convs(cfg, s)
    return convs + decoder_convs(cfg)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for c in all_convs(cfg):
        shapes[f"{c.name}.w"] = c.weight_shape
        if c.bias:
            shapes[f"{c.name}.b"] = (c.cout,)
        if c.bn:
            shapes[f"{_bn_name(c)}.gamma"] = (c.cout,)
            shapes[f"{_bn_name(c)}.beta"] = (c.cout,)
    return shapes


def buffer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for c in all_convs(cfg):
        if c.bn:
            shapes[f"{_bn_name(c)}.running_mean"] = (c.cout,)
            shapes[f"{_bn_name(c)}.running_var"] = (c.cout,)
    return shapes


# -------------------------------------------------------------- weights ---


@dataclass
class ModelWeights:
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    config_hash: str
    meta: dict[str, Any] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.params.items() if t.grad is not None}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> ModelWeights:
        params = {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.params.items()}
        return ModelWeights(params, {k: v.copy() for k, v in self.buffers.items()}, self.config_hash, dict(self.meta))

    def check(self, cfg: ModelConfig) -> None:
        """Raise ConfigMismatch unless these weights were built for ``cfg``."""
        if self.config_hash != cfg.content_hash():
            raise ConfigMismatch(f"weights were built for config {self.config_hash}, not {cfg.content_hash()}")
        expected = {**param_shapes(cfg), **buffer_shapes(cfg)}
        have = {k: t.shape for k, t in self.params.items()} | {k: v.shape for k, v in self.buffers.items()}
        if have != expected:
            missing = sorted(set(expected) - set(have))
            extra = sorted(set(have) - set(expected))
            wrong = sorted(k for k in set(have) & set(expected) if have[k] != expected[k])
            raise ConfigMismatch(f"weight layout mismatch: missing={missing[:3]} extra={extra[:3]} shape={wrong[:3]}")


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # One stream per parameter name, so a tensor's initial value does not
    # depend on which other tensors exist.  Both encoder streams draw from the
    # stream-A key and start identical, as two copies of one pretrained
    # backbone would; shared and unshared models then differ only in training.
    if name.startswith("encB."):
        name = "encA." + name[5:]
    key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng([seed, key])


def init_weights(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    """Uniform fan-in init (bound sqrt(1/fan_in)); BN gamma 1, beta 0, running stats (0, 1)."""
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for c in all_convs(cfg):
        bound = math.sqrt(1.0 / c.fan_in)
        params[f"{c.name}.w"] = _param_rng(seed, f"{c.name}.w").uniform(-bound, bound, size=c.weight_shape)
        if c.bias:
            params[f"{c.name}.b"] = _param_rng(seed, f"{c.name}.b").uniform(-bound, bound, size=c.cout)
        if c.bn:
            bn = _bn_name(c)
            params[f"{bn}.gamma"] = np.ones(c.cout)
            params[f"{bn}.beta"] = np.zeros(c.cout)
            buffers[f"{bn}.running_mean"] = np.zeros(c.cout)
            buffers[f"{bn}.running_var"] = np.ones(c.cout)
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    return ModelWeights(tensors, buffers, cfg.content_hash())


def save_weights(path: str | os.PathLike, weights: ModelWeights, cfg: ModelConfig, extra_meta: dict | None = None) -> str:
    """Write ``path`` (FMOD) plus ``<path>.json`` metadata; returns the metadata path."""
    blob = {**weights.arrays(), **weights.buffers}
    fmod.save(path, dict(sorted(blob.items())))
    meta = {"config": cfg.to_dict(), "config_hash": cfg.content_hash(), **(extra_meta or {})}
    meta_path = os.fspath(path) + ".json"
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return meta_path


def load_weights(path: str | os.PathLike, cfg: ModelConfig | None = None) -> tuple[ModelWeights, ModelConfig]:
    """Load weights and their config; with ``cfg`` given, mismatches raise ConfigMismatch."""
    meta_path = os.fspath(path) + ".json"
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read weight metadata {meta_path}: {exc}") from exc
    stored = ModelConfig.from_dict(meta["config"])
    if cfg is not None and cfg.content_hash() != meta["config_hash"]:
        raise ConfigMismatch(f"{path} holds weights for config {meta['config_hash']}, expected {cfg.content_hash()}")
    blob = fmod.load(path)
    buf_names = set(buffer_shapes(stored))
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in blob.items() if k not in buf_names}
    buffers = {k: v for k, v in blob.items() if k in buf_names}
    w = ModelWeights(params, buffers, meta["config_hash"], meta)
    w.check(stored)
    return w, stored


# -------------------------------------------------------------- forward ---


class _Ctx:
    def __init__(self, weights: ModelWeights, train: bool):
        self.p = weights.params
        self.b = weights.buffers
        self.train = train

    def conv(self, x: Tensor, c: ConvSpec) -> Tensor:
        name = c.name
        if c.transposed:
            y = conv2d_transposed(x, self.p[f"{name}.w"], self.p.get(f"{name}.b"), c.stride, c.pad)
        else:
            y = conv2d(x, self.p[f"{name}.w"], self.p.get(f"{name}.b"), c.stride, c.pad, c.groups)
        if c.bn:
            bn = _bn_name(c)
            y = batch_norm(
                y, self.p[f"{bn}.gamma"], self.p[f"{bn}.beta"], self.b[f"{bn}.running_mean"], self.b[f"{bn}.running_var"], self.train
            )
        return y


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def encode(weights: ModelWeights, cfg: ModelConfig, x, stream: str = "A", train: bool = False) -> Tensor:
    """Run one encoder stream; returns ``[N, C_e, H/8, W/8]`` features."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
        raise ShapeError(f"expected input [N, {cfg.in_channels}, {cfg.height}, {cfg.width}], got {list(x.shape)}")
    if stream == "B" and cfg.share_encoders:
        stream = "A"
    ctx = _Ctx(weights, train)
    convs = iter(encoder_convs(cfg, stream))
    y = relu(ctx.conv(x, next(convs)))
    for _s, _j, _cin, _cout, stride in _unit_plan(cfg):
        g1, dw, g2 = next(convs), next(convs), next(convs)
        z = channel_shuffle(relu(ctx.conv(y, g1)), cfg.groups)
        z = ctx.conv(ctx.conv(z, dw), g2)
        y = relu(add(y, z) if stride == 1 else concat([avg_pool2d(y, 3, 2, 1), z]))
    return y


def decode(weights: ModelWeights, cfg: ModelConfig, fused: Tensor, train: bool = False) -> Tensor:
    ctx = _Ctx(weights, train)
    convs = decoder_convs(cfg)
    y = fused
    for c in convs:
        y = ctx.conv(y, c)
        if c.bn:
            y = relu(y)
    return y


def forward(weights: ModelWeights, cfg: ModelConfig, frame_t, frame_t_minus_1, train: bool = False, return_features: bool = False):
    """Logits ``[N, 2, H, W]`` for a batch of frame pairs.

    ``train`` selects batch statistics in BN (and updates the running
    buffers); eval mode is a pure function of weights and inputs.
    """
    a, b = _as_tensor(frame_t), _as_tensor(frame_t_minus_1)
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {list(a.shape)} vs {list(b.shape)}")
    fa = encode(weights, cfg, a, "A", train)
    fb = encode(weights, cfg, b, "B", train)
    fused = concat([fa, fb]) if cfg.fusion == "concat" else add(fa, fb)
    logits = decode(weights, cfg, fused, train)
    return (logits, fa, fb) if return_features else logits


def predict(weights: ModelWeights, cfg: ModelConfig, frame_t, frame_t_minus_1) -> np.ndarray:
    """Eval-mode argmax labels ``[N, H, W]`` as uint8."""
    logits = forward(weights, cfg, frame_t, frame_t_minus_1, train=False)
    return (logits.data[:, 1] > logits.data[:, 0]).astype(np.uint8)


# ------------------------------------------------------------- counting ---


def conv_macs(cin: int, cout: int, k: int, groups: int, out_h: int, out_w: int) -> int:
    """Multiply-accumulates of a (grouped) convolution."""
    return (cin // groups) * cout * k * k * out_h * out_w


def count_params(cfg: ModelConfig) -> dict[str, int]:
    """Trainable parameter counts (BN running statistics excluded)."""
    counts = {"encA": 0, "encB": 0, "dec": 0}
    for name, shape in param_shapes(cfg).items():
        counts[name.split(".", 1)[0]] += int(np.prod(shape))
    counts["encoder"] = counts["encA"] + counts["encB"]
    counts["total"] = counts["encoder"] + counts["dec"]
    return counts


def count_macs(cfg: ModelConfig) -> int:
    """Convolution MACs for one frame pair (both streams run, shared or not)."""
    total = 0
    for c in encoder_convs(cfg, "A"):
        total += 2 * conv_macs(c.cin, c.cout, c.k, c.groups, *c.out_hw)
    for c in decoder_convs(cfg):
        hin, win = c.out_hw[0] // c.stride, c.out_hw[1] // c.stride
        total += c.cin * c.cout * c.k * c.k * hin * win
    return total


# ------------------------------------------------------------ gradcheck ---

MICRO = ModelConfig(height=16, width=24, stem_channels=4, stages=((8, 2), (16, 2)), groups=2, decoder=(4, 4, 2))


# smaller step than the per-op checks: with thousands of ReLUs in the
# network a 1e-5 perturbation occasionally straddles a kink
MODEL_STEP = 1e-6


def gradcheck_model(seed: int = 0, cfg: ModelConfig = MICRO, batch: int = 2):
    """Central-difference check of every parameter of the assembled model + loss."""
    from .tensor import weighted_cross_entropy
    from .tensor.gradcheck import MODEL_TOL, check

    rng = np.random.default_rng(seed)
    weights = init_weights(cfg, seed)
    # perturb BN affine parameters away from (1, 0) so their gradients are generic
    for name, t in weights.params.items():
        if name.endswith((".gamma", ".beta")):
            t.data += rng.uniform(-0.3, 0.3, size=t.shape)
    xa = rng.uniform(0, 1, size=(batch, cfg.in_channels, cfg.height, cfg.width))
    xb = rng.uniform(0, 1, size=xa.shape)
    target = rng.integers(0, 2, size=(batch, cfg.height, cfg.width))
    names = list(weights.params)

    def fn(*tensors):
        w = ModelWeights(dict(zip(names, tensors)), weights.buffers, weights.config_hash)
        logits = forward(w, cfg, xa, xb, train=True)
        return weighted_cross_entropy(logits, target, (1.0, 3.0))

    return check("model", fn, [weights.params[n] for n in names], rng, tol=MODEL_TOL, h=MODEL_STEP)
