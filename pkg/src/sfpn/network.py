"""Sparse feature pyramid backbone.

Four-stage encoder (kernel-2 stride-2 downsampling convolutions plus
submanifold residual blocks), a mirrored decoder whose transposed
convolutions target the recorded encoder lattices, per-level upsampling
cascades that bring every decoder output back to full resolution, and a
two-layer MLP head fusing the concatenated pyramid into the final
point-wise features.

Channel widths are a 9-vector: positions 1-4 drive the encoder stages,
5-8 the decoder stages, and position 9 is the common width every fused
pyramid level is projected to before concatenation.
"""

from __future__ import annotations

import json
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import weights_io
from .errors import ConfigError, ShapeError, StrideViolation
from .sparse_conv import (
    STRIDED,
    SUBMANIFOLD,
    TRANSPOSED,
    ConvParams,
    NormParams,
    build_rulebook,
    conv_forward,
    norm_forward,
    norm_relu_forward,
    residual_block_forward,
)
from .sparse_tensor import SparseTensor

PRESET_CHANNELS = {
    "small": (8, 24, 48, 96, 96, 48, 24, 24, 24),
    "base": (12, 32, 64, 128, 128, 96, 36, 24, 24),
    "large": (16, 36, 72, 156, 156, 128, 64, 24, 24),
}

VARIANT_FULL = "full"
VARIANT_NO_UPSAMPLED_FUSION = "no_upsampled_fusion"
VARIANT_NO_PYRAMID = "no_pyramid"
VARIANT_NO_SKIP = "no_skip_connections"

_FLAG_VARIANTS = {
    (True, True, True): VARIANT_FULL,
    (False, True, True): VARIANT_NO_UPSAMPLED_FUSION,
    (True, False, True): VARIANT_NO_PYRAMID,
    (True, True, False): VARIANT_NO_SKIP,
}


@dataclass
class SFPNConfig:
    channels: tuple
    enable_upsampled_fusion: bool = True
    enable_pyramid: bool = True
    enable_skip_connections: bool = True
    blocks_per_stage: int = 2
    output_dim: int = 96
    in_channels: int = 1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    def validate(self) -> None:
        if len(self.channels) != 9:
            raise ConfigError(f"channel vector must have 9 entries, got {len(self.channels)}")
        if any(c < 1 for c in self.channels):
            raise ConfigError("all channel widths must be >= 1")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.output_dim < 1 or self.in_channels < 1:
            raise ConfigError("output_dim and in_channels must be >= 1")
        flags = (self.enable_upsampled_fusion, self.enable_pyramid,
                 self.enable_skip_connections)
        if flags not in _FLAG_VARIANTS:
            raise ConfigError(f"unsupported flag combination {flags}")

    @property
    def variant(self) -> str:
        flags = (self.enable_upsampled_fusion, self.enable_pyramid,
                 self.enable_skip_connections)
        name = _FLAG_VARIANTS.get(flags)
        if name is None:
            raise ConfigError(f"unsupported flag combination {flags}")
        return name

    @classmethod
    def preset(cls, name: str, **kwargs) -> "SFPNConfig":
        key = name.lower()
        if key not in PRESET_CHANNELS:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESET_CHANNELS)}")
        return cls(channels=PRESET_CHANNELS[key], **kwargs)

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "enable_upsampled_fusion": self.enable_upsampled_fusion,
            "enable_pyramid": self.enable_pyramid,
            "enable_skip_connections": self.enable_skip_connections,
            "blocks_per_stage": self.blocks_per_stage,
            "output_dim": self.output_dim,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SFPNConfig":
        return cls(**{k: (tuple(v) if k == "channels" else v) for k, v in d.items()})


@dataclass
class _ConvUnit:
    name: str
    stage: str
    depth: int
    out_stride: int
    params: ConvParams
    norm: NormParams | None
    relu: bool
    array_names: list


@dataclass
class _ResUnit:
    name: str
    stage: str
    depth: int
    out_stride: int
    conv1: ConvParams
    norm1: NormParams
    conv2: ConvParams
    norm2: NormParams
    array_names: list


@dataclass
class _LinearUnit:
    name: str
    stage: str
    depth: int
    out_stride: int
    weight: np.ndarray
    bias: np.ndarray
    relu: bool
    array_names: list


@dataclass
class _EncStage:
    down: _ConvUnit
    blocks: list


@dataclass
class _DecStage:
    up: _ConvUnit
    fuse: _ConvUnit | None
    blocks: list


@dataclass
class FeaturePyramid:
    """Decoder outputs ordered by stride ascending (level L has stride 2^L)."""

    levels: list

    def by_stride(self, stride: int) -> SparseTensor:
        for t in self.levels:
            if t.stride == stride:
                return t
        raise KeyError(f"no pyramid level at stride {stride}")


@dataclass
class LayerRecord:
    name: str
    stage: str
    depth: int
    stride: int
    ms: float
    n_in: int
    n_out: int
    params: int
    tensor: SparseTensor | None = None


class ForwardTrace:
    """Per-layer execution log filled in by ``forward``."""

    def __init__(self, keep_tensors: bool = False):
        self.keep_tensors = keep_tensors
        self.entries: list[LayerRecord] = []


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def _register(self, name, arr):
        self.arrays[name] = arr
        return arr

    def conv_weight(self, name, k, cin, cout):
        bound = 1.0 / np.sqrt(k ** 3 * cin)
        w = self.rng.uniform(-bound, bound, size=(k ** 3, cin, cout)).astype(np.float32)
        return self._register(name, w)

    def bias(self, name, cout, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return self._register(name, self.rng.uniform(-bound, bound, size=cout).astype(np.float32))

    def linear_weight(self, name, cin, cout):
        bound = 1.0 / np.sqrt(cin)
        w = self.rng.uniform(-bound, bound, size=(cin, cout)).astype(np.float32)
        return self._register(name, w)

    def norm(self, name, channels):
        p = NormParams.identity(channels)
        self._register(f"{name}.scale", p.scale)
        self._register(f"{name}.shift", p.shift)
        self._register(f"{name}.mean", p.mean)
        self._register(f"{name}.var", p.var)
        return p

    def conv_unit(self, name, stage, depth, out_stride, mode, k, cin, cout,
                  with_bias=False, with_norm=True, relu=True):
        names = [f"{name}.weight"]
        w = self.conv_weight(names[0], k, cin, cout)
        b = None
        if with_bias:
            names.append(f"{name}.bias")
            b = self.bias(names[-1], cout, k ** 3 * cin)
        norm = None
        if with_norm:
            norm = self.norm(f"{name}.norm", cout)
            names += [f"{name}.norm.{s}" for s in ("scale", "shift", "mean", "var")]
        params = ConvParams(w, b, mode)
        return _ConvUnit(name, stage, depth, out_stride, params, norm, relu, names)

    def res_unit(self, name, stage, depth, out_stride, channels, kernel_size=3):
        w1 = self.conv_weight(f"{name}.conv1.weight", kernel_size, channels, channels)
        n1 = self.norm(f"{name}.norm1", channels)
        w2 = self.conv_weight(f"{name}.conv2.weight", kernel_size, channels, channels)
        n2 = self.norm(f"{name}.norm2", channels)
        names = [f"{name}.conv1.weight", f"{name}.conv2.weight"]
        names += [f"{name}.norm1.{s}" for s in ("scale", "shift", "mean", "var")]
        names += [f"{name}.norm2.{s}" for s in ("scale", "shift", "mean", "var")]
        return _ResUnit(name, stage, depth, out_stride,
                        ConvParams(w1, None, SUBMANIFOLD), n1,
                        ConvParams(w2, None, SUBMANIFOLD), n2, names)

    def linear_unit(self, name, stage, depth, cin, cout, relu):
        w = self.linear_weight(f"{name}.weight", cin, cout)
        b = self.bias(f"{name}.bias", cout, cin)
        return _LinearUnit(name, stage, depth, 1, w, b, relu,
                           [f"{name}.weight", f"{name}.bias"])


class SFPNModel:
    """Immutable layer graph; ``forward`` is reentrant."""

    def __init__(self, config, seed, arrays, stem, encoder, decoder, fusion, head):
        self.config = config
        self.seed = seed
        self.arrays = arrays
        self.stem = stem
        self.encoder = encoder
        self.decoder = decoder
        self.fusion = fusion  # list per pyramid level, ascending stride
        self.head = head

    def units(self):
        yield self.stem
        for st in self.encoder:
            yield st.down
            yield from st.blocks
        for st in self.decoder:
            yield st.up
            if st.fuse is not None:
                yield st.fuse
            yield from st.blocks
        for level in self.fusion:
            yield from level
        yield from self.head

    def encoder_strides(self):
        return [st.down.out_stride for st in self.encoder]

    def forward(self, tensor, trace=None):
        return forward(self, tensor, trace)


def build_model(config: SFPNConfig, seed: int) -> SFPNModel:
    """Deterministically construct a model for (config, seed)."""
    config.validate()
    c = config.channels
    bps = config.blocks_per_stage
    b = _Builder(seed)

    stem = b.conv_unit("stem", "stem", 0, 1, SUBMANIFOLD, 3,
                       config.in_channels, c[0],
                       with_bias=True, with_norm=False, relu=False)

    enc_widths = [c[0], c[1], c[2], c[3]]
    enc_prev = [c[0]] + enc_widths[:-1]
    encoder = []
    for s in range(1, 5):
        stage = f"enc{s}"
        down = b.conv_unit(f"{stage}.down", stage, s, 2 ** s, STRIDED, 2,
                           enc_prev[s - 1], enc_widths[s - 1])
        blocks = [b.res_unit(f"{stage}.block{i}", stage, s, 2 ** s, enc_widths[s - 1])
                  for i in range(bps)]
        encoder.append(_EncStage(down, blocks))

    # Skip-source widths by lattice stride (stem feeds the stride-1 skip).
    skip_width = {1: c[0], 2: c[0], 4: c[1], 8: c[2]}
    dec_widths = [c[4], c[5], c[6], c[7]]
    dec_prev = [c[3]] + dec_widths[:-1]
    dec_strides = [8, 4, 2, 1]
    decoder = []
    for d in range(1, 5):
        stage = f"dec{d}"
        depth = 5 - d
        stride = dec_strides[d - 1]
        width = dec_widths[d - 1]
        up = b.conv_unit(f"{stage}.up", stage, depth, stride, TRANSPOSED, 2,
                         dec_prev[d - 1], width)
        reduced = not config.enable_pyramid and d < 4
        fuse = None
        if config.enable_skip_connections and not reduced:
            fuse = b.conv_unit(f"{stage}.fuse", stage, depth, stride, SUBMANIFOLD, 1,
                               width + skip_width[stride], width)
        blocks = []
        if not reduced:
            blocks = [b.res_unit(f"{stage}.block{i}", stage, depth, stride, width)
                      for i in range(bps)]
        decoder.append(_DecStage(up, fuse, blocks))

    # Pyramid levels ascending stride; level widths follow the decoder.
    level_widths = [c[7], c[6], c[5], c[4]]
    n_levels = 4 if (config.enable_upsampled_fusion and config.enable_pyramid) else 1
    fusion = []
    for lvl in range(n_levels):
        stage = f"fusion{lvl}"
        units = []
        if lvl == 0:
            if c[7] != c[8]:
                units.append(b.conv_unit(f"{stage}.proj", stage, 0, 1, SUBMANIFOLD, 1,
                                         c[7], c[8]))
        else:
            width = level_widths[lvl]
            for step in range(lvl):
                out_stride = 2 ** (lvl - step - 1)
                units.append(b.conv_unit(f"{stage}.step{step}", stage, lvl, out_stride,
                                         TRANSPOSED, 2,
                                         width if step == 0 else c[8], c[8]))
        fusion.append(units)

    head_in = n_levels * c[8]
    head = [
        b.linear_unit("head.fc1", "head", 0, head_in, 2 * c[8], relu=True),
        b.linear_unit("head.fc2", "head", 0, 2 * c[8], config.output_dim, relu=False),
    ]

    return SFPNModel(config, seed, b.arrays, stem, encoder, decoder, fusion, head)


def unit_parameter_count(model: SFPNModel, unit) -> int:
    return int(sum(model.arrays[n].size for n in unit.array_names))


def parameter_count(model: SFPNModel) -> int:
    """Exact count of every stored f32 value (weights, biases, norm params)."""
    return int(sum(a.size for a in model.arrays.values()))


class _Ctx:
    """Per-forward cache of lattices and rulebooks, keyed by stride."""

    def __init__(self, tensor: SparseTensor):
        self.lattice = {1: tensor}
        self.rulebooks = {}

    def get_rulebook(self, mode, kernel_size, tensor):
        key = (mode, kernel_size, tensor.stride)
        rb = self.rulebooks.get(key)
        if rb is None:
            if mode == TRANSPOSED:
                target = self.lattice[tensor.stride // 2]
                rb, _ = build_rulebook(tensor, mode, kernel_size,
                                       out_coords=target.coords, out_index=target.index)
            else:
                rb, _ = build_rulebook(tensor, mode, kernel_size)
            self.rulebooks[key] = rb
        return rb


def _record(trace, unit, model, t_in, t_out, dt):
    if trace is None:
        return
    trace.entries.append(LayerRecord(
        name=unit.name, stage=unit.stage, depth=unit.depth, stride=t_out.stride,
        ms=dt * 1e3, n_in=len(t_in), n_out=len(t_out),
        params=unit_parameter_count(model, unit),
        tensor=t_out if trace.keep_tensors else None,
    ))


def _run_conv(model, unit, tensor, ctx, trace, skip=None):
    t0 = time.perf_counter()
    if skip is not None:
        tensor = tensor.with_features(
            np.concatenate([tensor.features, skip.features], axis=1))
    rb = ctx.get_rulebook(unit.params.mode, unit.params.kernel_size, tensor)
    out = conv_forward(tensor, unit.params, rb)
    if unit.norm is not None:
        out = norm_relu_forward(out, unit.norm) if unit.relu else norm_forward(out, unit.norm)
    _record(trace, unit, model, tensor, out, time.perf_counter() - t0)
    return out


def _run_res(model, unit, tensor, ctx, trace):
    t0 = time.perf_counter()
    rb = ctx.get_rulebook(SUBMANIFOLD, unit.conv1.kernel_size, tensor)
    out = residual_block_forward(tensor, unit.conv1, unit.conv2,
                                 unit.norm1, unit.norm2, rulebook=rb)
    _record(trace, unit, model, tensor, out, time.perf_counter() - t0)
    return out


def _run_linear(model, unit, tensor, trace):
    t0 = time.perf_counter()
    y = tensor.features @ unit.weight + unit.bias
    if unit.relu:
        y = np.maximum(y, 0.0)
    out = tensor.with_features(y)
    _record(trace, unit, model, tensor, out, time.perf_counter() - t0)
    return out


def forward(model: SFPNModel, tensor: SparseTensor, trace: ForwardTrace | None = None):
    """Run the backbone; returns ``(point_features, pyramid)``.

    The output tensor lives on the input lattice with ``output_dim``
    channels.  The pyramid holds the decoder outputs ordered by stride
    ascending (a single level for the reduced variants).
    """
    if tensor.stride != 1:
        raise StrideViolation(f"backbone input must be stride 1, got {tensor.stride}")
    if tensor.num_channels != model.config.in_channels:
        raise ShapeError(
            f"input has {tensor.num_channels} channels, model expects {model.config.in_channels}"
        )
    ctx = _Ctx(tensor)
    x = _run_conv(model, model.stem, tensor, ctx, trace)

    skips = {1: x}
    for st in model.encoder:
        x = _run_conv(model, st.down, x, ctx, trace)
        ctx.lattice[x.stride] = x
        for blk in st.blocks:
            x = _run_res(model, blk, x, ctx, trace)
        skips[x.stride] = x
    # the deepest lattice keeps the refined stage output for downstream reuse
    ctx.lattice[x.stride] = x

    d = x
    pyramid_by_stride = {}
    for st in model.decoder:
        d = _run_conv(model, st.up, d, ctx, trace)
        if st.fuse is not None:
            d = _run_conv(model, st.fuse, d, ctx, trace, skip=skips[d.stride])
        for blk in st.blocks:
            d = _run_res(model, blk, d, ctx, trace)
        if st.blocks or d.stride == 1:
            pyramid_by_stride[d.stride] = d

    levels = [pyramid_by_stride[s] for s in sorted(pyramid_by_stride)]
    pyramid = FeaturePyramid(levels)

    fused = []
    for lvl, units in enumerate(model.fusion):
        y = pyramid.by_stride(2 ** lvl)
        for u in units:
            y = _run_conv(model, u, y, ctx, trace)
        fused.append(y)

    cat = fused[0].with_features(
        np.concatenate([f.features for f in fused], axis=1)) if len(fused) > 1 else fused[0]
    out = cat
    for u in model.head:
        out = _run_linear(model, u, out, trace)
    return out, pyramid


def forward_ablation(model: SFPNModel, tensor: SparseTensor,
                     trace: ForwardTrace | None = None) -> SparseTensor:
    """Forward pass for one of the named reduced variants; returns features only."""
    if model.config.variant == VARIANT_FULL:
        raise ConfigError("forward_ablation expects a reduced variant, got the full model")
    fp, _ = forward(model, tensor, trace)
    return fp


def save_model(model: SFPNModel, weights_path, config_path) -> None:
    """Weight container plus a JSON sidecar; together they reconstruct the model."""
    weights_io.save_weights(weights_path, model.arrays)
    sidecar = {"config": model.config.to_dict(), "seed": int(model.seed)}
    with open(config_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(weights_path, config_path) -> SFPNModel:
    with open(config_path) as fh:
        sidecar = json.load(fh)
    config = SFPNConfig.from_dict(sidecar["config"])
    model = build_model(config, int(sidecar["seed"]))
    stored = weights_io.load_weights(weights_path)
    if set(stored) != set(model.arrays):
        missing = set(model.arrays) ^ set(stored)
        raise ValueError(f"weight records do not match the model structure: {sorted(missing)[:5]}")
    for name, arr in stored.items():
        if arr.shape != model.arrays[name].shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {model.arrays[name].shape}")
        model.arrays[name][...] = arr
    return model
