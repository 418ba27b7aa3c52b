"""U-Net generator with a frequency-domain bottleneck.

Weights live in a flat ordered mapping ``name -> Tensor``. Batch-norm running
statistics are stored alongside the trainable tensors (``*.running_mean`` /
``*.running_var``) so one file fully determines inference.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .tensor import DimensionError, Tensor, add, clamp, concat_channels, no_grad, relu, split_channels

MAGIC = b"FALW"
FORMAT_VERSION = 1
BUFFER_SUFFIXES = (".running_mean", ".running_var")

ModelWeights = OrderedDict  # name -> Tensor


class ConfigError(ValueError):
    pass


class WeightFormatError(ValueError):
    """Malformed weight file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class FfcbConfig:
    channels: int
    alpha_in: float = 0.75
    spatial_kernel: int = 3
    spectral_kernel: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha_in < 1.0:
            raise ConfigError(f"alpha_in must lie in [0, 1), got {self.alpha_in}")
        g = self.channels * self.alpha_in
        if abs(g - round(g)) > 1e-9:
            raise ConfigError(f"alpha_in={self.alpha_in} does not split {self.channels} channels evenly")
        if self.alpha_in > 0 and (round(g) == 0 or round(g) == self.channels):
            raise ConfigError(f"alpha_in={self.alpha_in} leaves an empty route for {self.channels} channels")

    @property
    def global_channels(self) -> int:
        return int(round(self.channels * self.alpha_in))

    @property
    def local_channels(self) -> int:
        return self.channels - self.global_channels


@dataclass(frozen=True)
class FalconConfig:
    depth: int = 4
    base: int = 32
    alpha_in: float = 0.75
    in_channels: int = 4
    out_channels: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base < 1:
            raise ConfigError("depth and base must be >= 1")
        FfcbConfig(self.bottleneck_channels, self.alpha_in)

    @classmethod
    def toy(cls, **kw) -> "FalconConfig":
        return cls(depth=2, base=8, **kw)

    @classmethod
    def preset(cls, name: str, **kw) -> "FalconConfig":
        if name == "toy":
            return cls.toy(**kw)
        if name == "full":
            return cls(**kw)
        raise ConfigError(f"unknown preset {name!r}")

    def channels(self, level: int) -> int:
        return self.base * 2**level

    @property
    def bottleneck_channels(self) -> int:
        return self.channels(self.depth)

    @property
    def ffcb(self) -> FfcbConfig:
        return FfcbConfig(self.bottleneck_channels, self.alpha_in)

    def check_spatial(self, h: int, w: int) -> None:
        m = 2**self.depth
        if h % m or w % m:
            raise DimensionError(f"spatial dims {h}x{w} must be divisible by 2**depth = {m}")


# -- architecture table ----------------------------------------------------------


@dataclass
class LayerSpec:
    """One parameterised layer; ``kind`` is conv, convT, bn, fft or ifft."""

    name: str
    kind: str
    cin: int
    cout: int
    kernel: int = 1
    stride: int = 1
    bias: bool = False
    level: int = 0  # resolution divisor exponent of the layer *input*
    spectral: bool = False


def _conv_spec(name, cin, cout, k, level, stride=1, bias=False, spectral=False):
    return LayerSpec(name, "conv", cin, cout, k, stride, bias, level, spectral)


def _bn_spec(name, c, level, spectral=False):
    return LayerSpec(name, "bn", c, c, level=level, spectral=spectral)


def _conv_block(prefix, cin, cout, level, stride=1):
    return [_conv_spec(f"{prefix}.conv", cin, cout, 3, level, stride), _bn_spec(f"{prefix}.bn", cout, level + (stride > 1))]


def _ffcb_layers(prefix: str, cfg: FfcbConfig, level: int) -> list[LayerSpec]:
    cl, cg, k = cfg.local_channels, cfg.global_channels, cfg.spatial_kernel
    layers = []
    for r in (1, 2):
        p = f"{prefix}.mix{r}"
        layers.append(_conv_spec(f"{p}.l2l", cl, cl, k, level))
        if cg:
            layers += [
                _conv_spec(f"{p}.g2l", cg, cl, k, level),
                _conv_spec(f"{p}.l2g", cl, cg, k, level),
                _conv_spec(f"{p}.g2g.pre", cg, cg, 1, level),
                _bn_spec(f"{p}.g2g.pre_bn", cg, level),
                LayerSpec(f"{p}.g2g.fft", "fft", cg, cg, level=level),
                _conv_spec(f"{p}.g2g.spec", 2 * cg, 2 * cg, cfg.spectral_kernel, level, spectral=True),
                _bn_spec(f"{p}.g2g.spec_bn", 2 * cg, level, spectral=True),
                LayerSpec(f"{p}.g2g.ifft", "ifft", cg, cg, level=level),
            ]
        layers.append(_bn_spec(f"{p}.bn_l", cl, level))
        if cg:
            layers.append(_bn_spec(f"{p}.bn_g", cg, level))
    return layers


def layer_specs(config: FalconConfig) -> list[LayerSpec]:
    """Every layer of the network in forward order."""
    layers: list[LayerSpec] = []
    cin = config.in_channels
    for i in range(config.depth):
        c = config.channels(i)
        layers += _conv_block(f"enc{i}.a", cin, c, i) + _conv_block(f"enc{i}.b", c, c, i)
        layers += _conv_block(f"down{i}", c, config.channels(i + 1), i, stride=2)
        cin = config.channels(i + 1)
    d = config.depth
    layers += _ffcb_layers("fal.ffcb", config.ffcb, d)
    layers += _conv_block("fal.conv", config.bottleneck_channels, config.bottleneck_channels, d)
    for i in reversed(range(config.depth)):
        c = config.channels(i)
        layers.append(LayerSpec(f"up{i}", "convT", config.channels(i + 1), c, 2, 2, True, i + 1))
        layers += _conv_block(f"dec{i}.a", 2 * c, c, i) + _conv_block(f"dec{i}.b", c, c, i)
    layers.append(_conv_spec("head", config.channels(0), config.out_channels, 1, 0, bias=True))
    return layers


def param_shapes(config: FalconConfig) -> "OrderedDict[str, tuple]":
    shapes: OrderedDict[str, tuple] = OrderedDict()
    for spec in layer_specs(config):
        if spec.kind == "conv":
            shapes[f"{spec.name}.weight"] = (spec.cout, spec.cin, spec.kernel, spec.kernel)
        elif spec.kind == "convT":
            shapes[f"{spec.name}.weight"] = (spec.cin, spec.cout, spec.kernel, spec.kernel)
        elif spec.kind == "bn":
            for suffix in (".weight", ".bias") + BUFFER_SUFFIXES:
                shapes[f"{spec.name}{suffix}"] = (spec.cout,)
        if spec.bias:
            shapes[f"{spec.name}.bias"] = (spec.cout,)
    return shapes


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def init_weights(config: FalconConfig, seed: int = 0) -> ModelWeights:
    """He-normal convolution weights, unit/zero BN affine terms, zero biases."""
    rng = np.random.default_rng(seed)
    weights: ModelWeights = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".running_var"):
            data = np.ones(shape)
        elif name.endswith((".running_mean", ".bias")):
            data = np.zeros(shape)
        elif len(shape) == 1:
            data = np.ones(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3] if not name.startswith("up") else shape[0] * shape[2] * shape[3]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        weights[name] = Tensor(data.astype(np.float32), requires_grad=not is_buffer(name), name=name)
    return weights


def trainable(weights: ModelWeights) -> "OrderedDict[str, Tensor]":
    return OrderedDict((k, v) for k, v in weights.items() if not is_buffer(k))


def infer_config(weights: ModelWeights) -> FalconConfig:
    """Recover the architecture from tensor names and shapes."""
    try:
        depth = sum(1 for k in weights if k.startswith("down") and k.endswith(".conv.weight"))
        base = weights["enc0.a.conv.weight"].shape[0]
        in_ch = weights["enc0.a.conv.weight"].shape[1]
        out_ch = weights["head.weight"].shape[0]
        c = base * 2**depth
        g = weights["fal.ffcb.mix1.bn_g.weight"].shape[0] if "fal.ffcb.mix1.bn_g.weight" in weights else 0
        config = FalconConfig(depth, base, g / c, in_ch, out_ch)
    except (KeyError, IndexError, ConfigError) as exc:
        raise ConfigError(f"weights do not describe a known architecture: {exc}") from None
    expected = param_shapes(config)
    if list(expected) != list(weights) or any(tuple(weights[k].shape) != s for k, s in expected.items()):
        raise ConfigError("weight names/shapes do not match the inferred architecture")
    return config


# -- forward ---------------------------------------------------------------------


def _bn(x: Tensor, weights: ModelWeights, name: str, mode: str) -> Tensor:
    return F.batch_norm(
        x,
        weights[f"{name}.weight"],
        weights[f"{name}.bias"],
        weights[f"{name}.running_mean"].data,
        weights[f"{name}.running_var"].data,
        mode=mode,
    )


def conv_block(x: Tensor, weights: ModelWeights, prefix: str, mode: str, stride: int = 1) -> Tensor:
    """3x3 convolution, batch norm, ReLU."""
    y = F.conv2d(x, weights[f"{prefix}.conv.weight"], None, stride=stride, padding=1)
    return relu(_bn(y, weights, f"{prefix}.bn", mode))


def spectral_transform(x: Tensor, weights: ModelWeights, prefix: str, mode: str, linear: bool = False) -> Tensor:
    """Global route: 1x1 conv block, real FFT, 1x1 conv block on stacked (re, im), inverse FFT.

    ``linear=True`` drops the BN/ReLU stages, leaving a linear map of ``x``.
    """
    h, w = x.shape[2:]
    y = F.conv2d(x, weights[f"{prefix}.pre.weight"])
    if not linear:
        y = relu(_bn(y, weights, f"{prefix}.pre_bn", mode))
    z = F.complex_to_channels(F.rfft2(y))
    ks = weights[f"{prefix}.spec.weight"].shape[-1]
    z = F.conv2d(z, weights[f"{prefix}.spec.weight"], padding=ks // 2)
    if not linear:
        z = relu(_bn(z, weights, f"{prefix}.spec_bn", mode))
    return F.irfft2(F.channels_to_complex(z), (h, w))


def _mix(xl, xg, weights, prefix, cfg: FfcbConfig, mode):
    pad = cfg.spatial_kernel // 2
    local = F.conv2d(xl, weights[f"{prefix}.l2l.weight"], padding=pad)
    if xg is None:
        return relu(_bn(local, weights, f"{prefix}.bn_l", mode)), None
    local = add(local, F.conv2d(xg, weights[f"{prefix}.g2l.weight"], padding=pad))
    glob = add(F.conv2d(xl, weights[f"{prefix}.l2g.weight"], padding=pad),
               spectral_transform(xg, weights, f"{prefix}.g2g", mode))
    return relu(_bn(local, weights, f"{prefix}.bn_l", mode)), relu(_bn(glob, weights, f"{prefix}.bn_g", mode))


def ffcb_forward(x: Tensor, cfg: FfcbConfig, weights: ModelWeights, mode: str = "train", prefix: str = "fal.ffcb") -> Tensor:
    """Split channels into local/global routes, cross-mix twice, concatenate."""
    if x.shape[1] != cfg.channels:
        raise DimensionError(f"ffcb: axis 1 (channels) is {x.shape[1]}, config expects {cfg.channels}")
    if cfg.global_channels:
        xl, xg = split_channels(x, [cfg.local_channels, cfg.global_channels])
    else:
        xl, xg = x, None
    xl, xg = _mix(xl, xg, weights, f"{prefix}.mix1", cfg, mode)
    xl, xg = _mix(xl, xg, weights, f"{prefix}.mix2", cfg, mode)
    return xl if xg is None else concat_channels([xl, xg])


def fal_forward(x: Tensor, weights: ModelWeights, mode: str = "train", cfg: FfcbConfig | None = None,
                prefix: str = "fal") -> Tensor:
    """FFCB then a conv block, with the block input added back to the output."""
    cfg = cfg or FfcbConfig(x.shape[1])
    y = ffcb_forward(x, cfg, weights, mode, prefix=f"{prefix}.ffcb")
    y = conv_block(y, weights, f"{prefix}.conv", mode)
    return add(y, x)


def falcon_forward(x: Tensor, weights: ModelWeights, mode: str = "train", config: FalconConfig | None = None) -> Tensor:
    """(N, in_channels, H, W) -> (N, 3, H, W); eval-mode output is clamped to [0, 1]."""
    config = config or infer_config(weights)
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise DimensionError(f"falcon: expected (N,{config.in_channels},H,W) input, got {x.shape}")
    config.check_spatial(*x.shape[2:])
    skips = []
    h = x
    for i in range(config.depth):
        h = conv_block(h, weights, f"enc{i}.a", mode)
        h = conv_block(h, weights, f"enc{i}.b", mode)
        skips.append(h)
        h = conv_block(h, weights, f"down{i}", mode, stride=2)
    h = fal_forward(h, weights, mode, config.ffcb)
    for i in reversed(range(config.depth)):
        h = F.conv_transpose2d(h, weights[f"up{i}.weight"], weights[f"up{i}.bias"], stride=2)
        h = concat_channels([h, skips[i]])
        h = conv_block(h, weights, f"dec{i}.a", mode)
        h = conv_block(h, weights, f"dec{i}.b", mode)
    out = F.conv2d(h, weights["head.weight"], weights["head.bias"])
    if mode == "eval":
        out = clamp(out, 0.0, 1.0)
    return out


class Falcon:
    """Convenience wrapper pairing a config with its weights."""

    def __init__(self, config: FalconConfig | None = None, weights: ModelWeights | None = None, seed: int = 0):
        if weights is not None:
            self.config = config or infer_config(weights)
            self.weights = weights
        else:
            self.config = config or FalconConfig()
            self.weights = init_weights(self.config, seed)

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return falcon_forward(x, self.weights, mode, self.config)

    def predict(self, x: Tensor) -> Tensor:
        with no_grad():
            return falcon_forward(x, self.weights, "eval", self.config)

    def parameters(self):
        return trainable(self.weights)


# -- accounting --------------------------------------------------------------------


def layer_flops(spec: LayerSpec, h: int, w: int) -> int:
    """FLOPs of one layer for an (h, w) network input.

    Convolutions count two per multiply-accumulate plus one per bias add;
    batch norm counts two per element (scale and shift); each 2-D FFT of an
    n-point plane counts 5*n*log2(n). ReLU, residual adds and concatenation
    are not counted.
    """
    hh, ww = h >> spec.level, w >> spec.level
    if spec.spectral:
        ww = ww // 2 + 1
    if spec.kind == "conv":
        ho, wo = (hh + spec.stride - 1) // spec.stride, (ww + spec.stride - 1) // spec.stride
        macs = spec.cin * spec.cout * spec.kernel**2 * ho * wo
        return 2 * macs + (spec.cout * ho * wo if spec.bias else 0)
    if spec.kind == "convT":
        macs = spec.cin * spec.cout * spec.kernel**2 * hh * ww
        ho, wo = hh * spec.stride, ww * spec.stride
        return 2 * macs + (spec.cout * ho * wo if spec.bias else 0)
    if spec.kind == "bn":
        return 2 * spec.cout * hh * ww
    if spec.kind in ("fft", "ifft"):
        n = hh * ww
        return int(round(spec.cout * 5 * n * np.log2(n))) if n > 1 else 0
    raise ValueError(spec.kind)


def layer_params(spec: LayerSpec) -> int:
    if spec.kind in ("conv", "convT"):
        return spec.cin * spec.cout * spec.kernel**2 + (spec.cout if spec.bias else 0)
    if spec.kind == "bn":
        return 2 * spec.cout
    return 0


def model_summary(config: FalconConfig, resolution: int | tuple[int, int] = 256) -> dict:
    """Per-layer parameter and FLOP table plus totals."""
    h, w = (resolution, resolution) if isinstance(resolution, int) else resolution
    rows = [(s.name, s.kind, layer_params(s), layer_flops(s, h, w)) for s in layer_specs(config)]
    return {
        "layers": rows,
        "params": sum(r[2] for r in rows),
        "flops": sum(r[3] for r in rows),
    }


# -- serialisation -----------------------------------------------------------------


def dumps_weights(weights: ModelWeights) -> bytes:
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(weights))]
    for name, t in weights.items():
        data = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def loads_weights(raw: bytes) -> ModelWeights:
    if raw[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise WeightFormatError("truncated weight file", pos)
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    version, count = take("<HI")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported version {version}", 4)
    weights: ModelWeights = OrderedDict()
    for _ in range(count):
        start = pos
        (nlen,) = take("<H")
        if pos + nlen > len(raw):
            raise WeightFormatError("truncated tensor name", pos)
        try:
            name = raw[pos : pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFormatError("tensor name is not UTF-8", pos) from None
        pos += nlen
        if name in weights:
            raise WeightFormatError(f"duplicate tensor name {name!r}", start)
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise WeightFormatError(f"truncated payload for {name!r}", pos)
        data = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
        weights[name] = Tensor(data, requires_grad=not is_buffer(name), name=name)
    if pos != len(raw):
        raise WeightFormatError(f"{len(raw) - pos} trailing bytes", pos)
    return weights


def save_weights(weights: ModelWeights, path) -> None:
    Path(path).write_bytes(dumps_weights(weights))


def load_weights(path) -> ModelWeights:
    return loads_weights(Path(path).read_bytes())
