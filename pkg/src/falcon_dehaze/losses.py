"""Training objectives: pixel MSE, VGG-style perceptual loss, density-map loss."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .density import DEFAULT_PATCH, ddp
from .tensor import DimensionError, Tensor, add, matmul, mean_all, mul, no_grad, relu, reshape, square, sub, sum_all, swap_last

# First 16 layers of VGG-16's feature stack, numbered as in the usual
# torchvision layout: conv specs are (in, out), "R" is ReLU, "M" is 2x2 max pool.
VGG16_LAYERS = [
    (3, 64), "R", (64, 64), "R", "M",
    (64, 128), "R", (128, 128), "R", "M",
    (128, 256), "R", (256, 256), "R", (256, 256), "R",
]
STYLE_TAPS = (3, 8, 15)
CONCEPT_TAP = 8
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 1.0

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma)
        if any(v < 0 for v in vals):
            raise ConfigError(f"loss weights must be non-negative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ConfigError("at least one loss weight must be positive")

    def as_vector(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes differ {a.shape} vs {b.shape}")


def loss_img(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every element."""
    _check_pair(pred, target, "loss_img")
    return mean_all(square(sub(pred, target)))


def gram(features: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C,C) channel inner products divided by C*H*W."""
    n, c, h, w = features.shape
    flat = reshape(features, (n, c, h * w))
    return mul(matmul(flat, swap_last(flat)), 1.0 / (c * h * w))


def _sq_norm_per_sample(diff: Tensor) -> Tensor:
    # squared Frobenius norm of each sample, averaged over the batch
    return mul(sum_all(square(diff)), 1.0 / diff.shape[0])


class FeatureExtractor:
    """Frozen VGG-16-shaped convolution stack up to layer 15.

    Weights are seeded He-normal by default; pretrained VGG-16 weights can be
    supplied in the same ``features.{i}.weight``/``features.{i}.bias`` layout,
    together with ``normalize=True`` for ImageNet mean/std input scaling.
    """

    def __init__(self, weights: "OrderedDict[str, Tensor] | None" = None, seed: int = 42,
                 taps=STYLE_TAPS, normalize: bool = False):
        depth = len(VGG16_LAYERS)
        for t in taps:
            if not 0 <= t < depth:
                raise ConfigError(f"tap index {t} outside layer range [0, {depth})")
        self.taps = tuple(sorted(set(taps) | {CONCEPT_TAP}))
        self.normalize = normalize
        self.weights = weights if weights is not None else self._init(seed)
        for t in self.weights.values():
            t.requires_grad = False

    @staticmethod
    def _init(seed: int) -> "OrderedDict[str, Tensor]":
        rng = np.random.default_rng(seed)
        weights = OrderedDict()
        for i, layer in enumerate(VGG16_LAYERS):
            if isinstance(layer, tuple):
                cin, cout = layer
                w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
                weights[f"features.{i}.weight"] = Tensor(w.astype(np.float32))
                weights[f"features.{i}.bias"] = Tensor(np.zeros(cout, dtype=np.float32))
        return weights

    def __call__(self, x: Tensor) -> dict[int, Tensor]:
        """Run the stack, returning {layer index: activation} for every tap."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"feature extractor expects (N,3,H,W), got {x.shape}")
        if self.normalize:
            scale = Tensor(np.broadcast_to((1 / IMAGENET_STD)[None, :, None, None], x.shape))
            shift = Tensor(np.broadcast_to((-IMAGENET_MEAN / IMAGENET_STD)[None, :, None, None], x.shape))
            x = add(mul(x, scale), shift)
        taps: dict[int, Tensor] = {}
        last = max(self.taps)
        for i, layer in enumerate(VGG16_LAYERS[: last + 1]):
            if layer == "R":
                x = relu(x)
            elif layer == "M":
                x = F.max_pool2d(x, 2, stride=2)
            else:
                x = F.conv2d(x, self.weights[f"features.{i}.weight"], self.weights[f"features.{i}.bias"], padding=1)
            if i in self.taps:
                taps[i] = x
        return taps


def loss_perceptual(pred: Tensor, target: Tensor, extractor: FeatureExtractor,
                    style_taps=STYLE_TAPS, concept_tap: int = CONCEPT_TAP) -> Tensor:
    """Concept (feature distance at one tap) plus style (Gram distances over taps)."""
    _check_pair(pred, target, "loss_perceptual")
    for t in (*style_taps, concept_tap):
        if t not in extractor.taps:
            raise ConfigError(f"tap {t} is not exposed by the extractor (taps {extractor.taps})")
    fp = extractor(pred)
    with no_grad():
        ft = extractor(target.detach())
    total = _sq_norm_per_sample(sub(fp[concept_tap], ft[concept_tap]))
    for t in style_taps:
        with no_grad():
            gt = gram(ft[t])
        total = add(total, _sq_norm_per_sample(sub(gram(fp[t]), gt)))
    return total


def loss_map(pred: Tensor, target: Tensor, patch_size: int = DEFAULT_PATCH) -> Tensor:
    """MSE between the density maps of prediction and target."""
    _check_pair(pred, target, "loss_map")
    with no_grad():
        dt = ddp(target.detach(), patch_size)
    return mean_all(square(sub(ddp(pred, patch_size), dt)))


@dataclass
class LossBreakdown:
    total: Tensor
    img: float
    per: float
    map: float

    def components(self) -> np.ndarray:
        return np.array([self.img, self.per, self.map])


def loss_final(pred: Tensor, target: Tensor, weights: LossWeights, extractor: FeatureExtractor | None = None,
               patch_size: int = DEFAULT_PATCH) -> LossBreakdown:
    """Weighted sum of the three objectives; zero-weighted terms are skipped entirely."""
    terms = []
    parts = {"img": 0.0, "per": 0.0, "map": 0.0}
    if weights.alpha > 0:
        li = loss_img(pred, target)
        parts["img"] = float(li.data)
        terms.append(mul(li, weights.alpha))
    if weights.beta > 0:
        if extractor is None:
            raise ConfigError("beta > 0 requires a feature extractor")
        lp = loss_perceptual(pred, target, extractor)
        parts["per"] = float(lp.data)
        terms.append(mul(lp, weights.beta))
    if weights.gamma > 0:
        lm = loss_map(pred, target, patch_size)
        parts["map"] = float(lm.data)
        terms.append(mul(lm, weights.gamma))
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return LossBreakdown(total, **parts)
