"""Haze density maps from the dark-channel prior.

``dark_channel`` is the reference nested minimum. ``ddp`` computes the same
map using only max reductions, -channel_max(max_pool(-I)), so that the
tape can route gradients through argmax indices.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import DimensionError, Tensor, as_tensor, concat_channels, neg

DEFAULT_PATCH = 15


def check_patch(patch_size: int) -> int:
    if int(patch_size) != patch_size or patch_size < 1 or patch_size % 2 == 0:
        raise ValueError(f"patch size must be an odd integer >= 1, got {patch_size}")
    return int(patch_size)


def _check_rgb(x: Tensor, op: str) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"{op}: expected (N,3,H,W) input, got {x.shape}")


def dark_channel(image, patch_size: int = DEFAULT_PATCH) -> Tensor:
    """Minimum over colour channels, then over the edge-replicated square window."""
    x = as_tensor(image)
    _check_rgb(x, "dark_channel")
    r = check_patch(patch_size) // 2
    mins = x.data.min(axis=1, keepdims=True)
    padded = np.pad(mins, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    h, w = mins.shape[2:]
    out = mins.copy()
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            np.minimum(out, padded[:, :, dy : dy + h, dx : dx + w], out=out)
    return Tensor._wrap(out)


def ddp(image, patch_size: int = DEFAULT_PATCH) -> Tensor:
    """Differentiable density pooling: the haze density map ``1 - t``, shape (N,1,H,W)."""
    x = as_tensor(image)
    _check_rgb(x, "ddp")
    k = check_patch(patch_size)
    pooled = F.max_pool2d(neg(x), k, stride=1, padding_mode="replicate")
    return neg(F.channel_max(pooled))


def concat_cdm(image, mask) -> Tensor:
    """Append the density mask as a fourth channel: [R, G, B, CDM]."""
    x, m = as_tensor(image), as_tensor(mask)
    if m.ndim != 4 or m.shape[1] != 1:
        raise DimensionError(f"concat_cdm: mask must be (N,1,H,W), got {m.shape}")
    if x.shape[0] != m.shape[0] or x.shape[2:] != m.shape[2:]:
        raise DimensionError(f"concat_cdm: image {x.shape} and mask {m.shape} disagree on batch/spatial axes")
    return concat_channels([x, m])


def with_cdm(image, patch_size: int = DEFAULT_PATCH, use_cdm: bool = True) -> Tensor:
    """Network input for a hazy batch; ``use_cdm=False`` substitutes a zero mask channel."""
    x = as_tensor(image)
    if use_cdm:
        mask = ddp(x.detach(), patch_size)
    else:
        mask = Tensor._wrap(np.zeros((x.shape[0], 1) + x.shape[2:], dtype=x.dtype))
    return concat_cdm(x, mask)
