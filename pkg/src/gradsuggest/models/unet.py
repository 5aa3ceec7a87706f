"""Compact 2D UNet producing a single-channel probability map.

Each encoder level is a 3x3 conv + ReLU followed by 2x2 max-pooling; the
bottleneck is one more conv; each decoder level upsamples (nearest),
concatenates the matching encoder activation and applies a 3x3 conv + ReLU.
A 1x1 conv and a sigmoid form the head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..exceptions import DimensionError
from .vae import _freeze, _tensors, as_image_batch


@dataclass(frozen=True)
class SegModel:
    params: dict
    base_channels: int = 8
    depth: int = 2

    @property
    def descriptor(self) -> dict:
        return {"kind": "unet", "base_channels": self.base_channels, "depth": self.depth}

    def with_params(self, params: dict) -> "SegModel":
        return SegModel(_freeze(params), self.base_channels, self.depth)


def init_unet(base_channels: int = 8, depth: int = 2, seed: int = 0) -> SegModel:
    if base_channels < 1 or depth < 1:
        raise DimensionError("base_channels and depth must be positive")
    rng = np.random.default_rng(seed)
    p = {}

    def conv(name, cout, cin, k=3):
        p[f"{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k))
        p[f"{name}.b"] = np.zeros(cout)

    widths = [base_channels * 2**i for i in range(depth + 1)]
    cin = 1
    for i in range(depth):
        conv(f"enc{i}", widths[i], cin)
        cin = widths[i]
    conv("bottleneck", widths[depth], cin)
    cin = widths[depth]
    for i in reversed(range(depth)):
        conv(f"dec{i}", widths[i], cin + widths[i])
        cin = widths[i]
    conv("head", 1, cin, k=1)
    return SegModel(_freeze(p), int(base_channels), int(depth))


def unet_logits(model: SegModel, x, params: dict | None = None) -> Tensor:
    xb = as_image_batch(x)
    h, w = xb.shape[2:]
    f = 2**model.depth
    if h % f or w % f:
        raise DimensionError(f"UNet input {h}x{w} must be divisible by {f}")
    p = _tensors(params if params is not None else model.params)
    skips = []
    a = xb
    for i in range(model.depth):
        a = ad.relu(ad.conv2d(a, p[f"enc{i}.w"], p[f"enc{i}.b"], padding=1))
        skips.append(a)
        a = ad.max_pool2d(a, 2)
    a = ad.relu(ad.conv2d(a, p["bottleneck.w"], p["bottleneck.b"], padding=1))
    for i in reversed(range(model.depth)):
        a = ad.concat([ad.upsample2d(a, 2), skips[i]], axis=1)
        a = ad.relu(ad.conv2d(a, p[f"dec{i}.w"], p[f"dec{i}.b"], padding=1))
    return ad.conv2d(a, p["head.w"], p["head.b"])


def unet_forward(model: SegModel, x, params: dict | None = None) -> Tensor:
    """Per-pixel foreground probability, shape (N, 1, H, W)."""
    return ad.sigmoid(unet_logits(model, x, params))


def predict_proba(model: SegModel, images, batch_size: int = 64) -> np.ndarray:
    """Probability maps for an (N, H, W) stack, evaluated without a tape."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    stack = images[None] if single else images
    out = np.empty(stack.shape)
    for start in range(0, len(stack), batch_size):
        chunk = stack[start : start + batch_size]
        out[start : start + len(chunk)] = unet_forward(model, chunk).values[:, 0]
    return out[0] if single else out
