"""Reference forward pass over a DFIW model, built on torch primitives.

Mirrors the consumer engine's documented conventions — images upscaled so
the short side is at least 200 (corner-aligned bilinear, long side rounded
half-up), channel reorder plus mean subtraction, 3x3/stride-1/pad-1 convs,
ReLU, and 2x2 max-pools with replication padding on odd dims — while the
numeric kernels are torch's own.  That independence is what makes the
dumped activations a cross-implementation truth source.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .dfiw import DfiwFile

CAPTURE_LAYERS = ("relu3_1", "relu4_1", "relu5_1", "pool5")
MIN_SHORT_SIDE = 200


def load_image_rgb(path: str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)[None])


def resize_short_side(x: torch.Tensor, minimum: int = MIN_SHORT_SIDE) -> torch.Tensor:
    _, _, h, w = x.shape
    short = min(h, w)
    if short >= minimum:
        return x
    scale = minimum / short
    if h <= w:
        out_h, out_w = minimum, int(math.floor(w * scale + 0.5))
    else:
        out_h, out_w = int(math.floor(h * scale + 0.5)), minimum
    return F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=True)


def preprocess(rgb: torch.Tensor, model: DfiwFile) -> torch.Tensor:
    if model.channel_order == 1:  # BGR
        rgb = rgb.flip(1)
    means = torch.as_tensor(model.means, dtype=rgb.dtype).reshape(1, 3, 1, 1)
    return rgb - means


def _pool_replicate_odd(x: torch.Tensor) -> torch.Tensor:
    pad_h = x.shape[2] % 2
    pad_w = x.shape[3] % 2
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    return F.max_pool2d(x, kernel_size=2, stride=2)


def capture_activations(model: DfiwFile, rgb_image: np.ndarray) -> dict[str, np.ndarray]:
    """Run the conv stack and return the retrieval/matching activations."""
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(rgb_image)).to(torch.float32)
        x = resize_short_side(x)
        x = preprocess(x, model)
        captures = {}
        block, idx = 1, 1
        for entry in model.layers:
            w = torch.from_numpy(entry.weights)
            b = torch.from_numpy(entry.bias)
            x = F.relu(F.conv2d(x, w, b, stride=1, padding=1))
            name = f"relu{block}_{idx}"
            if name in CAPTURE_LAYERS:
                captures[name] = x.numpy().copy()
            block_sizes = (2, 2, 4, 4, 4)
            if idx == block_sizes[block - 1]:
                x = _pool_replicate_odd(x)
                pool_name = f"pool{block}"
                if pool_name in CAPTURE_LAYERS:
                    captures[pool_name] = x.numpy().copy()
                block += 1
                idx = 1
            else:
                idx += 1
        return captures
