"""The deep feature map, the pool5 retrieval descriptor, and cosine distance.

An image's feature vector is the flattened concatenation of the post-ReLU
activations of the first conv layer in each of the last three blocks
(relu3_1, relu4_1, relu5_1 on the canonical stack).  Every entry is
non-negative by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network, forward_capture
from .tensor import ShapeError, bilinear_resize
from . import network as _network

DEFAULT_CAPTURE = ("relu3_1", "relu4_1", "relu5_1")
POOL5 = "pool5"

MIN_SHORT_SIDE = 200

Layout = tuple[tuple[str, int, int, int], ...]


class LayoutMismatchError(ValueError):
    """Raised when two feature vectors disagree on segment layout."""


@dataclass(frozen=True)
class FeatureVector:
    """Flattened concatenation of captured activations plus its layout.

    layout lists (layer name, c, h, w) segments in concatenation order and
    fully determines element order.
    """

    data: np.ndarray  # 1-d float32
    layout: Layout

    def __post_init__(self):
        expected = sum(c * h * w for _, c, h, w in self.layout)
        if self.data.ndim != 1 or self.data.size != expected:
            raise LayoutMismatchError(
                f"feature data length {self.data.size} does not match layout size {expected}"
            )

    def __len__(self) -> int:
        return self.data.size


def check_layouts_match(a: FeatureVector, b: FeatureVector) -> None:
    if a.layout != b.layout:
        raise LayoutMismatchError(f"feature layouts differ: {a.layout} vs {b.layout}")


def flatten_captures(captures: dict[str, np.ndarray], order: tuple[str, ...]) -> FeatureVector:
    layout = []
    chunks = []
    for name in order:
        act = captures[name]
        n, c, h, w = act.shape
        if n != 1:
            raise ShapeError(f"feature capture expects batch 1, got {n} for {name}")
        layout.append((name, c, h, w))
        chunks.append(act.reshape(-1))
    # float32 on the production path; float64 inputs keep full precision
    # for the high-precision gradient checks.
    data = np.concatenate(chunks)
    if data.dtype != np.float64:
        data = data.astype(np.float32, copy=False)
    return FeatureVector(data, tuple(layout))


def unflatten(fv: FeatureVector) -> dict[str, np.ndarray]:
    """Reshape the flat vector back into per-layer (1, c, h, w) activations."""
    out = {}
    pos = 0
    for name, c, h, w in fv.layout:
        size = c * h * w
        out[name] = fv.data[pos : pos + size].reshape(1, c, h, w)
        pos += size
    return out


def resize_short_side(rgb_image: np.ndarray, minimum: int = MIN_SHORT_SIDE) -> np.ndarray:
    """Upscale so the short side is exactly `minimum`; never downscales.

    Aspect ratio is preserved with the long side rounded half-up.
    """
    _, _, h, w = rgb_image.shape
    short = min(h, w)
    if short >= minimum:
        return rgb_image
    scale = minimum / short
    if h <= w:
        out_h = minimum
        out_w = int(np.floor(w * scale + 0.5))
    else:
        out_w = minimum
        out_h = int(np.floor(h * scale + 0.5))
    return bilinear_resize(rgb_image, out_h, out_w)


def capture_features(
    net: Network,
    preprocessed: np.ndarray,
    capture: tuple[str, ...] = DEFAULT_CAPTURE,
    want_state: bool = False,
):
    """Feature vector of an already preprocessed, already sized image."""
    if want_state:
        caps, state = forward_capture(net, preprocessed, capture, want_state=True)
        return flatten_captures(caps, tuple(capture)), state
    caps = forward_capture(net, preprocessed, capture)
    return flatten_captures(caps, tuple(capture))


def phi(net: Network, rgb_image: np.ndarray, capture: tuple[str, ...] = DEFAULT_CAPTURE) -> FeatureVector:
    """Deep feature representation of an RGB [0,255] image."""
    sized = resize_short_side(rgb_image)
    pre = _network.preprocess(sized.astype(np.float32, copy=False), net.preprocessing)
    return capture_features(net, pre, capture)


def pool5_descriptor(net: Network, rgb_image: np.ndarray) -> np.ndarray:
    """Flattened pool5 activation used for cosine-distance retrieval."""
    return phi(net, rgb_image, capture=(POOL5,)).data


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - <a,b>/(|a||b|), in [0,2]; zero vectors are defined maximally
    dissimilar (distance 1) so the function is total."""
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.size != b.size:
        raise ShapeError(f"cosine distance needs equal lengths, got {a.size} and {b.size}")
    na = float(np.linalg.norm(a.astype(np.float64)))
    nb = float(np.linalg.norm(b.astype(np.float64)))
    if na == 0.0 or nb == 0.0:
        return 1.0
    d = 1.0 - float(a.astype(np.float64) @ b.astype(np.float64)) / (na * nb)
    return max(d, 0.0)
