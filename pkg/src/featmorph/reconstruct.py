"""Reverse mapping: recover pixels whose features match a moved target.

The objective is  1/2 ||target - features(z)||^2 + lambda * TV(rgb(z)),
minimised over the preprocessed-domain image z.  TV is evaluated in
deprocessed RGB units so the default lambda keeps its published scale;
the chain rule through the unclamped deprocess is a channel permutation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .features import (
    DEFAULT_CAPTURE,
    FeatureVector,
    capture_features,
    check_layouts_match,
    pool5_descriptor,
    resize_short_side,
    unflatten,
)
from .neighbors import (
    AttributeQuery,
    DatasetIndex,
    attribute_vector,
    knn_by_attributes,
    mean_feature,
    scale_alpha,
)
from .network import Network, deprocess, deprocess_gradient, input_gradient, preprocess
from .optimizer import LbfgsConfig, LbfgsResult, ObjectiveEval, lbfgs_minimize
from .tensor import ShapeError

log = logging.getLogger(__name__)

INIT_INPUT = "input-image"
INIT_INPUT_PLUS_NOISE = "input-plus-noise"


@dataclass
class TvConfig:
    lam: float = 0.001
    exponent: float = 2.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.exponent <= 0:
            raise ValueError("TV exponent must be > 0")


@dataclass
class ReconstructionConfig:
    tv: TvConfig = field(default_factory=TvConfig)
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    strength_beta: float = 0.4
    init: str = INIT_INPUT
    noise_std: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.strength_beta < 0:
            raise ValueError("strength must be >= 0")
        if self.init not in (INIT_INPUT, INIT_INPUT_PLUS_NOISE):
            raise ValueError(f"unknown init mode {self.init!r}")


def tv_value_grad(z: np.ndarray, tv_exponent: float) -> tuple[float, np.ndarray]:
    """Smoothness penalty and its analytic gradient.

    Per pixel (i, j) the squared forward differences to the right and down
    (zero beyond the border) are summed and raised to exponent/2; channels
    are evaluated independently and summed.
    """
    arr = np.asarray(z)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[2] < 2 or arr.shape[3] < 2:
        raise ShapeError(f"TV needs (n, c, h, w) with spatial dims >= 2, got {z.shape}")
    work = arr.astype(np.float64)
    dh = work[:, :, :, 1:] - work[:, :, :, :-1]
    dv = work[:, :, 1:, :] - work[:, :, :-1, :]
    m = np.zeros_like(work)
    m[:, :, :, :-1] += dh * dh
    m[:, :, :-1, :] += dv * dv

    half = tv_exponent / 2.0
    value = float(np.sum(m**half))

    if tv_exponent == 2.0:
        factor = np.full_like(m, 2.0)
    else:
        # d(m^half)/dm, with flat pixels (m = 0) contributing nothing.
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = tv_exponent * np.where(m > 0, m ** (half - 1.0), 0.0)
    grad = np.zeros_like(work)
    gh = factor[:, :, :, :-1] * dh
    grad[:, :, :, 1:] += gh
    grad[:, :, :, :-1] -= gh
    gv = factor[:, :, :-1, :] * dv
    grad[:, :, 1:, :] += gv
    grad[:, :, :-1, :] -= gv
    if squeeze:
        grad = grad[0]
    return value, grad.astype(z.dtype, copy=False)


def objective(
    z: np.ndarray, target: FeatureVector, net: Network, tv: TvConfig
) -> ObjectiveEval:
    """Value and gradient of the reconstruction objective at z.

    z lives in the preprocessed domain and must produce the same capture
    layout as the target.
    """
    capture = tuple(name for name, _, _, _ in target.layout)
    feats, state = capture_features(net, z, capture, want_state=True)
    check_layouts_match(feats, target)

    diff64 = feats.data.astype(np.float64) - target.data.astype(np.float64)
    value = 0.5 * float(diff64 @ diff64)
    capture_grads = unflatten(FeatureVector(diff64.astype(z.dtype), target.layout))
    grad = input_gradient(net, state, capture_grads)

    if tv.lam > 0:
        rgb = deprocess(z, net.preprocessing, clamp=False)
        tv_value, tv_grad_rgb = tv_value_grad(rgb, tv.exponent)
        value += tv.lam * tv_value
        grad = grad + tv.lam * deprocess_gradient(tv_grad_rgb, net.preprocessing)
    return ObjectiveEval(value, grad)


@dataclass
class TransformResult:
    image: np.ndarray  # (1, 3, h, w) float32 RGB in [0, 255]
    lbfgs: LbfgsResult
    alpha: float
    k_used: int
    target_ids: list[int]
    source_ids: list[int]


def initial_iterate(x_pre: np.ndarray, cfg: ReconstructionConfig) -> np.ndarray:
    if cfg.init == INIT_INPUT_PLUS_NOISE:
        rng = np.random.default_rng(cfg.seed)
        return x_pre + rng.normal(0.0, cfg.noise_std, size=x_pre.shape).astype(np.float32)
    return x_pre.copy()


def minimize_to_image(
    x_pre: np.ndarray, target: FeatureVector, net: Network, cfg: ReconstructionConfig
) -> tuple[np.ndarray, LbfgsResult]:
    """Run the reverse mapping and return (clamped RGB image, optimizer result)."""
    shape = x_pre.shape

    def f(v: np.ndarray):
        z = v.reshape(shape).astype(np.float32)
        val, grad = objective(z, target, net, cfg.tv)
        return val, grad.astype(np.float64).ravel()

    x0 = initial_iterate(x_pre, cfg)
    result = lbfgs_minimize(f, x0.astype(np.float64).ravel(), cfg.lbfgs)
    z_pre = result.x.reshape(shape).astype(np.float32)
    return deprocess(z_pre, net.preprocessing, clamp=True), result


def transform(
    x_image: np.ndarray,
    index: DatasetIndex | None,
    query: AttributeQuery | None,
    k: int,
    cfg: ReconstructionConfig,
    net: Network,
    exclude_ids: tuple[int, ...] = (),
) -> TransformResult:
    """The full pipeline: select neighbor sets, build the feature-space
    target, and invert it back to pixels.

    With strength 0 the target degenerates to the input's own features and
    no neighbor selection happens (index and query may be None).
    """
    x_work = resize_short_side(np.asarray(x_image, dtype=np.float32))
    x_pre = preprocess(x_work, net.preprocessing)
    fx = capture_features(net, x_pre, DEFAULT_CAPTURE)

    if cfg.strength_beta == 0.0:
        target = fx
        alpha = 0.0
        t_ids: list[int] = []
        s_ids: list[int] = []
    else:
        if index is None or query is None:
            raise ValueError("transform with strength > 0 needs an index and a query")
        query_pool5 = pool5_descriptor(net, x_work)
        t_ids = knn_by_attributes(index, query, k, exclude=exclude_ids, query_pool5=query_pool5)
        s_ids = knn_by_attributes(
            index, query.negated(), k, exclude=exclude_ids, query_pool5=query_pool5
        )
        if sorted(t_ids) == sorted(s_ids):
            raise ValueError(
                "target and source neighbor sets are identical "
                f"(K={k} with only {len(index)} candidates?); no edit direction"
            )
        phibar_t = mean_feature(net, index, t_ids)
        phibar_s = mean_feature(net, index, s_ids)
        direction = attribute_vector(phibar_t, phibar_s)
        alpha = scale_alpha(direction.w.data, cfg.strength_beta)
        direction.alpha = alpha
        direction.k_used = min(len(t_ids), len(s_ids))
        target = FeatureVector(
            (fx.data.astype(np.float64) + alpha * direction.w.data.astype(np.float64)).astype(
                np.float32
            ),
            fx.layout,
        )
        log.info(
            "edit direction from %d target / %d source neighbors, alpha=%.6g",
            len(t_ids), len(s_ids), alpha,
        )

    image, result = minimize_to_image(x_pre, target, net, cfg)
    return TransformResult(image, result, alpha, min(len(t_ids), len(s_ids)) if t_ids else 0,
                           t_ids, s_ids)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio between two images on the same scale."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)
