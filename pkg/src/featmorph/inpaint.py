"""Region filling as a feature-space edit.

Source/target pairs come for free from any dataset: mask each candidate
with the test image's mask (source) and keep it untouched (target).  The
edit direction from masked to unmasked means, applied to the masked test
image, fills the missing region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .features import FeatureVector, capture_features, pool5_descriptor, resize_short_side
from .imgio import load_image_rgb
from .neighbors import (
    DatasetIndex,
    IndexRecord,
    attribute_vector,
    knn_by_cosine,
    mean_feature,
    scale_alpha,
)
from .network import Network, preprocess
from .optimizer import LbfgsResult
from .reconstruct import ReconstructionConfig, minimize_to_image
from .tensor import ShapeError

log = logging.getLogger(__name__)

MASK_FILL_VALUE = 127.0  # mid-gray interacts least with mean subtraction

# Strengths that work well per dataset family (faces vs product shots).
DATASET_STRENGTHS = {"faces": 1.6, "shoes": 2.8}


class MaskError(ValueError):
    """Raised for degenerate or mismatched masks."""


def validate_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise MaskError(f"mask must be 2-d, got shape {mask.shape}")
    if not mask.any():
        raise MaskError("mask has no missing pixels")
    if mask.all():
        raise MaskError("mask has no known pixels")
    return mask


def apply_mask(image: np.ndarray, mask: np.ndarray, fill_value: float = MASK_FILL_VALUE) -> np.ndarray:
    """Replace missing pixels with fill_value; known pixels untouched."""
    image = np.asarray(image)
    if image.shape[-2:] != mask.shape:
        raise ShapeError(
            f"mask shape {mask.shape} does not match image spatial dims {image.shape[-2:]}"
        )
    out = image.copy()
    out[..., mask] = fill_value
    return out


@dataclass
class InpaintResult:
    image: np.ndarray
    lbfgs: LbfgsResult
    alpha: float
    neighbor_ids: list[int]


def masked_descriptor_index(
    index: DatasetIndex,
    net: Network,
    mask: np.ndarray,
    exclude_ids: tuple[int, ...] = (),
) -> DatasetIndex:
    """Index over the same records with pool5 recomputed on masked renditions.

    Masking query and candidates alike cancels the constant filled region
    out of the retrieval descriptor.
    """
    records = []
    for rec in index.records:
        if rec.id in exclude_ids:
            continue
        img = resize_short_side(load_image_rgb(rec.path))
        desc = pool5_descriptor(net, apply_mask(img, mask))
        records.append(IndexRecord(rec.id, rec.path, None, None, desc))
    return DatasetIndex((), records)


def inpaint(
    x_masked: np.ndarray,
    mask: np.ndarray,
    index: DatasetIndex,
    k: int,
    cfg: ReconstructionConfig,
    net: Network,
    exclude_ids: tuple[int, ...] = (),
    composite: bool = True,
) -> InpaintResult:
    """Fill the masked region of x_masked using K feature-space neighbors.

    The index must be built on unmasked images; the test image, if
    indexed, belongs in exclude_ids.  With composite (the default) known
    pixels are copied back from the input bit-exactly.
    """
    mask = validate_mask(mask)
    x_masked = resize_short_side(np.asarray(x_masked, dtype=np.float32))
    if x_masked.shape[-2:] != mask.shape:
        raise ShapeError(
            f"mask shape {mask.shape} does not match working image dims {x_masked.shape[-2:]}"
        )

    query_desc = pool5_descriptor(net, x_masked)
    masked_index = masked_descriptor_index(index, net, mask, exclude_ids)
    neighbor_ids = knn_by_cosine(masked_index, query_desc, k)
    if not neighbor_ids:
        raise ValueError("no inpainting candidates available")

    # Perfectly paired sets: same records, differing only inside the mask.
    phibar_t = mean_feature(net, index, neighbor_ids)
    phibar_s = mean_feature(
        net, index, neighbor_ids,
        image_transform=lambda img: apply_mask(resize_short_side(img), mask),
    )
    direction = attribute_vector(phibar_t, phibar_s)
    alpha = scale_alpha(direction.w.data, cfg.strength_beta)
    log.info("inpainting with %d neighbors, alpha=%.6g", len(neighbor_ids), alpha)

    x_pre = preprocess(x_masked, net.preprocessing)
    fx = capture_features(net, x_pre, tuple(n for n, _, _, _ in direction.w.layout))
    target = FeatureVector(
        (fx.data.astype(np.float64) + alpha * direction.w.data.astype(np.float64)).astype(
            np.float32
        ),
        fx.layout,
    )
    image, result = minimize_to_image(x_pre, target, net, cfg)

    if composite:
        known = ~mask
        image[..., known] = x_masked[..., known]
    return InpaintResult(image, result, alpha, neighbor_ids)
