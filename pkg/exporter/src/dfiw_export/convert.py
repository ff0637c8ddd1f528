"""Checkpoint to DFIW conversion with topology validation.

Accepts torch checkpoints holding the VGG-19 conv stack under either key
convention:

  * torchvision ``features.N.weight`` / ``features.N.bias`` (conv indices
    0,2,5,...,34 of vgg19().features), or
  * direct ``conv<block>_<i>.weight`` / ``.bias`` keys, as used by several
    republished "normalized" VGG-19 checkpoints.

The normalized variant this tool targets expects images in [0, 255], BGR
channel order, with per-channel means subtracted; those defaults are
written into the DFIW preprocessing block and can be overridden.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

from .dfiw import CHANNEL_ORDER, ConvEntry, DfiwFile

VGG19_BLOCKS = (2, 2, 4, 4, 4)
VGG19_CHANNELS = (64, 128, 256, 512, 512)

# Means of the classic [0,255]-scale convention, in BGR network order.
DEFAULT_MEANS_BGR = (103.939, 116.779, 123.68)
DEFAULT_CHANNEL_ORDER = "bgr"

# Conv module indices inside torchvision vgg19().features.
_TORCHVISION_CONV_INDICES = (0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34)


class TopologyError(ValueError):
    pass


def conv_names() -> list[str]:
    return [
        f"conv{block}_{i}"
        for block, n in enumerate(VGG19_BLOCKS, start=1)
        for i in range(1, n + 1)
    ]


def expected_shapes() -> dict[str, tuple[int, int, int, int]]:
    shapes = {}
    prev = 3
    names = conv_names()
    pos = 0
    for block, n in enumerate(VGG19_BLOCKS):
        out_c = VGG19_CHANNELS[block]
        for _ in range(n):
            shapes[names[pos]] = (out_c, prev, 3, 3)
            prev = out_c
            pos += 1
    return shapes


def _state_dict(checkpoint) -> dict:
    if hasattr(checkpoint, "state_dict"):
        return checkpoint.state_dict()
    if isinstance(checkpoint, dict) and "state_dict" in checkpoint:
        return checkpoint["state_dict"]
    if isinstance(checkpoint, dict):
        return checkpoint
    raise TopologyError(f"unsupported checkpoint object of type {type(checkpoint)!r}")


def _weight_keys(state: dict) -> dict[str, str]:
    """Map canonical conv names to the checkpoint's weight-key prefixes."""
    names = conv_names()
    if all(f"{name}.weight" in state for name in names):
        return {name: name for name in names}
    tv_prefixes = [f"features.{i}" for i in _TORCHVISION_CONV_INDICES]
    if all(f"{p}.weight" in state for p in tv_prefixes):
        return dict(zip(names, tv_prefixes))
    conv_like = sorted(k for k in state if k.endswith(".weight"))
    raise TopologyError(
        "checkpoint does not contain the VGG-19 conv stack under a known key "
        f"convention; weight keys present: {conv_like[:8]}{'...' if len(conv_like) > 8 else ''}"
    )


def load_checkpoint(path: str) -> dict:
    return _state_dict(torch.load(path, map_location="cpu", weights_only=True))


def convert_checkpoint(
    path: str,
    channel_order: str = DEFAULT_CHANNEL_ORDER,
    means: tuple[float, float, float] = DEFAULT_MEANS_BGR,
) -> DfiwFile:
    """Validate the checkpoint topology and assemble the DFIW model."""
    state = load_checkpoint(path)
    keys = _weight_keys(state)
    shapes = expected_shapes()
    mismatches = []
    entries = []
    for name in conv_names():
        w = state[f"{keys[name]}.weight"].detach().to(torch.float32).numpy()
        b = state[f"{keys[name]}.bias"].detach().to(torch.float32).numpy()
        if tuple(w.shape) != shapes[name] or b.shape != (shapes[name][0],):
            mismatches.append(f"{name}: weight {tuple(w.shape)} bias {b.shape}, "
                              f"expected {shapes[name]}")
            continue
        entries.append(ConvEntry(name, np.ascontiguousarray(w), np.ascontiguousarray(b)))
    if mismatches:
        raise TopologyError("checkpoint layer shapes differ from VGG-19:\n  " + "\n  ".join(mismatches))
    return DfiwFile(
        CHANNEL_ORDER[channel_order],
        np.asarray(means, dtype=np.float32),
        entries,
    )


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def make_test_checkpoint(path: str, seed: int = 0) -> None:
    """Random weights with the exact VGG-19 conv topology, for offline use.

    Written with direct conv<block>_<i> keys.  Stands in for the published
    checkpoint when the real download is unavailable; everything downstream
    (format, fixtures, cross-checks) is insensitive to the weight values.
    """
    gen = torch.Generator().manual_seed(seed)
    state = {}
    for name, shape in expected_shapes().items():
        fan_in = shape[1] * shape[2] * shape[3]
        scale = (2.0 / fan_in) ** 0.5
        state[f"{name}.weight"] = torch.randn(shape, generator=gen) * scale
        state[f"{name}.bias"] = torch.randn(shape[0], generator=gen) * 0.01
    torch.save(state, path)
