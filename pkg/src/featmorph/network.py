"""The convnet stack: topology, weight file I/O, forward capture, backprop.

The engine hardcodes one family of architectures: sequences of 3x3/stride-1
conv layers named ``conv<block>_<i>``, each followed by a ReLU, with a 2x2
max-pool closing every block.  The canonical instance is the VGG-19 conv
stack (16 conv layers, blocks of 2,2,4,4,4, ending at pool5); the fully
connected layers are never represented.

Weight files use the DFIW container (little-endian):

    magic "DFIW" | version u32=1
    preprocessing: channel-order byte (0=RGB, 1=BGR) + 3 x f32 channel means
    layer count u32
    per conv layer: name len u16 + UTF-8 name, dims 4 x u32 (out,in,kh,kw),
                    f32 weights row-major, bias len u32, f32 bias

Only conv layers are stored; ReLU/pool structure is implied by the names.
The preprocessing block travels with the weights so the engine stays
agnostic to whichever checkpoint convention the exporter used.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ArgmaxIndices,
    ConvParams,
    ShapeError,
    conv2d_backward_input,
    conv2d_forward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu_backward,
    relu_forward,
)

DFIW_MAGIC = b"DFIW"
DFIW_VERSION = 1

CHANNEL_ORDER_RGB = 0
CHANNEL_ORDER_BGR = 1

_CONV_NAME = re.compile(r"^conv(\d+)_(\d+)$")


class WeightFormatError(ValueError):
    """Raised for corrupt, truncated, or topology-mismatched weight files."""


class UnknownLayerError(KeyError):
    """Raised when a capture name does not exist in the network."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" | "relu" | "maxpool"
    params: ConvParams | None = None


@dataclass(frozen=True)
class Preprocessing:
    channel_order: int  # CHANNEL_ORDER_RGB or CHANNEL_ORDER_BGR
    means: np.ndarray  # (3,) float32, in network channel order


@dataclass
class Network:
    layers: list[LayerSpec]
    preprocessing: Preprocessing
    _by_name: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_name = {}
        for i, layer in enumerate(self.layers):
            if layer.name in self._by_name:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            self._by_name[layer.name] = i
        prev_out = 3
        for layer in self.layers:
            if layer.kind != "conv":
                continue
            if layer.params.in_channels != prev_out:
                raise ShapeError(
                    f"{layer.name}: expects {layer.params.in_channels} input channels "
                    f"but the preceding layer produces {prev_out}"
                )
            prev_out = layer.params.out_channels

    def layer_index(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownLayerError(f"no layer named {name!r} in this network") from None

    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def conv_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == "conv"]


# ---------------------------------------------------------------------------
# Topology


def structure_from_conv_names(names: list[str]) -> list[tuple[str, str]]:
    """Expand conv layer names into the full (name, kind) layer sequence.

    Names must follow the conv<block>_<i> convention with blocks numbered
    1..B and indices 1..n_b; a ReLU follows every conv and a pool closes
    every block.
    """
    if not names:
        raise WeightFormatError("weight file contains no conv layers")
    parsed = []
    for name in names:
        m = _CONV_NAME.match(name)
        if not m:
            raise WeightFormatError(f"layer name {name!r} does not match conv<block>_<i>")
        parsed.append((int(m.group(1)), int(m.group(2)), name))
    structure: list[tuple[str, str]] = []
    expected_block, expected_idx = 1, 1
    for block, idx, name in parsed:
        if (block, idx) != (expected_block, expected_idx):
            if block == expected_block + 1 and idx == 1 and expected_idx > 1:
                structure.append((f"pool{expected_block}", "maxpool"))
                expected_block, expected_idx = block, 1
            else:
                raise WeightFormatError(
                    f"layer {name!r} out of order: expected conv{expected_block}_{expected_idx}"
                )
        structure.append((name, "conv"))
        structure.append((f"relu{block}_{idx}", "relu"))
        expected_idx += 1
    structure.append((f"pool{expected_block}", "maxpool"))
    return structure


def vgg19_conv_names() -> list[str]:
    blocks = (2, 2, 4, 4, 4)
    return [f"conv{b}_{i}" for b, n in enumerate(blocks, start=1) for i in range(1, n + 1)]


def vgg19_conv_shapes() -> dict[str, tuple[int, int, int, int]]:
    """Published VGG-19 conv weight shapes, keyed by layer name."""
    channels = {1: 64, 2: 128, 3: 256, 4: 512, 5: 512}
    shapes = {}
    prev = 3
    for name in vgg19_conv_names():
        block = int(_CONV_NAME.match(name).group(1))
        out_c = channels[block]
        shapes[name] = (out_c, prev, 3, 3)
        prev = out_c
    return shapes


def make_network(
    conv_entries: list[tuple[str, np.ndarray, np.ndarray]],
    preprocessing: Preprocessing,
) -> Network:
    """Assemble a Network from named conv weights plus the implied structure."""
    structure = structure_from_conv_names([name for name, _, _ in conv_entries])
    weights = {name: (w, b) for name, w, b in conv_entries}
    layers = []
    for name, kind in structure:
        if kind == "conv":
            w, b = weights[name]
            layers.append(LayerSpec(name, "conv", ConvParams(w, b, stride=1, pad=1)))
        else:
            layers.append(LayerSpec(name, kind))
    return Network(layers, preprocessing)


def random_network(
    conv_plan: list[tuple[str, int]],
    seed: int = 0,
    preprocessing: Preprocessing | None = None,
) -> Network:
    """Random He-initialised network for tests and calibration runs.

    conv_plan lists (name, out_channels) in order; input channels chain
    from 3.
    """
    rng = np.random.default_rng(seed)
    entries = []
    prev = 3
    for name, out_c in conv_plan:
        scale = np.sqrt(2.0 / (prev * 9))
        w = (rng.standard_normal((out_c, prev, 3, 3)) * scale).astype(np.float32)
        b = (rng.standard_normal(out_c) * 0.01).astype(np.float32)
        entries.append((name, w, b))
        prev = out_c
    if preprocessing is None:
        preprocessing = Preprocessing(
            CHANNEL_ORDER_RGB, np.array([123.68, 116.779, 103.939], dtype=np.float32)
        )
    return make_network(entries, preprocessing)


def random_vgg19(seed: int = 0) -> Network:
    channels = {1: 64, 2: 128, 3: 256, 4: 512, 5: 512}
    plan = [(n, channels[int(_CONV_NAME.match(n).group(1))]) for n in vgg19_conv_names()]
    return random_network(plan, seed=seed)


# ---------------------------------------------------------------------------
# DFIW file I/O


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.data):
            raise WeightFormatError(
                f"{self.path}: truncated while reading {what} "
                f"(need {size} bytes at offset {self.pos}, have {len(self.data) - self.pos})"
            )
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32s(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4", count=count).copy()

    def done(self) -> bool:
        return self.pos == len(self.data)


def save_weights(net: Network, path: str) -> None:
    """Serialise a network's conv weights and preprocessing to DFIW."""
    convs = net.conv_layers()
    parts = [DFIW_MAGIC, struct.pack("<I", DFIW_VERSION)]
    parts.append(struct.pack("<B", net.preprocessing.channel_order))
    parts.append(net.preprocessing.means.astype("<f4").tobytes())
    parts.append(struct.pack("<I", len(convs)))
    for layer in convs:
        name = layer.name.encode("utf-8")
        w = layer.params.weights
        b = layer.params.bias
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<4I", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(struct.pack("<I", b.shape[0]))
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_weights(path: str, require_vgg19: bool = True) -> Network:
    """Parse a DFIW file into a Network.

    With require_vgg19 (the default) the file must contain exactly the
    published VGG-19 conv stack, names and shapes included.  Without it any
    conv<block>_<i> stack with a consistent channel chain is accepted,
    which is what the test fixtures use.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4, "magic") != DFIW_MAGIC:
        raise WeightFormatError(f"{path}: bad magic, not a DFIW file")
    version = r.u32("version")
    if version != DFIW_VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    order = r.take(1, "channel order")[0]
    if order not in (CHANNEL_ORDER_RGB, CHANNEL_ORDER_BGR):
        raise WeightFormatError(f"{path}: unknown channel-order byte {order}")
    means = r.f32s(3, "channel means")
    count = r.u32("layer count")

    entries = []
    for i in range(count):
        name_len = r.u16(f"name length of layer {i}")
        name = r.take(name_len, f"name of layer {i}").decode("utf-8")
        dims = struct.unpack("<4I", r.take(16, f"dims of {name}"))
        out_c, in_c, kh, kw = dims
        n_weights = out_c * in_c * kh * kw
        w = r.f32s(n_weights, f"weights of {name}").reshape(dims)
        bias_len = r.u32(f"bias length of {name}")
        if bias_len != out_c:
            raise WeightFormatError(
                f"{path}: {name} has bias length {bias_len}, expected {out_c}"
            )
        b = r.f32s(bias_len, f"bias of {name}")
        entries.append((name, w, b))
    if not r.done():
        raise WeightFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes after last layer")

    if require_vgg19:
        expected_names = vgg19_conv_names()
        got_names = [name for name, _, _ in entries]
        if got_names != expected_names:
            raise WeightFormatError(
                f"{path}: conv layers {got_names} do not match the VGG-19 stack"
            )
        for name, w, _ in entries:
            want = vgg19_conv_shapes()[name]
            if w.shape != want:
                raise WeightFormatError(
                    f"{path}: {name} has shape {w.shape}, expected {want}"
                )

    try:
        return make_network(entries, Preprocessing(order, means))
    except (WeightFormatError, ShapeError) as exc:
        raise WeightFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass
class ForwardState:
    """Per-call state linking a forward pass to its input-gradient pass."""

    image_shape: tuple[int, ...]
    deepest: int
    captures: dict[str, np.ndarray]
    relu_inputs: dict[int, np.ndarray]
    pool_indices: dict[int, ArgmaxIndices]


def forward_capture(
    net: Network,
    image: np.ndarray,
    capture: tuple[str, ...] | list[str],
    want_state: bool = False,
):
    """Run the stack over a preprocessed image, recording named activations.

    Computation stops after the deepest captured layer.  With want_state the
    per-layer saves needed by input_gradient are kept; without it memory
    stays transient.
    """
    indices = [net.layer_index(name) for name in capture]
    captures: dict[str, np.ndarray] = {}
    if not indices:
        return ({}, None) if want_state else {}
    deepest = max(indices)
    wanted = set(indices)

    state = ForwardState(image.shape, deepest, captures, {}, {}) if want_state else None
    cur = image
    for i in range(deepest + 1):
        layer = net.layers[i]
        if layer.kind == "conv":
            cur = conv2d_forward(cur, layer.params, layer=layer.name)
        elif layer.kind == "relu":
            if state is not None:
                state.relu_inputs[i] = cur
            cur = relu_forward(cur)
        else:
            cur, idx = maxpool2x2_forward(cur)
            if state is not None:
                state.pool_indices[i] = idx
        if i in wanted:
            captures[layer.name] = cur
    return (captures, state) if want_state else captures


def input_gradient(
    net: Network, state: ForwardState | None, capture_grads: dict[str, np.ndarray]
) -> np.ndarray:
    """Gradient of sum_layers <capture_grad, activation> w.r.t. the image.

    capture_grads keys must be a subset of the captures recorded in the
    paired forward pass (run with want_state=True).
    """
    if state is None:
        raise ValueError("input_gradient needs the state of a paired forward pass")
    for name, g in capture_grads.items():
        if name not in state.captures:
            raise ValueError(f"no saved forward state for capture {name!r}")
        if g.shape != state.captures[name].shape:
            raise ShapeError(
                f"capture grad {name!r} has shape {g.shape}, "
                f"activation has {state.captures[name].shape}"
            )

    grad = None
    for i in range(state.deepest, -1, -1):
        layer = net.layers[i]
        injected = capture_grads.get(layer.name)
        if injected is not None:
            grad = injected.copy() if grad is None else grad + injected
        if grad is None:
            continue
        if layer.kind == "conv":
            grad = conv2d_backward_input(grad, layer.params, layer=layer.name)
        elif layer.kind == "relu":
            grad = relu_backward(grad, state.relu_inputs[i])
        else:
            grad = maxpool2x2_backward(grad, state.pool_indices[i])
    if grad is None:
        grad = np.zeros(state.image_shape, dtype=np.float32)
    return grad


# ---------------------------------------------------------------------------
# Pixel-domain <-> network-domain mapping


def _reorder(rgb_ordered: np.ndarray, prep: Preprocessing) -> np.ndarray:
    if prep.channel_order == CHANNEL_ORDER_BGR:
        return rgb_ordered[:, ::-1]
    return rgb_ordered


def preprocess(rgb_image: np.ndarray, prep: Preprocessing) -> np.ndarray:
    """RGB [0,255] -> network input: channel reorder, then mean subtraction."""
    out = _reorder(rgb_image, prep) - prep.means.astype(rgb_image.dtype).reshape(1, 3, 1, 1)
    return np.ascontiguousarray(out)


def deprocess(tensor: np.ndarray, prep: Preprocessing, clamp: bool = True) -> np.ndarray:
    """Inverse of preprocess; clamps to [0,255] unless told otherwise."""
    out = _reorder(tensor + prep.means.astype(tensor.dtype).reshape(1, 3, 1, 1), prep)
    if clamp:
        out = np.clip(out, 0.0, 255.0)
    return np.ascontiguousarray(out)


def deprocess_gradient(grad_rgb: np.ndarray, prep: Preprocessing) -> np.ndarray:
    """Map a gradient w.r.t. deprocessed RGB back to the network domain.

    The unclamped deprocess is affine: the mean shift has derivative one
    and the channel reorder is its own inverse.
    """
    return np.ascontiguousarray(_reorder(grad_rgb, prep))
