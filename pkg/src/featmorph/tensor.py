"""Dense 4-d tensors and the numeric kernels behind the conv stack.

Tensors are plain numpy arrays with layout (batch, channel, height, width),
row-major, float32 by default.  All kernels are pure functions; passing
float64 arrays runs the whole computation in float64 (used by the
high-precision gradient tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor dimensions do not satisfy a kernel's contract."""


def require_nchw(a: np.ndarray, what: str) -> None:
    if a.ndim != 4:
        raise ShapeError(f"{what}: expected a (n, c, h, w) tensor, got shape {a.shape}")


@dataclass(frozen=True)
class ConvParams:
    """Weights and geometry of one convolution layer.

    weights: (out_c, in_c, kh, kw); bias: (out_c,).  Padding is zero padding.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-d, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"conv bias length {self.bias.shape} does not match out_c {self.weights.shape[0]}"
            )
        if self.stride < 1 or self.pad < 0:
            raise ShapeError(f"invalid conv geometry: stride={self.stride} pad={self.pad}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


def conv2d_forward(x: np.ndarray, p: ConvParams, layer: str = "conv") -> np.ndarray:
    """Cross-correlation of x with p.weights plus bias.

    Output spatial dims are (h + 2*pad - kh)//stride + 1 and likewise for w.
    Implemented as im2col + one matrix multiply so the work lands in BLAS.
    """
    require_nchw(x, layer)
    n, c, h, w = x.shape
    oc, ic, kh, kw = p.weights.shape
    if c != ic:
        raise ShapeError(f"{layer}: input has {c} channels, weights expect {ic}")
    if h + 2 * p.pad < kh or w + 2 * p.pad < kw:
        raise ShapeError(f"{layer}: input {h}x{w} too small for {kh}x{kw} kernel with pad {p.pad}")

    if p.pad:
        x = np.pad(x, ((0, 0), (0, 0), (p.pad, p.pad), (p.pad, p.pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, :: p.stride, :: p.stride]
    oh, ow = win.shape[2], win.shape[3]
    # (n, c, oh, ow, kh, kw) -> (c*kh*kw, n*oh*ow); the reshape materialises im2col
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(ic * kh * kw, n * oh * ow)
    out = (p.weights.reshape(oc, -1) @ cols).reshape(oc, n, oh, ow).transpose(1, 0, 2, 3)
    out = out + p.bias.astype(out.dtype).reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward_input(grad_out: np.ndarray, p: ConvParams, layer: str = "conv") -> np.ndarray:
    """Gradient of conv2d_forward with respect to its input.

    Pure linear-operator transpose of the forward map (bias plays no role).
    Only stride 1 is supported, which keeps the input dims unambiguous;
    strided convolutions are outside this stack.
    """
    require_nchw(grad_out, layer)
    if p.stride != 1:
        raise ShapeError(f"{layer}: backward requires stride 1, got {p.stride}")
    n, c, oh, ow = grad_out.shape
    oc, ic, kh, kw = p.weights.shape
    if c != oc:
        raise ShapeError(f"{layer}: grad_out has {c} channels, weights produce {oc}")
    h = oh + kh - 1 - 2 * p.pad
    w = ow + kw - 1 - 2 * p.pad
    if h < 1 or w < 1:
        raise ShapeError(f"{layer}: grad_out {oh}x{ow} implies empty input")

    g2 = grad_out.transpose(1, 0, 2, 3).reshape(oc, n * oh * ow)
    cols = (p.weights.reshape(oc, -1).T.astype(g2.dtype, copy=False) @ g2)
    cols = cols.reshape(ic, kh, kw, n, oh, ow)
    gp = np.zeros((n, ic, h + 2 * p.pad, w + 2 * p.pad), dtype=grad_out.dtype)
    for di in range(kh):
        for dj in range(kw):
            gp[:, :, di : di + oh, dj : dj + ow] += cols[:, di, dj].transpose(1, 0, 2, 3)
    if p.pad:
        gp = gp[:, :, p.pad : p.pad + h, p.pad : p.pad + w]
    return np.ascontiguousarray(gp)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, saved_input: np.ndarray) -> np.ndarray:
    # Subgradient at exactly 0 is defined as 0: the mask is strict.
    if grad_out.shape != saved_input.shape:
        raise ShapeError(
            f"relu backward: grad shape {grad_out.shape} != saved input shape {saved_input.shape}"
        )
    return np.where(saved_input > 0, grad_out, 0)


@dataclass(frozen=True)
class ArgmaxIndices:
    """Winning positions of a 2x2 max-pool, plus the pre-pool spatial dims.

    pos holds, per output element, the winner's offset within its window in
    row-major scan order (0=r0c0, 1=r0c1, 2=r1c0, 3=r1c1); ties go to the
    first occurrence, so the backward pass is deterministic.
    """

    pos: np.ndarray  # uint8, (n, c, oh, ow)
    in_h: int
    in_w: int


def _replicate_pad_even(x: np.ndarray) -> np.ndarray:
    # Odd spatial dims are padded by replicating the last row/column.
    if x.shape[2] % 2:
        x = np.concatenate([x, x[:, :, -1:, :]], axis=2)
    if x.shape[3] % 2:
        x = np.concatenate([x, x[:, :, :, -1:]], axis=3)
    return x


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, ArgmaxIndices]:
    """2x2/stride-2 max pool; odd dims are replication-padded first."""
    require_nchw(x, "maxpool")
    n, c, h, w = x.shape
    xp = _replicate_pad_even(x)
    hp, wp = xp.shape[2], xp.shape[3]
    win = (
        xp.reshape(n, c, hp // 2, 2, wp // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, hp // 2, wp // 2, 4)
    )
    pos = win.argmax(axis=-1)
    out = np.take_along_axis(win, pos[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), ArgmaxIndices(pos.astype(np.uint8), h, w)


def maxpool2x2_backward(grad_out: np.ndarray, indices: ArgmaxIndices) -> np.ndarray:
    """Routes each grad element to its recorded argmax position."""
    require_nchw(grad_out, "maxpool backward")
    n, c, oh, ow = grad_out.shape
    if indices.pos.shape != (n, c, oh, ow):
        raise ShapeError(
            f"maxpool backward: grad shape {grad_out.shape} does not match indices "
            f"shape {indices.pos.shape}"
        )
    win = np.zeros((n, c, oh, ow, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, indices.pos[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    gp = (
        win.reshape(n, c, oh, ow, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, 2 * oh, 2 * ow)
    )
    # Fold gradient of replicated rows/columns back onto their source.
    h, w = indices.in_h, indices.in_w
    if h % 2:
        gp[:, :, h - 1, :] += gp[:, :, h, :]
        gp = gp[:, :, :h, :]
    if w % 2:
        gp[:, :, :, w - 1] += gp[:, :, :, w]
        gp = gp[:, :, :, :w]
    return np.ascontiguousarray(gp)


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear interpolation with corner-aligned sampling."""
    require_nchw(x, "resize")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize: output dims must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()

    def grid(size_in: int, size_out: int) -> np.ndarray:
        if size_out == 1 or size_in == 1:
            return np.zeros(size_out)
        return np.linspace(0.0, size_in - 1.0, size_out)

    ys = grid(h, out_h)
    xs = grid(w, out_w)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(x.dtype)
    fx = (xs - x0).astype(x.dtype)

    rows = x[:, :, y0, :] * (1 - fy)[None, None, :, None] + x[:, :, y1, :] * fy[None, None, :, None]
    out = (
        rows[:, :, :, x0] * (1 - fx)[None, None, None, :]
        + rows[:, :, :, x1] * fx[None, None, None, :]
    )
    return np.ascontiguousarray(out.astype(x.dtype, copy=False))
