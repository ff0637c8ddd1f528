"""Self-contained finite-difference verification of every backward path.

Run from the CLI as a build sanity check: random toy networks and images,
central differences against the analytic gradients, one max-relative-error
line per kernel.  The corrupt hook flips a sign in one analytic gradient so
tests can prove the check actually catches a broken build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import capture_features
from .network import forward_capture, input_gradient, preprocess, random_network
from .reconstruct import TvConfig, objective, tv_value_grad
from .tensor import (
    ConvParams,
    conv2d_backward_input,
    conv2d_forward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu_backward,
    relu_forward,
)

TOLERANCE = 1e-3


@dataclass
class KernelCheck:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


@dataclass
class GradcheckReport:
    checks: list[KernelCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _central_diff(f, x, eps):
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def _rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def _check_conv(rng, corrupt=False):
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    p = ConvParams(w, b, stride=1, pad=1)
    probe = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)

    def loss(v):
        return float(np.sum(conv2d_forward(v.astype(np.float32), p).astype(np.float64) * probe))

    numeric = _central_diff(loss, x.astype(np.float64), eps=1e-3)
    analytic = conv2d_backward_input(probe, p)
    if corrupt:
        analytic = -analytic
    return _rel_error(analytic, numeric)


def _check_relu(rng):
    x = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)
    x[np.abs(x) < 0.05] = 0.3  # keep probes away from the kink
    probe = rng.standard_normal(x.shape).astype(np.float32)

    def loss(v):
        return float(np.sum(relu_forward(v.astype(np.float32)).astype(np.float64) * probe))

    numeric = _central_diff(loss, x.astype(np.float64), eps=1e-3)
    analytic = relu_backward(probe, x)
    return _rel_error(analytic, numeric)


def _check_maxpool(rng):
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    # well-separated entries so the argmax never flips under the FD probe
    x += np.arange(x.size, dtype=np.float32).reshape(x.shape) * 0.05
    out, idx = maxpool2x2_forward(x)
    probe = rng.standard_normal(out.shape).astype(np.float32)

    def loss(v):
        o, _ = maxpool2x2_forward(v.astype(np.float32))
        return float(np.sum(o.astype(np.float64) * probe))

    numeric = _central_diff(loss, x.astype(np.float64), eps=1e-3)
    analytic = maxpool2x2_backward(probe, idx)
    return _rel_error(analytic, numeric)


def _check_tv(rng):
    z = rng.standard_normal((1, 3, 6, 6)).astype(np.float64) * 3.0

    def loss(v):
        return tv_value_grad(v, 2.0)[0]

    numeric = _central_diff(loss, z.copy(), eps=1e-4)
    _, analytic = tv_value_grad(z, 2.0)
    return _rel_error(analytic, numeric)


def _check_network_backprop(rng, seed):
    # Deep checks run the same kernels on f64 arrays: at network depth the
    # f32 forward noise would swamp the difference quotient for some seeds.
    net = random_network([("conv1_1", 3), ("conv2_1", 4)], seed=seed)
    img = rng.standard_normal((1, 3, 8, 8))
    caps, state = forward_capture(net, img, ("relu2_1",), want_state=True)
    probe = rng.standard_normal(caps["relu2_1"].shape)

    def loss(v):
        out = forward_capture(net, v, ("relu2_1",))["relu2_1"]
        return float(np.sum(out * probe))

    numeric = _central_diff(loss, img.copy(), eps=1e-5)
    analytic = input_gradient(net, state, {"relu2_1": probe})
    return _rel_error(analytic, numeric)


def _check_full_objective(rng, seed):
    net = random_network([("conv1_1", 3), ("conv2_1", 4)], seed=seed + 1)
    capture = ("relu1_1", "relu2_1")
    img = (rng.random((1, 3, 8, 8)) * 255).astype(np.float64)
    pre = preprocess(img, net.preprocessing)
    target = capture_features(net, pre, capture)
    z = pre + rng.standard_normal(pre.shape) * 5
    tv = TvConfig(lam=0.001, exponent=2.0)

    def loss(v):
        return objective(v, target, net, tv)[0]

    numeric = _central_diff(loss, z.copy(), eps=1e-5)
    _, analytic = objective(z, target, net, tv)
    return _rel_error(analytic, numeric)


def run_gradcheck(seed: int = 0, corrupt: bool = False) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    checks = [
        KernelCheck("conv2d_backward_input", _check_conv(rng, corrupt=corrupt)),
        KernelCheck("relu_backward", _check_relu(rng)),
        KernelCheck("maxpool2x2_backward", _check_maxpool(rng)),
        KernelCheck("tv_gradient", _check_tv(rng)),
        KernelCheck("network_input_gradient", _check_network_backprop(rng, seed)),
        KernelCheck("full_objective", _check_full_objective(rng, seed)),
    ]
    return GradcheckReport(checks)
