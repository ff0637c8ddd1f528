"""Limited-memory BFGS over flat real vectors.

Two-loop recursion with backtracking Armijo line search.  All internal
arithmetic is float64 regardless of what the objective does, so iteration
traces are reproducible.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

CURVATURE_FLOOR = 1e-10

STATUS_CONVERGED = "converged"
STATUS_MAX_ITERATIONS = "max_iterations"
STATUS_LINE_SEARCH_FAILED = "line_search_failed"


class ObjectiveEval(NamedTuple):
    value: float
    gradient: np.ndarray


@dataclass
class LbfgsConfig:
    history: int = 8
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6  # relative to the initial gradient norm
    armijo_c1: float = 1e-4
    backtrack_factor: float = 0.5
    max_line_search: int = 20

    def __post_init__(self):
        if self.history < 1:
            raise ValueError(f"history must be >= 1, got {self.history}")
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient tolerance must be positive")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    value: float
    grad_norm: float
    step: float


@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    status: str
    trace: list[TraceRecord] = field(default_factory=list)
    curvature_skips: int = 0


class NonFiniteObjectiveError(RuntimeError):
    """The objective returned a non-finite value or gradient."""

    def __init__(self, iteration: int, x: np.ndarray, value: float):
        super().__init__(
            f"objective became non-finite at iteration {iteration} (value {value!r}); "
            "aborting with the offending iterate attached"
        )
        self.iteration = iteration
        self.x = x
        self.value = value


def _evaluate(f: Callable, x: np.ndarray, iteration: int) -> tuple[float, np.ndarray]:
    value, grad = f(x)
    value = float(value)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {x.shape}")
    if not np.isfinite(value) or not np.isfinite(grad).all():
        raise NonFiniteObjectiveError(iteration, x.copy(), value)
    return value, grad


def _two_loop(grad, s_hist, y_hist, rho_hist):
    q = grad.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * float(s @ q)
        q -= a * y
        alphas.append(a)
    s, y = s_hist[-1], y_hist[-1]
    gamma = float(s @ y) / float(y @ y)  # initial inverse-Hessian scaling
    r = gamma * q
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * float(y @ r)
        r += (a - b) * s
    return -r


def lbfgs_minimize(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    cfg: LbfgsConfig | None = None,
) -> LbfgsResult:
    """Minimise f from x0; f maps a float64 vector to (value, gradient).

    Terminates when the gradient norm drops below the configured fraction
    of its initial value, on the iteration cap, or when the line search
    cannot make progress; accepted iterates never increase f.
    """
    cfg = cfg or LbfgsConfig()
    x = np.asarray(x0, dtype=np.float64).copy()
    if not np.isfinite(x).all():
        raise ValueError("x0 must be finite")

    value, grad = _evaluate(f, x, 0)
    gnorm0 = float(np.linalg.norm(grad))
    gnorm = gnorm0
    trace = [TraceRecord(0, value, gnorm, 0.0)]
    tol = cfg.gradient_tolerance * gnorm0

    s_hist: deque = deque(maxlen=cfg.history)
    y_hist: deque = deque(maxlen=cfg.history)
    rho_hist: deque = deque(maxlen=cfg.history)
    skips = 0

    if gnorm <= tol:
        return LbfgsResult(x, value, gnorm, 0, STATUS_CONVERGED, trace, skips)

    status = STATUS_MAX_ITERATIONS
    iteration = 0
    for iteration in range(1, cfg.max_iterations + 1):
        if s_hist:
            direction = _two_loop(grad, s_hist, y_hist, rho_hist)
            t0 = 1.0
        else:
            direction = -grad
            t0 = 1.0 / gnorm  # first step: steepest descent of unit length
        slope = float(grad @ direction)
        if slope >= 0.0:
            # Numerical breakdown of the quasi-Newton model; fall back.
            direction = -grad
            slope = -gnorm * gnorm
            t0 = 1.0 / gnorm

        t = t0
        accepted = False
        for _ in range(cfg.max_line_search):
            x_new = x + t * direction
            value_new, grad_new = _evaluate(f, x_new, iteration)
            if value_new <= value + cfg.armijo_c1 * t * slope:
                accepted = True
                break
            t *= cfg.backtrack_factor
        if not accepted:
            status = STATUS_LINE_SEARCH_FAILED
            iteration -= 1
            break

        s = x_new - x
        y = grad_new - grad
        curvature = float(s @ y)
        # Relative test: an absolute floor throws away the small, most local
        # pairs near convergence and stalls the quadratic tail.
        if curvature > CURVATURE_FLOOR * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / curvature)
        else:
            skips += 1

        x, value, grad = x_new, value_new, grad_new
        gnorm = float(np.linalg.norm(grad))
        trace.append(TraceRecord(iteration, value, gnorm, t))
        if gnorm <= tol:
            status = STATUS_CONVERGED
            break

    return LbfgsResult(x, value, gnorm, iteration, status, trace, skips)


def write_trace_csv(trace: list[TraceRecord], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "f", "grad_norm", "step"])
        for rec in trace:
            writer.writerow([rec.iteration, repr(rec.value), repr(rec.grad_norm), repr(rec.step)])


def read_trace_csv(path: str) -> list[TraceRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out.append(TraceRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3])))
    return out
