"""Small dense primitives and a finite-difference gradient checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class GradientCheckError(FloatingPointError):
    pass


def matvec(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    M = np.asarray(M)
    x = np.asarray(x)
    if M.ndim != 2 or x.ndim != 1 or M.shape[1] != x.shape[0]:
        raise ValueError(f"cannot multiply {M.shape} matrix by {x.shape} vector")
    return M @ x


def l2_norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(x))))


def group_norms(x: np.ndarray) -> np.ndarray:
    """Euclidean norms over the last axis."""
    return np.sqrt(np.sum(x * x, axis=-1))


def group_distance(diff: np.ndarray):
    """Sum of per-group norms of ``diff`` (shape ``(..., K, d_s)``) and its gradient.

    Returns ``(dist, unit)`` with ``unit = diff / ||diff||`` per group, so that
    ``d dist / d diff = unit``. Groups with zero norm get a zero subgradient.
    """
    norms = group_norms(diff)
    safe = np.where(norms > 0, norms, 1)
    unit = np.where((norms > 0)[..., None], diff / safe[..., None], 0)
    return norms.sum(axis=-1), unit


def log_sigmoid(x):
    """Numerically stable ``log(1 / (1 + exp(-x)))``."""
    x = np.asarray(x, dtype=float)
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.exp(log_sigmoid(x))


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_block: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    tolerance: float = 1e-4
    # coordinates whose gradient is below abs_tol are judged on absolute error
    near_zero: int = 0
    max_abs_error: float = 0.0
    abs_tol: float = 1e-7

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and self.max_abs_error < self.abs_tol

    def __str__(self):
        blocks = ", ".join(f"{k}={v:.2e}" for k, v in self.per_block.items())
        status = "ok" if self.passed else "FAILED"
        return (
            f"gradient check {status}: max rel err {self.max_rel_error:.2e} over {self.checked} coords ({blocks}); "
            f"{self.near_zero} near-zero coords, max abs err {self.max_abs_error:.1e}"
        )


def check_gradients(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int = 200,
    abs_tol: float = 1e-7,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` with one gradient array per
    parameter block. Blocks larger than ``max_coords`` are checked on a random
    subset of coordinates. The error for a coordinate is
    ``|a - n| / max(|a|, |n|)``; coordinates where both are below ``abs_tol``
    are instead required to agree to ``abs_tol`` in absolute terms, since
    round-off in the difference quotient dominates there.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    loss, grads = loss_fn(params)
    if not math.isfinite(loss):
        raise GradientCheckError(f"loss is not finite at the check point: {loss}")
    for k in params:
        if grads[k].shape != params[k].shape:
            raise GradientCheckError(f"gradient for {k!r} has shape {grads[k].shape}, parameter {params[k].shape}")

    report = GradCheckReport(0.0, tolerance=tolerance, abs_tol=abs_tol)
    for name, value in params.items():
        flat = value.reshape(-1)
        grad = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up, _ = loss_fn(params)
            flat[i] = orig - epsilon
            down, _ = loss_fn(params)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise GradientCheckError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (up - down) / (2 * epsilon)
            scale = max(abs(grad[i]), abs(numeric))
            if scale < abs_tol:
                report.near_zero += 1
                report.max_abs_error = max(report.max_abs_error, abs(grad[i] - numeric))
                continue
            worst = max(worst, abs(grad[i] - numeric) / scale)
        report.per_block[name] = worst
        report.checked += len(coords)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
