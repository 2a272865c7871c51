"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from hetdistill.errors import EvaluationError, InputError
from hetdistill.tensor import Tensor, gradients


@dataclass(frozen=True)
class CheckReport:
    """Outcome of :func:`finite_diff_check`.

    ``max_rel_error`` is the largest coordinatewise
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``, where the
    floor is ``max(floor, scale_floor * max|numeric|)``.
    """

    max_rel_error: float
    max_abs_error: float
    worst_index: tuple
    tol: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def _evaluate(f, x: Tensor) -> float:
    value = f(x)
    value = float(value.data.reshape(-1)[0]) if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise EvaluationError(f"objective evaluated to {value}")
    return value


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-7,
    scale_floor: float = 0.0,
) -> CheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    ``x`` is perturbed in place one coordinate at a time and restored
    afterwards; ``f`` must rebuild its graph from ``x`` on every call.

    ``scale_floor`` ties the floor to the largest numeric gradient entry of
    ``x``. Coordinates many orders of magnitude below the rest are then judged
    on absolute error, where central differences only carry roundoff.
    """
    if not 0 < step <= 1e-2:
        raise InputError(f"step must lie in (0, 1e-2], got {step}")
    if not x.requires_grad:
        x = Tensor(x.data, requires_grad=True)
    x.data = np.ascontiguousarray(x.data)
    root = f(x)
    if not np.isfinite(root.data).all():
        raise EvaluationError("objective evaluated to a non-finite value")
    (analytic,) = gradients(root, [x])

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = _evaluate(f, x)
        flat[i] = orig - step
        minus = _evaluate(f, x)
        flat[i] = orig
        numeric.reshape(-1)[i] = (plus - minus) / (2.0 * step)

    abs_err = np.abs(analytic - numeric)
    if scale_floor > 0 and numeric.size:
        floor = max(floor, scale_floor * float(np.abs(numeric).max()))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = abs_err / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    max_rel = float(rel.max()) if rel.size else 0.0
    return CheckReport(
        max_rel_error=max_rel,
        max_abs_error=float(abs_err.max()) if rel.size else 0.0,
        worst_index=tuple(int(i) for i in worst),
        tol=tol,
        passed=max_rel <= tol,
        analytic=analytic,
        numeric=numeric,
    )
