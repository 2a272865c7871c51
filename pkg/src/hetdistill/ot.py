"""Entropic optimal transport between teacher and student token sets.

Token sets are ``(V, D)`` or batched ``(B, V, D)`` tensors of unit-norm rows.
The solver runs log-domain Sinkhorn updates on the scaled dual potentials
``u = f / eps`` and ``v = g / eps``. Gradients flow through exactly the
iterations that were executed, as if every update had been recorded on the
tape.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from hetdistill import tensor as T
from hetdistill.errors import DimensionError, InputError
from hetdistill.tensor import Tensor

DEFAULT_EPSILON = 0.1
DEFAULT_MAX_ITER = 200
DEFAULT_TOL = 1e-6


@dataclass
class TransportPlan:
    """Coupling between ``V_t`` teacher and ``V_s`` student tokens.

    ``values`` may carry a leading batch axis; ``iterations_used`` and
    ``marginal_violation`` then refer to the worst batch element.
    """

    values: Tensor
    epsilon: float
    iterations_used: int
    marginal_violation: float
    relaxation: float = 1.0

    @property
    def shape(self):
        return self.values.shape

    def numpy(self) -> np.ndarray:
        return self.values.data


def cost_matrix(teacher, student) -> Tensor:
    """Squared Euclidean distances ``C[i, j] = |t_i - s_j|^2``, clamped at zero."""
    t, s = T.as_tensor(teacher), T.as_tensor(student)
    if t.ndim != s.ndim or t.ndim not in (2, 3):
        raise DimensionError(f"token sets must both be 2-D or 3-D, got {t.shape} and {s.shape}")
    if t.shape[-1] != s.shape[-1]:
        raise DimensionError(f"token width mismatch: teacher {t.shape} vs student {s.shape}")
    if t.ndim == 3 and t.shape[0] != s.shape[0]:
        raise DimensionError(f"batch mismatch: teacher {t.shape} vs student {s.shape}")
    tt = T.expand_dims((t * t).sum(axis=-1), -1)
    ss = T.expand_dims((s * s).sum(axis=-1), -2)
    cross = t @ s.T
    return T.clamp_min(tt + ss - 2.0 * cross, 0.0)


def _violation(P: np.ndarray) -> np.ndarray:
    """Per-plan max of the L1 row and column marginal errors."""
    n, m = P.shape[-2:]
    rows = np.abs(P.sum(axis=-1) - 1.0 / n).sum(axis=-1)
    cols = np.abs(P.sum(axis=-2) - 1.0 / m).sum(axis=-1)
    return np.maximum(rows, cols)


# Largest spread of -C/eps for which the log-sum-exps are evaluated through a
# precomputed kernel. Every kernel entry and scaling factor then stays above
# exp(-600), far from float64 underflow.
KERNEL_RANGE = 300.0


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    top = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(top, axis) + np.log(np.sum(np.exp(x - top), axis=axis))


class _DenseLse:
    """Row/column log-sum-exps of ``Z + potential``, recomputed from ``Z`` each call."""

    def __init__(self, Z):
        self.Z = Z
        self.gZ = np.zeros_like(Z)

    def rows(self, v):
        return _lse(self.Z + v[:, None, :], -1)

    def cols(self, u):
        return _lse(self.Z + u[:, :, None], -2)

    # Reverse-mode pieces. ``row_vjp(v, q)`` takes the adjoint ``q`` of
    # ``lse_j(Z + v)`` and returns the one for ``v``; the cost part is kept.
    def row_vjp(self, v, q):
        S = np.exp(self.Z + v[:, None, :] - self.rows(v)[:, :, None])
        self.gZ += S * q[:, :, None]
        return np.einsum("bij,bi->bj", S, q)

    def col_vjp(self, u, t):
        S = np.exp(self.Z + u[:, :, None] - self.cols(u)[:, None, :])
        self.gZ += S * t[:, None, :]
        return np.einsum("bij,bj->bi", S, t)

    def cost_grad(self):
        return self.gZ


class _KernelLse:
    """Same quantities through ``K = exp(Z - max Z)`` and matrix-vector products.

    Each softmax matrix of the unrolled updates is ``K`` times a rank-one
    scaling, so the reverse sweep needs only matvecs plus one final
    ``(n, 2k) @ (2k, m)`` product for the cost gradient.
    """

    def __init__(self, Z):
        self.top = Z.max(axis=(-2, -1))[:, None]
        self.K = np.exp(Z - self.top[:, :, None])
        self.left, self.right = [], []

    def _row_sums(self, v):
        shift = v.max(axis=-1, keepdims=True)
        w = np.exp(v - shift)
        return w, (self.K @ w[:, :, None])[:, :, 0], shift

    def _col_sums(self, u):
        shift = u.max(axis=-1, keepdims=True)
        w = np.exp(u - shift)
        return w, (w[:, None, :] @ self.K)[:, 0, :], shift

    def rows(self, v):
        _, r, shift = self._row_sums(v)
        return self.top + shift + np.log(r)

    def cols(self, u):
        _, c, shift = self._col_sums(u)
        return self.top + shift + np.log(c)

    def row_vjp(self, v, q):
        # row softmax: K * outer(1 / r, b)
        b, r, _ = self._row_sums(v)
        q = q / r
        self.left.append(q)
        self.right.append(b)
        return b * (q[:, None, :] @ self.K)[:, 0, :]

    def col_vjp(self, u, t):
        # column softmax: K * outer(a, 1 / c)
        a, c, _ = self._col_sums(u)
        t = t / c
        self.left.append(a)
        self.right.append(t)
        return a * (self.K @ t[:, :, None])[:, :, 0]

    def cost_grad(self):
        if not self.left:
            return np.zeros_like(self.K)
        return self.K * (np.stack(self.left, axis=-1) @ np.stack(self.right, axis=-2))


# Over-relaxation: after RELAX_WARMUP plain rounds the contraction rate rho of
# the marginal error is measured and the updates switch to the weight
# 2 / (1 + sqrt(1 - rho)), rounded down to a multiple of 1/20 and capped.
RELAX_WARMUP = 20
RELAX_CAP = 1.95


def _relaxation(errors: list) -> float:
    span = min(10, len(errors) - 1)
    if span < 1 or errors[-1 - span] <= 0 or errors[-1] >= errors[-1 - span]:
        return 1.0
    rho = (errors[-1] / errors[-1 - span]) ** (1.0 / span)
    omega = 2.0 / (1.0 + math.sqrt(1.0 - rho))
    return min(RELAX_CAP, math.floor(omega * 20.0) / 20.0)


def _unrolled_plan(C: Tensor, epsilon: float, max_iter: int, tol: float, relax: bool = True):
    """Sinkhorn as one tape node whose backward replays the iterations in reverse.

    Round ``k`` updates ``u <- (1 - w) u + w (log a - lse_j(Z + v))`` and then
    ``v`` likewise, with ``w = 1`` (plain Sinkhorn) until the relaxation weight
    is fixed. The gradient is that of this unrolled sequence with the weight
    and the iteration count held fixed; only the potentials are stored.
    """
    n, m = C.shape[-2:]
    log_a, log_b = -math.log(n), -math.log(m)
    Z = (C.data * (-1.0 / epsilon)).reshape((-1, n, m)).astype(np.float64, copy=False)
    spread = np.max(Z.max(axis=(-2, -1)) - Z.min(axis=(-2, -1)))
    ops = _KernelLse(Z) if spread <= KERNEL_RANGE else _DenseLse(Z)

    u = np.zeros(Z.shape[:1] + (n,))
    v = np.zeros(Z.shape[:1] + (m,))
    us, vs, omegas, errors = [u], [v], [], []
    omega, col_lse = 1.0, None
    for it in range(max_iter):
        row_lse = ops.rows(v)
        if it > 0:
            # both marginals of the current plan fall out of lse values that
            # the updates need anyway
            row_err = np.abs(np.exp(u + row_lse) - 1.0 / n).sum(axis=-1)
            col_err = np.abs(np.exp(v + col_lse) - 1.0 / m).sum(axis=-1)
            errors.append(float(max(row_err.max(), col_err.max())))
            if errors[-1] <= tol:
                break
            if relax and it == RELAX_WARMUP:
                omega = _relaxation(errors)
        u = (1.0 - omega) * u + omega * (log_a - row_lse)
        col_lse = ops.cols(u)
        v = (1.0 - omega) * v + omega * (log_b - col_lse)
        us.append(u)
        vs.append(v)
        omegas.append(omega)
    P = np.exp(Z + u[:, :, None] + v[:, None, :])

    def backward(g):
        gP = g.reshape(P.shape) * P
        gu, gv = gP.sum(axis=-1), gP.sum(axis=-2)
        for k in range(len(omegas), 0, -1):
            w = omegas[k - 1]
            # v_k = (1 - w) v_{k-1} + w (log b - lse_i(Z + u_k))
            gu = gu - ops.col_vjp(us[k], w * gv)
            gv_prev = (1.0 - w) * gv
            # u_k = (1 - w) u_{k-1} + w (log a - lse_j(Z + v_{k-1}))
            gv_prev = gv_prev - ops.row_vjp(vs[k - 1], w * gu)
            gu = (1.0 - w) * gu
            gv = gv_prev
        gZ = gP - ops.cost_grad()
        return ((gZ * (-1.0 / epsilon)).reshape(C.shape).astype(C.dtype, copy=False),)

    values = P.reshape(C.shape).astype(C.dtype, copy=False)
    return Tensor._result(values, (C,), backward, "sinkhorn"), len(omegas), omega


def sinkhorn(
    cost,
    epsilon: float = DEFAULT_EPSILON,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    *,
    overrelax: bool = True,
) -> TransportPlan:
    """Solve uniform-marginal entropic OT for ``cost`` of shape ``(n, m)`` or ``(B, n, m)``.

    Alternates row and column scalings in the log domain. Stops once the L1
    marginal violation of every plan in the batch is at most ``tol`` or after
    ``max_iter`` rounds; hitting ``max_iter`` is not an error, the achieved
    violation is reported on the plan.

    With ``overrelax`` the updates are over-relaxed after a plain warm-up
    (see ``RELAX_WARMUP``); the fixed point is the same, it is only reached
    in fewer rounds on nearly degenerate costs. The weight used is recorded
    as ``plan.relaxation``.
    """
    if epsilon <= 0:
        raise InputError(f"epsilon must be positive, got {epsilon}")
    if max_iter < 1:
        raise InputError(f"max_iter must be >= 1, got {max_iter}")
    if tol <= 0:
        raise InputError(f"tol must be positive, got {tol}")
    C = T.as_tensor(cost)
    if C.ndim not in (2, 3):
        raise DimensionError(f"cost must be 2-D or 3-D, got shape {C.shape}")
    if not np.isfinite(C.data).all():
        raise InputError("cost matrix has non-finite entries")

    P, used, omega = _unrolled_plan(C, float(epsilon), int(max_iter), float(tol), overrelax)
    violation = float(np.max(_violation(P.data)))
    return TransportPlan(values=P, epsilon=float(epsilon), iterations_used=used,
                         marginal_violation=violation, relaxation=omega)


def transport_cost(plan: TransportPlan, cost) -> Tensor:
    """``<P, C>``; averaged over the batch axis when present."""
    C = T.as_tensor(cost)
    if plan.values.shape != C.shape:
        raise DimensionError(f"plan shape {plan.values.shape} does not match cost {C.shape}")
    total = (plan.values * C).sum(axis=(-2, -1))
    return total.mean() if total.ndim else total


def ot_loss(
    teacher,
    student,
    plan: TransportPlan | None = None,
    *,
    epsilon: float = DEFAULT_EPSILON,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    return_plan: bool = False,
):
    """Expected squared distance between token sets under the entropic plan.

    Without ``plan`` the Sinkhorn solve runs inside the graph, so gradients
    reach ``student`` (and whatever produced ``teacher``) both through the
    cost and through the unrolled plan. A supplied plan is used as given.
    """
    C = cost_matrix(teacher, student)
    if plan is None:
        plan = sinkhorn(C, epsilon=epsilon, max_iter=max_iter, tol=tol)
    elif plan.values.shape != C.shape:
        raise DimensionError(
            f"plan shape {plan.values.shape} does not match token counts {C.shape}")
    loss = transport_cost(plan, C)
    return (loss, plan) if return_plan else loss


def plan_entropy(plan) -> float:
    """Shannon entropy ``-sum P log P`` of a single plan (0 log 0 = 0)."""
    P = plan.values.data if isinstance(plan, TransportPlan) else np.asarray(plan)
    nz = P[P > 0]
    return float(-(nz * np.log(nz)).sum())


def export_plan(plan, path) -> str:
    """Write a 2-D plan as CSV: header of student indices, one row per teacher token.

    Floats are written with ``repr`` so a re-read reproduces them bitwise.
    """
    P = plan.values.data if isinstance(plan, TransportPlan) else np.asarray(plan)
    if P.ndim != 2:
        raise DimensionError(f"export_plan writes one 2-D plan, got shape {P.shape}")
    path = os.fspath(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(range(P.shape[1]))
        for row in P:
            writer.writerow(repr(float(x)) for x in row)
    return path


def read_plan(path) -> np.ndarray:
    with open(os.fspath(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty plan file")
    return np.array([[float(x) for x in row] for row in rows[1:]], dtype=np.float64)
