"""Multi-head cross-attention from student queries onto teacher keys/values."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from hetdistill import tensor as T
from hetdistill.errors import DimensionError, InputError
from hetdistill.tensor import Tensor


@dataclass
class MhcaParams:
    """Projection weights for ``heads`` attention heads of width ``head_dim``.

    The per-head matrices are stored side by side: columns
    ``[i * head_dim, (i + 1) * head_dim)`` of ``w_q``, ``w_k`` and ``w_v`` belong
    to head ``i``, and rows of ``w_o`` follow the same layout.
    """

    w_q: Tensor  # (D_s, h * d_k)
    w_k: Tensor  # (D_t, h * d_k)
    w_v: Tensor  # (D_t, h * d_k)
    w_o: Tensor  # (h * d_k, D_s)
    heads: int
    head_dim: int

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise InputError("heads and head_dim must be >= 1")
        width = self.heads * self.head_dim
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).shape[1] != width:
                raise DimensionError(f"{name} has {getattr(self, name).shape[1]} columns, expected {width}")
        if self.w_o.shape[0] != width:
            raise DimensionError(f"w_o has {self.w_o.shape[0]} rows, expected {width}")

    @property
    def student_width(self) -> int:
        return self.w_q.shape[0]

    @property
    def teacher_width(self) -> int:
        return self.w_k.shape[0]

    def parameters(self) -> dict:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_mhca(student_width: int, teacher_width: int, heads: int = 8, head_dim: int | None = None,
              seed: int = 0, dtype=np.float64) -> MhcaParams:
    """Uniform(+-1/sqrt(fan_in)) init; ``head_dim`` defaults to ``student_width // heads``."""
    if head_dim is None:
        if student_width % heads:
            raise InputError(f"student width {student_width} is not divisible by {heads} heads")
        head_dim = student_width // heads
    rng = np.random.default_rng(seed)
    width = heads * head_dim
    return MhcaParams(
        w_q=_uniform(rng, student_width, (student_width, width), dtype),
        w_k=_uniform(rng, teacher_width, (teacher_width, width), dtype),
        w_v=_uniform(rng, teacher_width, (teacher_width, width), dtype),
        w_o=_uniform(rng, width, (width, student_width), dtype),
        heads=heads,
        head_dim=head_dim,
    )


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    B, L, _ = x.shape
    return x.reshape(B, L, heads, head_dim).transpose(0, 2, 1, 3)


def mhca_forward(student, teacher, params: MhcaParams, *, detach_query: bool = False,
                 return_weights: bool = False):
    """Aligned teacher representation ``Concat(head_1..head_h) W_o``.

    ``student`` is ``(B, L_s, D_s)``, ``teacher`` is ``(B, L_t, D_t)``; the
    result has the student's shape. With ``detach_query`` the queries are built
    from a gradient-stopped copy of the student states.
    """
    s, t = T.as_tensor(student), T.as_tensor(teacher)
    if s.ndim != 3 or t.ndim != 3:
        raise DimensionError(f"expected (B, L, D) inputs, got {s.shape} and {t.shape}")
    if s.shape[0] != t.shape[0]:
        raise DimensionError(f"batch mismatch: student {s.shape} vs teacher {t.shape}")
    if s.shape[2] != params.student_width or t.shape[2] != params.teacher_width:
        raise DimensionError(
            f"widths {s.shape[2]}/{t.shape[2]} do not match params "
            f"{params.student_width}/{params.teacher_width}")
    query_src = s.detach() if detach_query else s
    out, weights = attention(query_src, t, params.w_q, params.w_k, params.w_v, params.w_o,
                             params.heads)
    return (out, weights) if return_weights else out


def attention(queries: Tensor, context: Tensor, w_q, w_k, w_v, w_o, heads: int):
    """Scaled dot-product multi-head attention of ``queries`` over ``context``.

    Returns the projected output ``(B, L_q, D_out)`` and the attention weights
    ``(B, heads, L_q, L_ctx)``.
    """
    B, Lq, _ = queries.shape
    dk = w_q.shape[1] // heads
    q = _split_heads(queries @ w_q, heads, dk)
    k = _split_heads(context @ w_k, heads, dk)
    v = _split_heads(context @ w_v, heads, dk)
    weights = T.softmax((q @ k.T) * (1.0 / math.sqrt(dk)), axis=-1)
    merged = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Lq, heads * dk)
    return merged @ w_o, weights


def mhca_loss(student, aligned_teacher) -> Tensor:
    """Squared error summed over width, averaged over the ``B * L_s`` positions."""
    s, a = T.as_tensor(student), T.as_tensor(aligned_teacher)
    if s.shape != a.shape or s.ndim != 3:
        raise DimensionError(f"shape mismatch: student {s.shape} vs aligned teacher {a.shape}")
    diff = s - a
    return (diff * diff).sum() * (1.0 / (s.shape[0] * s.shape[1]))


@dataclass(frozen=True)
class EotCheckReport:
    max_weight_deviation: float
    max_projection_deviation: float
    epsilon_used: float


def eot_equivalence_check(Q, K, V) -> EotCheckReport:
    """Compare scaled-dot-product attention with the entropic conditional plan.

    The plan is built from the cost ``C = -Q K^T`` and regulariser
    ``eps = sqrt(d_k)`` as ``exp(-C/eps)`` normalised over teacher positions;
    its barycentric projection of ``V`` is compared against the attention
    output ``softmax(Q K^T / sqrt(d_k)) V``.
    """
    Q, K, V = (np.asarray(T.as_tensor(x).data, dtype=np.float64) for x in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise DimensionError("Q, K, V must be matrices")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise DimensionError(f"incompatible shapes Q{Q.shape} K{K.shape} V{V.shape}")
    d_k = Q.shape[1]

    weights = T.softmax_rows(T.Tensor(Q @ K.T * (1.0 / math.sqrt(d_k)))).data
    attended = weights @ V

    eps = math.sqrt(d_k)
    cost = -(Q @ K.T)
    # Gibbs kernel, shifted by the row-wise minimum cost so exp never overflows
    gibbs = np.exp(-(cost - cost.min(axis=1, keepdims=True)) / eps)
    plan = gibbs / gibbs.sum(axis=1, keepdims=True)
    projection = np.einsum("mn,nd->md", plan, V)

    return EotCheckReport(
        max_weight_deviation=float(np.abs(weights - plan).max()),
        max_projection_deviation=float(np.abs(attended - projection).max()),
        epsilon_used=eps,
    )
