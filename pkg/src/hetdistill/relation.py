"""Distance- and angle-wise relation potentials and their matching loss."""

from __future__ import annotations

from hetdistill import tensor as T
from hetdistill.errors import DimensionError, InputError
from hetdistill.tensor import Tensor

MEAN_FLOOR = 1e-12
NORM_FLOOR = 1e-12


def _check(H: Tensor) -> Tensor:
    if H.ndim not in (2, 3):
        raise DimensionError(f"expected (L, D) or (B, L, D) states, got shape {H.shape}")
    if H.shape[-2] < 2:
        raise InputError(f"relation potentials need at least 2 positions, got {H.shape[-2]}")
    return H


def pairwise_distances(H) -> Tensor:
    H = T.as_tensor(H)
    diff = T.expand_dims(H, -2) - T.expand_dims(H, -3)
    return T.sqrt((diff * diff).sum(axis=-1))


def distance_potential(H) -> Tensor:
    """``|h_i - h_j| / mu`` with ``mu`` the mean distance over pairs ``i != j``.

    Normalisation is per batch element. When ``mu < 1e-12`` (all rows
    coincide) the potential is identically zero.
    """
    H = _check(T.as_tensor(H))
    L = H.shape[-2]
    dist = pairwise_distances(H)
    mu = dist.sum(axis=(-2, -1), keepdims=True) * (1.0 / (L * (L - 1)))
    live = (mu.data >= MEAN_FLOOR).astype(H.dtype)
    return dist * (T.Tensor(live) / T.clamp_min(mu, MEAN_FLOOR))


def angle_potential(H) -> Tensor:
    """Pairwise cosine similarity with the norm product floored at 1e-12."""
    H = _check(T.as_tensor(H))
    gram = H @ H.T
    norms = T.sqrt((H * H).sum(axis=-1))
    denom = T.clamp_min(T.expand_dims(norms, -1) * T.expand_dims(norms, -2), NORM_FLOOR)
    return gram / denom


def _potential_gap(teacher: Tensor, student: Tensor, potential) -> Tensor:
    B, L = student.shape[0], student.shape[1]
    diff = potential(teacher) - potential(student)
    return (diff * diff).sum() * (1.0 / (B * L * L))


def relation_loss(aligned_teacher, student, *, detach_teacher: bool = True):
    """Return ``(L_D, L_A, L_rel)`` between ``(B, L_s, D_s)`` state blocks.

    Each term averages the squared potential differences over ``B * L_s**2``
    entries; ``L_rel`` is their mean. The teacher side is a fixed target unless
    ``detach_teacher`` is False.
    """
    t, s = T.as_tensor(aligned_teacher), T.as_tensor(student)
    if t.shape != s.shape or s.ndim != 3:
        raise DimensionError(f"shape mismatch: teacher {t.shape} vs student {s.shape}")
    _check(s)
    if detach_teacher:
        t = t.detach()
    loss_d = _potential_gap(t, s, distance_potential)
    loss_a = _potential_gap(t, s, angle_potential)
    return loss_d, loss_a, (loss_d + loss_a) * 0.5
