"""The combined distillation objective and its hyperparameters."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

from hetdistill.errors import ContractError, InputError
from hetdistill.tensor import Tensor

# Search ranges explored for the reported best values; kept for reference,
# nothing sweeps them by default.
SEARCH_GRID = {
    "alpha": (0.1, 0.3, 0.5, 0.7, 1.0),
    "lambda_m": (0.1, 0.3, 0.5, 0.7, 1.0),
    "lambda_r": (0.01, 0.03, 0.05, 0.07),
    "lambda_ot": (0.1, 0.3, 0.5),
    "heads": (4, 8, 16),
}


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.3
    lambda_m: float = 1.0
    lambda_r: float = 0.03
    lambda_ot: float = 0.1
    sinkhorn_epsilon: float = 0.1
    heads: int = 8
    sinkhorn_max_iter: int = 200
    sinkhorn_tol: float = 1e-6
    detach_query_target: bool = False
    detach_relation_teacher: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("lambda_m", "lambda_r", "lambda_ot"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.sinkhorn_epsilon <= 0:
            raise InputError(f"sinkhorn_epsilon must be positive, got {self.sinkhorn_epsilon}")
        if self.heads < 1:
            raise InputError(f"heads must be >= 1, got {self.heads}")
        if self.sinkhorn_max_iter < 1:
            raise InputError(f"sinkhorn_max_iter must be >= 1, got {self.sinkhorn_max_iter}")
        if self.sinkhorn_tol <= 0:
            raise InputError(f"sinkhorn_tol must be positive, got {self.sinkhorn_tol}")

    # effective weights of each term in the total
    @property
    def ce_weight(self) -> float:
        return 1.0 - self.alpha

    @property
    def mhca_weight(self) -> float:
        return self.alpha * self.lambda_m

    @property
    def rel_weight(self) -> float:
        return self.alpha * self.lambda_r

    @property
    def ot_weight(self) -> float:
        return self.alpha * self.lambda_ot

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DistillConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown DistillConfig keys: {', '.join(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "DistillConfig":
        return dataclasses.replace(self, **changes)


def default_config() -> DistillConfig:
    return DistillConfig()


def load_config(path) -> DistillConfig:
    with open(os.fspath(path)) as fh:
        return DistillConfig.from_dict(json.load(fh))


def save_config(cfg: DistillConfig, path) -> None:
    with open(os.fspath(path), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    ot: float
    mhca: float
    dist: float
    angle: float
    rel: float
    total: float

    def as_row(self) -> list:
        return [self.ce, self.ot, self.mhca, self.dist, self.angle, self.rel, self.total]

    def reconstruct(self, cfg: DistillConfig) -> float:
        return combine(cfg, self.ce, self.mhca, self.rel, self.ot)


def combine(cfg: DistillConfig, ce, mhca, rel, ot):
    """``(1 - a) ce + a (l_m mhca + l_r rel + l_ot ot)`` for floats or tensors."""
    return (1.0 - cfg.alpha) * ce + cfg.alpha * (
        cfg.lambda_m * mhca + cfg.lambda_r * rel + cfg.lambda_ot * ot)


def _scalar(name, value) -> float:
    x = float(value.item() if isinstance(value, Tensor) else value)
    if not math.isfinite(x):
        raise ContractError(f"loss component {name} is not finite ({x})")
    return x


def total_loss(ce, mhca, rel, ot, cfg: DistillConfig | None = None, *,
               dist=0.0, angle=0.0) -> LossBreakdown:
    """Evaluate the combination formula and echo the components."""
    cfg = cfg or default_config()
    parts = {k: _scalar(k, v) for k, v in
             dict(ce=ce, mhca=mhca, rel=rel, ot=ot, dist=dist, angle=angle).items()}
    total = combine(cfg, parts["ce"], parts["mhca"], parts["rel"], parts["ot"])
    return LossBreakdown(total=total, **parts)


def ablation_masks(base: DistillConfig | None = None) -> list:
    """Baseline, +OT, +OT+MHCA and the full objective, in that order.

    Each mask switches terms off in ``base`` (default config if omitted).
    """
    full = base or default_config()
    return [
        full.replace(alpha=0.0),
        full.replace(lambda_m=0.0, lambda_r=0.0),
        full.replace(lambda_r=0.0),
        full,
    ]


ABLATION_NAMES = ("baseline", "+ot", "+ot+mhca", "full")
