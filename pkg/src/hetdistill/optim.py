"""AdamW with linear warmup and cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_ratio: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_at(step: int, total: int, base_lr: float, warmup_ratio: float) -> float:
    """Learning rate for 0-based ``step`` out of ``total``."""
    warmup = max(1, int(math.ceil(warmup_ratio * total)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class AdamW:
    """Decoupled weight decay Adam over a ``{name: Tensor}`` dict.

    Decay skips 1-D parameters (biases, norm gains).
    """

    def __init__(self, params: dict, cfg: TrainConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total = max(1, total_steps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict) -> float:
        cfg = self.cfg
        lr = lr_at(self.t, self.total, cfg.lr, cfg.warmup_ratio)
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            if p.ndim > 1 and cfg.weight_decay:
                update = update + cfg.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)
        return lr
