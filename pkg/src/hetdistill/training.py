"""Two-phase pipeline: teacher training, student SFT, then distillation.

Every phase is a pure function of its inputs and seed. The teacher is never
handed to an optimizer, and its forward passes run without a tape.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from hetdistill import checkpoint as ckpt_io
from hetdistill import tensor as T
from hetdistill.checkpoint import Checkpoint
from hetdistill.ecg import EcgData
from hetdistill.errors import ContractError, TrainingError
from hetdistill.metrics import MetricsReport, multilabel_report
from hetdistill.mhca import MhcaParams, init_mhca, mhca_forward, mhca_loss
from hetdistill.models import (EncoderConfig, ToyEncoder, bce_with_logits, sigmoid,
                               student_config, teacher_config, uniform_init)
from hetdistill.objective import DistillConfig, LossBreakdown, combine, total_loss
from hetdistill.optim import AdamW, TrainConfig
from hetdistill.ot import ot_loss
from hetdistill.relation import relation_loss

log = logging.getLogger(__name__)

_DTYPES = {"float64": np.float64, "float32": np.float32}


def _as_data(data) -> EcgData:
    return data if isinstance(data, EcgData) else EcgData(data)


def batch_schedule(n: int, batch_size: int, steps: int, seed: int):
    """Index batches drawn from consecutive seeded permutations of ``range(n)``."""
    rng = np.random.default_rng([seed, 17])
    size = min(batch_size, n)
    order = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if order.size < size:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:size]
        order = order[size:]


def _encoder_from(ckpt: Checkpoint, dtype=None) -> ToyEncoder:
    cfg = EncoderConfig.from_dict(ckpt.config["encoder"])
    dtype = dtype or next(iter(ckpt.params.values())).dtype
    model = ToyEncoder(cfg, seed=0, dtype=dtype)
    model.load_state({k: v for k, v in ckpt.params.items() if k in model.params})
    return model


def _make_checkpoint(model: ToyEncoder, role: str, step: int, extra_params=None,
                     extra_config=None) -> Checkpoint:
    params = {k: v.data.copy() for k, v in model.params.items()}
    for k, v in (extra_params or {}).items():
        params[k] = v.data.copy()
    config = {"role": role, "encoder": model.cfg.to_dict()}
    config.update(extra_config or {})
    return Checkpoint(params=params, config=config, step=step)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_scores(model: ToyEncoder, data, batch_size: int = 64, threads: int = 1) -> np.ndarray:
    data = _as_data(data)
    tokens = data.tokens(model.cfg.tokenizer).astype(model.params["pos"].dtype, copy=False)
    bounds = [(i, min(i + batch_size, len(data))) for i in range(0, len(data), batch_size)]

    def run(lo_hi):
        lo, hi = lo_hi
        with T.no_grad():
            return model(tokens[lo:hi]).logits.data

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            logits = list(pool.map(run, bounds))
    else:
        logits = [run(b) for b in bounds]
    return sigmoid(np.concatenate(logits).astype(np.float64))


def evaluate(ckpt: Checkpoint, eval_data, threads: int = 1, seed=None) -> MetricsReport:
    """Macro AUC / macro F1 / Hamming loss of a checkpoint on ``eval_data``."""
    data = _as_data(eval_data)
    model = _encoder_from(ckpt)
    return multilabel_report(data.labels, predict_scores(model, data, threads=threads), seed=seed)


# ---------------------------------------------------------------------------
# distillation step
# ---------------------------------------------------------------------------


class DistillModules:
    """Trainable alignment parameters: MHCA projections and the teacher-to-student OT map."""

    def __init__(self, student_width: int, teacher_width: int, heads: int, seed: int, dtype):
        self.mhca: MhcaParams = init_mhca(student_width, teacher_width, heads=heads,
                                          seed=seed, dtype=dtype)
        rng = np.random.default_rng([seed, 23])
        self.ot_proj = T.Tensor(uniform_init(rng, teacher_width, (teacher_width, student_width), dtype),
                                requires_grad=True)

    def params(self) -> dict:
        out = {f"mhca.{k}": v for k, v in self.mhca.parameters().items()}
        out["ot_proj.w"] = self.ot_proj
        return out


def distill_losses(student: ToyEncoder, tokens_s, labels, cfg: DistillConfig,
                   teacher: ToyEncoder | None = None, tokens_t=None,
                   modules: DistillModules | None = None):
    """Build the total objective for one batch.

    Returns ``(total_tensor, breakdown)``. Terms whose weight in the total is
    zero are skipped and reported as 0.
    """
    out_s = student(tokens_s)
    ce = bce_with_logits(out_s.logits, labels)
    ot = mhca = rel = dist = angle = 0.0
    need_ot = cfg.ot_weight > 0
    need_align = cfg.mhca_weight > 0 or cfg.rel_weight > 0
    if need_ot or need_align:
        if teacher is None or modules is None:
            raise ContractError("distillation terms need a teacher and alignment modules")
        with T.no_grad():
            out_t = teacher(tokens_t)
        if need_ot:
            t_tok = T.l2_normalize(out_t.visual @ modules.ot_proj)
            s_tok = T.l2_normalize(out_s.visual)
            ot = ot_loss(t_tok, s_tok, epsilon=cfg.sinkhorn_epsilon,
                         max_iter=cfg.sinkhorn_max_iter, tol=cfg.sinkhorn_tol)
        if need_align:
            aligned = mhca_forward(out_s.hidden, out_t.hidden, modules.mhca,
                                   detach_query=cfg.detach_query_target)
            mhca = mhca_loss(out_s.hidden, aligned)
            if cfg.rel_weight > 0:
                dist, angle, rel = relation_loss(aligned, out_s.hidden,
                                                 detach_teacher=cfg.detach_relation_teacher)
    total = combine(cfg, ce, mhca, rel, ot)
    breakdown = total_loss(ce, mhca, rel, ot, cfg, dist=dist, angle=angle)
    return total, breakdown


def _fit(student: ToyEncoder, data: EcgData, cfg: DistillConfig, train: TrainConfig, seed: int,
         teacher=None, modules=None):
    params = dict(student.params)
    if modules is not None:
        params.update(modules.params())
    names = list(params)
    opt = AdamW(params, train, train.steps)
    dtype = student.params["pos"].dtype
    tok_s = data.tokens(student.cfg.tokenizer).astype(dtype, copy=False)
    tok_t = data.tokens(teacher.cfg.tokenizer).astype(dtype, copy=False) if teacher else None
    history = []
    for step, idx in enumerate(batch_schedule(len(data), train.batch_size, train.steps, seed)):
        total, breakdown = distill_losses(student, tok_s[idx], data.labels[idx], cfg,
                                          teacher, None if tok_t is None else tok_t[idx], modules)
        if not math.isfinite(breakdown.total):
            raise TrainingError(f"non-finite loss {breakdown.total}", step=step)
        grads = T.gradients(total, [params[n] for n in names])
        opt.step(dict(zip(names, grads)))
        history.append(breakdown)
        if step % 50 == 0:
            log.debug("step %d total %.5f ce %.5f", step, breakdown.total, breakdown.ce)
    return history


# ---------------------------------------------------------------------------
# the three phases
# ---------------------------------------------------------------------------


def _supervised(data, enc_cfg: EncoderConfig, role: str, steps: int, seed: int,
                train: TrainConfig | None, eval_data, init: Checkpoint | None, dtype: str):
    data = _as_data(data)
    train = TrainConfig(**{**(train.__dict__ if train else {}), "steps": steps})
    model = ToyEncoder(enc_cfg, seed=seed, dtype=_DTYPES[dtype])
    if init is not None:
        model.load_state(init.params)
    history = _fit(model, data, DistillConfig(alpha=0.0), train, seed)
    ckpt = _make_checkpoint(model, role, step=steps + (init.step if init else 0))
    if eval_data is not None:
        ckpt.metrics = evaluate(ckpt, eval_data, seed=seed).to_dict()
    return ckpt, history


def train_teacher(data, teacher_cfg: EncoderConfig | None = None, steps: int = 2000, seed: int = 0,
                  train: TrainConfig | None = None, eval_data=None, dtype: str = "float64",
                  return_log: bool = False):
    """Train the teacher with the task loss alone; the result is treated as frozen."""
    ckpt, history = _supervised(data, teacher_cfg or teacher_config(), "teacher", steps, seed,
                                train, eval_data, None, dtype)
    return (ckpt, history) if return_log else ckpt


def sft_student(data, student_cfg: EncoderConfig | None = None, steps: int = 400, seed: int = 0,
                train: TrainConfig | None = None, eval_data=None, init: Checkpoint | None = None,
                dtype: str = "float64", return_log: bool = False):
    """Supervised fine-tuning of the student (alpha fixed at 0).

    ``init`` continues from an existing student checkpoint instead of a fresh
    initialisation.
    """
    ckpt, history = _supervised(data, student_cfg or student_config(), "student", steps, seed,
                                train, eval_data, init, dtype)
    return (ckpt, history) if return_log else ckpt


def distill_student(sft_ckpt: Checkpoint, teacher_ckpt: Checkpoint, data, cfg: DistillConfig,
                    steps: int, seed: int = 0, train: TrainConfig | None = None, eval_data=None):
    """Continue the SFT student under the combined objective.

    The optimizer state starts fresh. Returns the distilled checkpoint and the
    per-step :class:`LossBreakdown` log.
    """
    data = _as_data(data)
    if teacher_ckpt.config.get("role") != "teacher":
        raise ContractError("teacher_ckpt is not a teacher checkpoint")
    student = _encoder_from(sft_ckpt)
    teacher = _encoder_from(teacher_ckpt, dtype=student.params["pos"].dtype)
    if not (teacher.cfg.width > student.cfg.width and teacher.cfg.token_count > student.cfg.token_count):
        raise ContractError("teacher width and token count must exceed the student's")
    if student.cfg.width % cfg.heads:
        raise ContractError(f"student width {student.cfg.width} not divisible by {cfg.heads} heads")
    modules = DistillModules(student.cfg.width, teacher.cfg.width, cfg.heads, seed,
                             student.params["pos"].dtype)
    train = TrainConfig(**{**(train.__dict__ if train else {}), "steps": steps})
    history = _fit(student, data, cfg, train, seed, teacher=teacher, modules=modules)
    ckpt = _make_checkpoint(student, "student", step=sft_ckpt.step + steps,
                            extra_params=modules.params(),
                            extra_config={"distill": cfg.to_dict(),
                                          "teacher_hash": teacher_ckpt.config_hash})
    if eval_data is not None:
        ckpt.metrics = evaluate(ckpt, eval_data, seed=seed).to_dict()
    return ckpt, history


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    return ckpt_io.to_bytes(ckpt)
