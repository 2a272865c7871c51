"""Experiment configuration files and the ablation runner.

A config file is one JSON object with optional sections ``distill``, ``data``,
``teacher``, ``student``, ``train`` and ``schedule``. Missing sections and keys
take their defaults; unknown ones are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from hetdistill.checkpoint import Checkpoint
from hetdistill.ecg import DataConfig, EcgData, config_hash, make_dataset, make_teacher_pool
from hetdistill.errors import InputError
from hetdistill.models import EncoderConfig, student_config, teacher_config
from hetdistill.objective import ABLATION_NAMES, DistillConfig, ablation_masks
from hetdistill.optim import TrainConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    teacher_steps: int = 2000
    sft_steps: int = 200
    distill_steps: int = 400
    ablation_seeds: tuple = (0, 1, 2)
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("teacher_steps", "sft_steps", "distill_steps"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative")
        if self.dtype not in ("float64", "float32"):
            raise InputError(f"dtype must be float64 or float32, got {self.dtype!r}")
        object.__setattr__(self, "ablation_seeds", tuple(int(s) for s in self.ablation_seeds))


@dataclass(frozen=True)
class ExperimentConfig:
    distill: DistillConfig = field(default_factory=DistillConfig)
    data: DataConfig = field(default_factory=DataConfig)
    teacher: EncoderConfig = field(default_factory=teacher_config)
    student: EncoderConfig = field(default_factory=student_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: Schedule = field(default_factory=Schedule)

    def to_dict(self) -> dict:
        return json.loads(json.dumps({
            "distill": self.distill.to_dict(),
            "data": self.data.to_dict(),
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "train": dataclasses.asdict(self.train),
            "schedule": dataclasses.asdict(self.schedule),
        }))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise InputError("experiment config must be a JSON object")
        unknown = sorted(set(data) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise InputError(f"unknown config sections: {', '.join(unknown)}")
        base = cls()
        parts = {}
        if "distill" in data:
            parts["distill"] = DistillConfig.from_dict({**base.distill.to_dict(), **data["distill"]})
        if "data" in data:
            parts["data"] = DataConfig.from_dict({**base.data.to_dict(), **data["data"]})
        for role in ("teacher", "student"):
            if role in data:
                merged = {**getattr(base, role).to_dict(), **data[role]}
                if isinstance(data[role].get("tokenizer"), dict):
                    merged["tokenizer"] = {**getattr(base, role).tokenizer.__dict__,
                                           **data[role]["tokenizer"]}
                parts[role] = EncoderConfig.from_dict(merged)
        for name, kind in (("train", TrainConfig), ("schedule", Schedule)):
            if name in data:
                known = {f.name for f in dataclasses.fields(kind)}
                bad = sorted(set(data[name]) - known)
                if bad:
                    raise InputError(f"unknown {name} keys: {', '.join(bad)}")
                parts[name] = kind(**{**dataclasses.asdict(getattr(base, name)), **data[name]})
        return dataclasses.replace(base, **parts)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def load_experiment(path) -> ExperimentConfig:
    with open(os.fspath(path)) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw)


def save_experiment(cfg: ExperimentConfig, path) -> str:
    path = os.fspath(path)
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def build_data(cfg: ExperimentConfig, seed: int, threads: int = 1):
    train, held = make_dataset(cfg.data.n_records, cfg.data.split_ratio, seed=seed,
                               config=cfg.data, threads=threads)
    return EcgData(train), EcgData(held)


def build_teacher_data(cfg: ExperimentConfig, seed: int, train_data: EcgData,
                       threads: int = 1) -> EcgData:
    """The teacher's training set: the reserved pool, or ``train_data`` when none is configured."""
    if cfg.data.teacher_records == 0:
        return train_data
    return EcgData(make_teacher_pool(cfg.data.teacher_records, seed, cfg.data, threads))


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationResult:
    names: tuple
    seeds: tuple
    auc: np.ndarray  # (configs, seeds) eval macro AUC
    f1: np.ndarray
    hamming: np.ndarray
    teacher_metrics: dict
    sft_metrics: dict

    @property
    def mean_auc(self) -> np.ndarray:
        return self.auc.mean(axis=1)

    def summary_rows(self) -> list:
        rows = []
        for i, name in enumerate(self.names):
            rows.append({
                "config": name,
                "runs": len(self.seeds),
                "macro_auc_mean": float(self.auc[i].mean()),
                "macro_auc_std": float(self.auc[i].std()),
                "macro_f1_mean": float(self.f1[i].mean()),
                "macro_f1_std": float(self.f1[i].std()),
                "hamming_mean": float(self.hamming[i].mean()),
                "hamming_std": float(self.hamming[i].std()),
            })
        return rows


def run_ablation(cfg: ExperimentConfig, seed: int = 0, teacher: Checkpoint | None = None,
                 sft: Checkpoint | None = None, data=None, threads: int = 1,
                 on_run=None) -> AblationResult:
    """Distil the shared SFT student under each ablation mask and each seed.

    ``seed`` fixes the dataset, teacher and SFT student; the per-run seeds in
    ``cfg.schedule.ablation_seeds`` drive batch order and alignment-module
    initialisation. ``on_run(name, run_seed, ckpt, history)`` is called after
    every run.
    """
    from hetdistill.training import distill_student, sft_student, train_teacher

    sched = cfg.schedule
    train_data, eval_data = data if data is not None else build_data(cfg, seed, threads)
    if teacher is None:
        pool = build_teacher_data(cfg, seed, train_data, threads)
        teacher = train_teacher(pool, cfg.teacher, sched.teacher_steps, seed=seed,
                                train=cfg.train, eval_data=eval_data, dtype=sched.dtype)
    if sft is None:
        sft = sft_student(train_data, cfg.student, sched.sft_steps, seed=seed, train=cfg.train,
                          eval_data=eval_data, dtype=sched.dtype)
    masks = ablation_masks(cfg.distill)
    shape = (len(masks), len(sched.ablation_seeds))
    auc, f1, ham = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    for i, mask in enumerate(masks):
        for j, run_seed in enumerate(sched.ablation_seeds):
            ckpt, history = distill_student(sft, teacher, train_data, mask, sched.distill_steps,
                                            seed=run_seed, train=cfg.train, eval_data=eval_data)
            auc[i, j] = ckpt.metrics["macro_auc"]
            f1[i, j] = ckpt.metrics["macro_f1"]
            ham[i, j] = ckpt.metrics["hamming_loss"]
            log.info("%s seed %d: macro AUC %.4f", ABLATION_NAMES[i], run_seed, auc[i, j])
            if on_run is not None:
                on_run(ABLATION_NAMES[i], run_seed, ckpt, history)
    return AblationResult(ABLATION_NAMES, sched.ablation_seeds, auc, f1, ham,
                          dict(teacher.metrics), dict(sft.metrics))
