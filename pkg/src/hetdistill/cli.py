"""Command-line entry point: ``hetdistill <subcommand> [options]``.

Every subcommand accepts ``--config``, ``--seed``, ``--out`` and ``--threads``.
Metrics go to stdout as one JSON object; per-step logs and exports go to the
output directory. Exit status is 0 on success, 1 on a contract error (bad
flag, bad config, failed check) and 2 on an I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from hetdistill import checkpoint as ckpt_io
from hetdistill.errors import ContractError, InputError

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2
LOG_COLUMNS = ("step", "ce", "ot", "mhca", "dist", "angle", "rel", "total")
CONFIG_DIR = os.path.join(os.path.dirname(__file__), "configs")

log = logging.getLogger("hetdistill")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; here those are contract errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


def resolve_config_path(name: str) -> str:
    """A path as given, else a bundled config of that name (``default.json``)."""
    if os.path.exists(name):
        return name
    bundled = os.path.join(CONFIG_DIR, os.path.basename(name))
    if os.path.exists(bundled):
        return bundled
    raise FileNotFoundError(f"config file not found: {name}")


def _experiment(args):
    from hetdistill.experiment import ExperimentConfig, load_experiment

    if args.config is None:
        return ExperimentConfig()
    return load_experiment(resolve_config_path(args.config))


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _data(args, cfg):
    """Train and eval splits from ``--data`` if given, else generated from the config."""
    from hetdistill.ecg import EcgData, import_dataset
    from hetdistill.experiment import build_data

    if args.data:
        return (EcgData(import_dataset(args.data, "train", expected=cfg.data)),
                EcgData(import_dataset(args.data, "eval", expected=cfg.data)))
    return build_data(cfg, args.seed, args.threads)


def _teacher_data(args, cfg, train):
    """The teacher pool from ``--data`` when exported there, else generated or ``train``."""
    from hetdistill.ecg import EcgData, import_dataset
    from hetdistill.experiment import build_teacher_data

    if args.data and cfg.data.teacher_records:
        return EcgData(import_dataset(args.data, "teacher", expected=cfg.data))
    return build_teacher_data(cfg, args.seed, train, args.threads)


def write_log(history, path) -> str:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for step, row in enumerate(history):
            writer.writerow([step] + [repr(float(v)) for v in
                                      (row.ce, row.ot, row.mhca, row.dist, row.angle, row.rel, row.total)])
    return path


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def _metrics(ckpt) -> dict:
    return {k: v for k, v in ckpt.metrics.items()}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> dict:
    from hetdistill.ecg import config_hash, export_dataset, make_dataset, make_teacher_pool

    cfg = _experiment(args)
    out = _out_dir(args)
    train, held = make_dataset(cfg.data.n_records, cfg.data.split_ratio, seed=args.seed,
                               config=cfg.data, threads=args.threads)
    export_dataset(train, out, cfg.data, split="train")
    manifest = export_dataset(held, out, cfg.data, split="eval")
    pool = []
    if cfg.data.teacher_records:
        pool = make_teacher_pool(cfg.data.teacher_records, args.seed, cfg.data, args.threads)
        export_dataset(pool, out, cfg.data, split="teacher")
    positives = np.stack([r.labels for r in train + held]).sum(axis=0)
    return {"train": len(train), "eval": len(held), "teacher": len(pool), "manifest": manifest,
            "config_hash": config_hash(cfg.data), "positives_per_class": positives.tolist()}


def _supervised_phase(args, role: str) -> dict:
    from hetdistill.training import sft_student, train_teacher

    cfg = _experiment(args)
    out = _out_dir(args)
    train, held = _data(args, cfg)
    sched = cfg.schedule
    if role == "teacher":
        pool = _teacher_data(args, cfg, train)
        ckpt, history = train_teacher(pool, cfg.teacher, sched.teacher_steps, seed=args.seed,
                                      train=cfg.train, eval_data=held, dtype=sched.dtype,
                                      return_log=True)
    else:
        init = ckpt_io.load(args.init) if args.init else None
        ckpt, history = sft_student(train, cfg.student, sched.sft_steps, seed=args.seed,
                                    train=cfg.train, eval_data=held, init=init,
                                    dtype=sched.dtype, return_log=True)
    name = "teacher" if role == "teacher" else "student_sft"
    path = ckpt_io.save(ckpt, os.path.join(out, f"{name}.ckpt"))
    write_log(history, os.path.join(out, f"{name}_log.csv"))
    return {"checkpoint": path, "step": ckpt.step, "metrics": _metrics(ckpt)}


def cmd_train_teacher(args) -> dict:
    return _supervised_phase(args, "teacher")


def cmd_sft(args) -> dict:
    return _supervised_phase(args, "student")


def _teacher_and_sft(args, cfg, train, held):
    """Load ``--teacher`` / ``--student`` checkpoints, training whichever is missing."""
    from hetdistill.training import sft_student, train_teacher

    sched = cfg.schedule
    if args.teacher:
        teacher = ckpt_io.load(args.teacher)
    else:
        teacher = train_teacher(_teacher_data(args, cfg, train), cfg.teacher, sched.teacher_steps,
                                seed=args.seed, train=cfg.train, eval_data=held,
                                dtype=sched.dtype)
    if args.student:
        sft = ckpt_io.load(args.student)
    else:
        sft = sft_student(train, cfg.student, sched.sft_steps, seed=args.seed, train=cfg.train,
                          eval_data=held, dtype=sched.dtype)
    return teacher, sft


def cmd_distill(args) -> dict:
    from hetdistill.training import distill_student

    cfg = _experiment(args)
    out = _out_dir(args)
    train, held = _data(args, cfg)
    teacher, sft = _teacher_and_sft(args, cfg, train, held)
    before = ckpt_io.to_bytes(teacher)
    ckpt, history = distill_student(sft, teacher, train, cfg.distill, cfg.schedule.distill_steps,
                                    seed=args.seed, train=cfg.train, eval_data=held)
    if ckpt_io.to_bytes(teacher) != before:
        raise ContractError("teacher checkpoint changed during distillation")
    path = ckpt_io.save(ckpt, os.path.join(out, "student_distilled.ckpt"))
    if not args.teacher:
        ckpt_io.save(teacher, os.path.join(out, "teacher.ckpt"))
    if not args.student:
        ckpt_io.save(sft, os.path.join(out, "student_sft.ckpt"))
    write_log(history, os.path.join(out, "distill_log.csv"))
    return {"checkpoint": path, "step": ckpt.step, "metrics": _metrics(ckpt),
            "teacher_metrics": _metrics(teacher), "sft_metrics": _metrics(sft),
            "final_losses": dict(zip(LOG_COLUMNS[1:], history[-1].as_row())) if history else {}}


def cmd_eval(args) -> dict:
    from hetdistill.training import evaluate

    if not args.ckpt:
        raise InputError("eval needs --ckpt")
    cfg = _experiment(args)
    ckpt = ckpt_io.load(args.ckpt)
    _, held = _data(args, cfg)
    report = evaluate(ckpt, held, threads=args.threads, seed=args.seed)
    return {"checkpoint": args.ckpt, "role": ckpt.config.get("role"), "metrics": report.to_dict()}


def cmd_ablate(args) -> dict:
    from hetdistill.experiment import run_ablation

    cfg = _experiment(args)
    out = _out_dir(args)
    train, held = _data(args, cfg)
    teacher, sft = _teacher_and_sft(args, cfg, train, held)
    runs = []

    def on_run(name, run_seed, ckpt, history):
        write_log(history, os.path.join(out, f"ablate_{name.replace('+', 'plus_')}_seed{run_seed}.csv"))
        runs.append({"config": name, "seed": run_seed, **{k: ckpt.metrics[k] for k in
                     ("macro_auc", "macro_f1", "hamming_loss")}})

    start = time.perf_counter()
    result = run_ablation(cfg, seed=args.seed, teacher=teacher, sft=sft, data=(train, held),
                          threads=args.threads, on_run=on_run)
    if not args.teacher:
        ckpt_io.save(teacher, os.path.join(out, "teacher.ckpt"))
    if not args.student:
        ckpt_io.save(sft, os.path.join(out, "student_sft.ckpt"))
    rows = result.summary_rows()
    with open(os.path.join(out, "ablation_summary.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    with open(os.path.join(out, "ablation_runs.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(runs[0]))
        writer.writeheader()
        writer.writerows(runs)
    means = result.mean_auc
    return {"summary": rows, "teacher_metrics": result.teacher_metrics,
            "sft_metrics": result.sft_metrics,
            "monotone": bool(np.all(np.diff(means) >= 0)),
            "full_minus_baseline": float(means[-1] - means[0]),
            "seconds": round(time.perf_counter() - start, 1)}


def cmd_verify(args) -> dict:
    from hetdistill.verify import run_all

    results = run_all(args.check or None)
    checks = [{"name": r.name, "passed": r.passed, "detail": r.detail,
               "seconds": round(r.seconds, 3)} for r in results]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}", file=sys.stderr)
    passed = sum(r.passed for r in results)
    return {"passed": passed, "total": len(results), "checks": checks}


def cmd_export_plan(args) -> dict:
    from hetdistill import tensor as T
    from hetdistill.ot import export_plan, ot_loss
    from hetdistill.training import _encoder_from

    if not (args.ckpt and args.teacher):
        raise InputError("export-plan needs --ckpt (a distilled student) and --teacher")
    cfg = _experiment(args)
    out = _out_dir(args)
    student_ckpt, teacher_ckpt = ckpt_io.load(args.ckpt), ckpt_io.load(args.teacher)
    if "ot_proj.w" not in student_ckpt.params:
        raise ContractError("student checkpoint has no OT projection; pass a distilled checkpoint")
    _, held = _data(args, cfg)
    if not 0 <= args.index < len(held):
        raise InputError(f"--index {args.index} outside the eval split of {len(held)} records")
    student, teacher = _encoder_from(student_ckpt), _encoder_from(teacher_ckpt)
    sl = slice(args.index, args.index + 1)
    with T.no_grad():
        v_s = student.embed(held.tokens(student.cfg.tokenizer)[sl])
        v_t = teacher.embed(held.tokens(teacher.cfg.tokenizer)[sl])
        loss, plan = ot_loss(T.l2_normalize(v_t @ T.Tensor(student_ckpt.params["ot_proj.w"])),
                             T.l2_normalize(v_s), epsilon=cfg.distill.sinkhorn_epsilon,
                             max_iter=cfg.distill.sinkhorn_max_iter, tol=cfg.distill.sinkhorn_tol,
                             return_plan=True)
    path = export_plan(plan.values.data[0], os.path.join(out, f"transport_plan_{args.index}.csv"))
    return {"plan": path, "shape": list(plan.values.shape[1:]), "ot_loss": float(loss.data),
            "iterations": plan.iterations_used, "marginal_violation": plan.marginal_violation}


def cmd_svd_spectrum(args) -> dict:
    from hetdistill.analysis import svd_spectrum

    if not args.ckpt:
        raise InputError("svd-spectrum needs --ckpt")
    cfg = _experiment(args)
    out = _out_dir(args)
    _, held = _data(args, cfg)
    ckpt = ckpt_io.load(args.ckpt)
    teacher = ckpt_io.load(args.teacher) if args.teacher else None
    path = os.path.join(out, "svd_spectrum.csv")
    spectra = svd_spectrum(ckpt, held, path, teacher=teacher)
    summary = {}
    for name, s in spectra.items():
        energy = np.cumsum(s ** 2) / np.sum(s ** 2)
        summary[name] = {"rank": int(s.size), "top": float(s[0]),
                         "dims_for_90pct_energy": int(np.searchsorted(energy, 0.9) + 1)}
    return {"spectrum": path, "models": summary}


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate and export the synthetic ECG dataset"),
    "train-teacher": (cmd_train_teacher, "train the teacher with the task loss"),
    "sft": (cmd_sft, "supervised fine-tuning of the student"),
    "distill": (cmd_distill, "distil the SFT student from the frozen teacher"),
    "eval": (cmd_eval, "evaluate a checkpoint on the eval split"),
    "ablate": (cmd_ablate, "run the four-config loss ablation"),
    "verify": (cmd_verify, "run the numerical self-check suite"),
    "export-plan": (cmd_export_plan, "write one Sinkhorn transport plan as CSV"),
    "svd-spectrum": (cmd_svd_spectrum, "write hidden-state singular values as CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment JSON (a path, or a bundled name like default.json)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--data", help="dataset directory written by gen-data")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="hetdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name == "sft":
            p.add_argument("--init", help="student checkpoint to continue from")
        if name in ("distill", "ablate"):
            p.add_argument("--teacher", help="teacher checkpoint (trained if omitted)")
            p.add_argument("--student", help="SFT student checkpoint (trained if omitted)")
        if name in ("eval", "export-plan", "svd-spectrum"):
            p.add_argument("--ckpt", help="checkpoint to inspect")
        if name in ("export-plan", "svd-spectrum"):
            p.add_argument("--teacher", help="teacher checkpoint")
        if name == "export-plan":
            p.add_argument("--index", type=int, default=0, help="eval record to match")
        if name == "verify":
            p.add_argument("--check", action="append", help="run only this check (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    if args.command == "verify" and args.check:
        from hetdistill.verify import CHECKS

        unknown = [c for c in args.check if c not in CHECKS]
        if unknown:
            parser.error(f"unknown check(s): {', '.join(unknown)}; choose from {', '.join(CHECKS)}")
    handler = COMMANDS[args.command][0]
    try:
        payload = handler(args)
    except ContractError as exc:
        print(f"hetdistill: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"hetdistill: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    _emit({"command": args.command, "seed": args.seed, **payload})
    if args.command == "verify" and payload["passed"] != payload["total"]:
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
