"""Compute every term of the distillation objective on one pair of records.

Untrained toy encoders stand in for the teacher and student, so the numbers
only show the shapes and plumbing, not a useful alignment. Runs in a few
seconds::

    python3 demos/loss_walkthrough.py
"""

import numpy as np

from hetdistill import tensor as T
from hetdistill.ecg import generate_record, patch_tokens
from hetdistill.mhca import init_mhca, mhca_forward, mhca_loss
from hetdistill.models import ToyEncoder, bce_with_logits, student_config, teacher_config
from hetdistill.objective import default_config, total_loss
from hetdistill.ot import ot_loss
from hetdistill.relation import relation_loss


def main():
    cfg = default_config()
    records = [generate_record(seed, class_mask=mask) for seed, mask in
               [(1, [1, 0, 0, 0, 0]), (2, [0, 1, 1, 0, 0])]]
    signals = np.stack([r.signal for r in records])
    labels = np.stack([r.labels for r in records]).astype(float)

    teacher, student = ToyEncoder(teacher_config(), seed=0), ToyEncoder(student_config(), seed=1)
    tok_t = patch_tokens(signals, teacher.cfg.tokenizer)
    tok_s = patch_tokens(signals, student.cfg.tokenizer)
    print(f"visual tokens: teacher {tok_t.shape[1:]}, student {tok_s.shape[1:]}")

    with T.no_grad():
        out_t = teacher(tok_t)
    out_s = student(tok_s)
    print(f"hidden states: teacher {out_t.hidden.shape[1:]}, student {out_s.hidden.shape[1:]}")

    rng = np.random.default_rng(0)
    proj = T.Tensor(rng.uniform(-0.1, 0.1, (teacher.width, student.width)), requires_grad=True)
    l_ot, plan = ot_loss(T.l2_normalize(out_t.visual @ proj), T.l2_normalize(out_s.visual),
                         epsilon=cfg.sinkhorn_epsilon, return_plan=True)
    print(f"transport plan {plan.values.shape[1:]}, {plan.iterations_used} iterations, "
          f"marginal violation {plan.marginal_violation:.1e}")

    params = init_mhca(student.width, teacher.width, heads=cfg.heads, seed=0)
    aligned = mhca_forward(out_s.hidden, out_t.hidden, params)
    l_mhca = mhca_loss(out_s.hidden, aligned)
    l_dist, l_angle, l_rel = relation_loss(aligned, out_s.hidden)
    l_ce = bce_with_logits(out_s.logits, labels)

    parts = total_loss(l_ce, l_mhca, l_rel, l_ot, cfg, dist=l_dist, angle=l_angle)
    for name in ("ce", "ot", "mhca", "dist", "angle", "rel", "total"):
        print(f"  {name:>6} {getattr(parts, name):.6f}")


if __name__ == "__main__":
    main()
