"""Self-check suite behind ``hetdistill verify``.

Each check builds small random instances, compares the library against an
independent computation and returns a :class:`CheckResult`. Nothing here
trains a model, so the whole suite runs in seconds.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from hetdistill import tensor as T
from hetdistill.checkpoint import Checkpoint, from_bytes, to_bytes
from hetdistill.gradcheck import finite_diff_check
from hetdistill.metrics import binary_auc
from hetdistill.mhca import eot_equivalence_check, init_mhca, mhca_forward, mhca_loss
from hetdistill.objective import DistillConfig, combine, default_config, total_loss
from hetdistill.ot import cost_matrix, ot_loss, sinkhorn
from hetdistill.relation import angle_potential, distance_potential, relation_loss


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _unit_rows(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def check_eot(seeds: int = 100) -> tuple:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        d_k = int(rng.integers(1, 9))
        Q = rng.standard_normal((int(rng.integers(1, 7)), d_k))
        K = rng.standard_normal((int(rng.integers(1, 9)), d_k))
        V = rng.standard_normal((K.shape[0], int(rng.integers(1, 6))))
        rep = eot_equivalence_check(Q, K, V)
        worst = max(worst, rep.max_weight_deviation, rep.max_projection_deviation)
    return worst <= 1e-12, f"max deviation {worst:.2e} over {seeds} seeds"


def check_sinkhorn_marginals() -> tuple:
    rng = np.random.default_rng(1)
    worst, iters = 0.0, 0
    for n, m in [(4, 4), (5, 3), (6, 6), (7, 5), (8, 6)]:
        plan = sinkhorn(rng.uniform(0, 1, (n, m)), epsilon=0.1, max_iter=200, tol=1e-6)
        worst = max(worst, plan.marginal_violation)
        iters = max(iters, plan.iterations_used)
    return worst <= 1e-6, f"max violation {worst:.2e}, at most {iters} iterations"


def check_sinkhorn_permutations() -> tuple:
    rng = np.random.default_rng(2)
    worst = 0.0
    for n in range(1, 7):
        C = rng.uniform(0, 1, (n, n))
        best = min(C[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n))) / n
        plan = sinkhorn(C, epsilon=1e-3, max_iter=5000, tol=1e-9)
        got = float((plan.values.data * C).sum())
        worst = max(worst, (got - best) / max(best, 1e-12))
    return worst <= 0.01, f"worst relative excess over the permutation optimum {worst:.2e}"


def _grad_instance(seed: int):
    rng = np.random.default_rng(seed)
    B, L_s, L_t, D_s, D_t = 2, 3, 5, 8, 12
    hs = T.Tensor(rng.standard_normal((B, L_s, D_s)), requires_grad=True)
    ht = T.Tensor(rng.standard_normal((B, L_t, D_t)))
    vs = T.Tensor(rng.standard_normal((B, 4, D_s)), requires_grad=True)
    vt = T.Tensor(rng.standard_normal((B, 6, D_t)))
    proj = T.Tensor(rng.uniform(-0.3, 0.3, (D_t, D_s)), requires_grad=True)
    params = init_mhca(D_s, D_t, heads=2, seed=seed)
    return hs, ht, vs, vt, proj, params


GRAD_SCALE_FLOOR = 1e-3


def check_gradients() -> tuple:
    hs, ht, vs, vt, proj, params = _grad_instance(3)
    cfg = default_config().replace(sinkhorn_tol=1e-14, heads=2)

    def ot_term():
        return ot_loss(T.l2_normalize(vt @ proj), T.l2_normalize(vs),
                       epsilon=cfg.sinkhorn_epsilon, tol=cfg.sinkhorn_tol)

    def aligned():
        return mhca_forward(hs, ht, params)

    def rel(i):
        # the full graph; the default stop-gradient is checked separately below
        return lambda: relation_loss(aligned(), hs, detach_teacher=False)[i]

    losses = {
        "ot": ot_term,
        "mhca": lambda: mhca_loss(hs, aligned()),
        "dist": rel(0),
        "angle": rel(1),
        "rel": rel(2),
        "total": lambda: combine(cfg, (hs * hs).mean(), mhca_loss(hs, aligned()),
                                 rel(2)(), ot_term()),
    }
    leaves = {"h_s": hs, "v_s": vs, "proj": proj, **params.parameters()}
    worst = 0.0
    for build in losses.values():
        for leaf in leaves.values():
            rep = finite_diff_check(lambda _x, build=build: build(), leaf,
                                    scale_floor=GRAD_SCALE_FLOOR)
            worst = max(worst, rep.max_rel_error)
    target = T.Tensor(aligned().data)
    rep = finite_diff_check(lambda x: relation_loss(target, x)[2], hs,
                            scale_floor=GRAD_SCALE_FLOOR)
    worst = max(worst, rep.max_rel_error)
    return worst <= 1e-4, f"max relative error {worst:.2e}"


def check_formula() -> tuple:
    cfg = default_config()
    one = total_loss(1.0, 1.0, 1.0, 1.0, cfg).total
    collapse = total_loss(0.7, 5.0, 3.0, 2.0, cfg.replace(alpha=0.0)).total
    parts = [T.Tensor(np.array(1.0), requires_grad=True) for _ in range(4)]
    partials = T.gradients(combine(cfg, *parts), parts)
    expected = (1.0 - cfg.alpha, cfg.alpha * cfg.lambda_m, cfg.alpha * cfg.lambda_r,
                cfg.alpha * cfg.lambda_ot)
    slopes = all(float(g) == e for g, e in zip(partials, expected))
    ok = one == 1.039 and collapse == 0.7 and slopes
    return ok, f"unit total {one!r}, alpha=0 total {collapse!r}, slopes exact {slopes}"


def _rotation(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def check_invariances(instances: int = 50) -> tuple:
    worst = 0.0
    for seed in range(instances):
        rng = np.random.default_rng(100 + seed)
        H = rng.standard_normal((int(rng.integers(2, 8)), int(rng.integers(2, 6))))
        R = _rotation(rng, H.shape[1])
        c = float(rng.uniform(0.1, 10.0))
        rows = rng.uniform(0.1, 10.0, (H.shape[0], 1))
        dp, ap = distance_potential(H).data, angle_potential(H).data
        worst = max(worst,
                    np.abs(distance_potential(c * H).data - dp).max(),
                    np.abs(angle_potential(rows * H).data - ap).max(),
                    np.abs(distance_potential(H @ R).data - dp).max(),
                    np.abs(angle_potential(H @ R).data - ap).max())
    return worst <= 1e-9, f"max deviation {worst:.2e} over {instances} instances"


def check_auc(sets: int = 50) -> tuple:
    worst = 0.0
    for seed in range(sets):
        rng = np.random.default_rng(200 + seed)
        y = rng.integers(0, 2, 20)
        y[:2] = (0, 1)
        s = rng.integers(0, 6, 20) / 5.0  # coarse grid forces ties
        pos, neg = s[y == 1], s[y == 0]
        pairs = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
        worst = max(worst, abs(binary_auc(y, s) - pairs / (len(pos) * len(neg))))
    return worst <= 1e-12, f"max deviation from the pairwise count {worst:.2e}"


def check_cost_matrix() -> tuple:
    rng = np.random.default_rng(4)
    t, s = _unit_rows(rng, (6, 5)), _unit_rows(rng, (4, 5))
    C = cost_matrix(t, s).data
    dev = np.abs(C - (2.0 - 2.0 * t @ s.T)).max()
    return dev <= 1e-12 and C.min() >= 0.0, f"expansion identity deviation {dev:.2e}"


def check_checkpoint() -> tuple:
    rng = np.random.default_rng(5)
    ckpt = Checkpoint(params={"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(2)},
                      config={"role": "probe", "cfg": DistillConfig().to_dict()}, step=7,
                      metrics={"macro_auc": 0.5})
    blob = to_bytes(ckpt)
    same = to_bytes(from_bytes(blob)) == blob
    return same, "save -> load -> save is byte-identical" if same else "round trip changed bytes"


CHECKS = {
    "eot-equivalence": check_eot,
    "sinkhorn-marginals": check_sinkhorn_marginals,
    "sinkhorn-permutation-oracle": check_sinkhorn_permutations,
    "gradients": check_gradients,
    "formula-identities": check_formula,
    "potential-invariances": check_invariances,
    "auc-pairwise-oracle": check_auc,
    "cost-expansion": check_cost_matrix,
    "checkpoint-roundtrip": check_checkpoint,
}


def run_all(names=None) -> list:
    results = []
    for name in names or CHECKS:
        start = time.perf_counter()
        passed, detail = CHECKS[name]()
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results
