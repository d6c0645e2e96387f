"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed even with
output capture on) or directly as ``python tests/test_acceptance.py``.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from emkdesc.aggregation import (  # noqa: E402
    DescriptorHead,
    FcHead,
    count_parameters,
    describe_batch,
    describe_fc,
    describe_fc_split,
    describe_spatial_efficient,
    describe_spatial_naive,
    match_kernel_similarity,
    memory_reduction_factor,
    parameter_report,
)
from emkdesc.backend import random_orthogonal_init  # noqa: E402
from emkdesc.evaluation import all_pairs_fpr95, average_precision, fpr_at_95  # noqa: E402
from emkdesc.featuremap import build_feature_map_spec, embed, kernel_value  # noqa: E402
from emkdesc.learning import (  # noqa: E402
    TrainConfig,
    batch_triplet_loss,
    mine_hardest,
    synthetic_clusters,
    train_head_toy,
)
from oracles import ap_definition, fpr95_sweep, mine_brute  # noqa: E402

REFERENCE_VALUES = [288, 285_984, 147_584, 409_728, 295_040, 819_328, 1_048_576, 4_194_304,
                 433_568, 695_712, 581_024, 1_105_312, 867_008, 1_391_296, 1_334_560, 4_480_288]


def _emit(capsys, line):
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)


def run_criterion(number, title, budget_s, body, capsys=None):
    start = time.perf_counter()
    ok, detail = body()
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < budget_s
    _emit(capsys, f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail} ({elapsed:.2f}s, budget {budget_s}s)")
    return ok


# 1 -------------------------------------------------------------------------

def parameter_table():
    report = parameter_report()
    emitted = [layer["params"] for layer in report["conv_layers"][:1]] + [report["conv_total"]]
    for row in report["models"]:
        emitted += [row["head"], row["total"]]
        if "phi_tilde" in row:
            emitted.append(row["phi"] + row["phi_tilde"])
    missing = [v for v in REFERENCE_VALUES if v not in emitted]
    exact = (count_parameters("xy", s=1)["total"] == 433_568
             and count_parameters("star_combined", s=2)["total"] == 1_391_296
             and count_parameters("hardnet", N=64)["total"] == 4_480_288)
    return not missing and exact, f"all 16 values present" if not missing else f"missing {missing}"


# 2 -------------------------------------------------------------------------

def memory_factor():
    f = memory_reduction_factor(8, 128, 2)
    return float(f"{f:.3g}") == 20.9, f"factor {f:.6f}"


# 3 -------------------------------------------------------------------------

def efficient_equals_naive():
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(200):
        variant = ("xy", "rhotheta", "combined")[k % 3]
        n = int(rng.choice([1, 2, 3, 4, 8]))
        d = int(rng.choice([1, 2, 5, 16]))
        s = int(rng.integers(1, 4))
        blocks = 2 if variant == "combined" else 1
        E = blocks * d * (2 * s + 1) ** 2
        head = DescriptorHead(variant, rng.normal(size=(8, E)), rng.normal(size=8), d=d, s=s,
                              kappas=tuple(rng.uniform(0.5, 32, 2 * blocks)), weighted=bool(k % 2))
        phis = tuple(rng.normal(size=(n, n, d)) for _ in range(blocks))
        tables = head.tables(n)
        diff = describe_spatial_efficient(head, tables, phis).raw - describe_spatial_naive(head, tables, phis).raw
        worst = max(worst, float(np.max(np.abs(diff))))
    return worst < 1e-10, f"max |efficient - naive| = {worst:.2e} over 200 instances"


# 4 -------------------------------------------------------------------------

def fc_match_kernel():
    rng = np.random.default_rng(4)
    worst_split = worst_total = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 5))
        d, D = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        head = FcHead(rng.normal(size=(D, n * n * d)), rng.normal(size=D), n=n, d=d)
        a, b = rng.normal(size=(2, n, n, d))
        ra, rb = describe_fc(head, a).raw, describe_fc(head, b).raw
        worst_split = max(worst_split, float(np.max(np.abs(ra - describe_fc_split(head, a).raw))))
        total, _ = match_kernel_similarity(head, a, b)
        worst_total = max(worst_total, abs(total - ra @ rb))
    ok = worst_split < 1e-12 and worst_total < 1e-8
    return ok, f"split diff {worst_split:.2e}, pairwise-map total diff {worst_total:.2e}"


# 5 -------------------------------------------------------------------------

def kernel_approximation():
    delta = np.linspace(-np.pi, np.pi, 4001)
    parts = []
    ok = True
    for kappa in (2.0, 8.0, 32.0):
        ref = kernel_value(build_feature_map_spec(kappa, 64), delta)
        errs = [float(np.max(np.abs(kernel_value(build_feature_map_spec(kappa, s), delta) - ref)))
                for s in (1, 2, 3, 4, 8)]
        ok &= all(b <= a for a, b in zip(errs, errs[1:]))
        parts.append(f"k={kappa:g}: " + "/".join(f"{e:.2g}" for e in errs))
    rng = np.random.default_rng(5)
    worst = 0.0
    for kappa in (2.0, 8.0, 32.0):
        for s in (1, 2, 3, 8):
            spec = build_feature_map_spec(kappa, s)
            a, b = rng.uniform(-np.pi, np.pi, (2, 1000))
            worst = max(worst, float(np.max(np.abs(np.sum(embed(spec, a) * embed(spec, b), axis=1)
                                                     - kernel_value(spec, a - b)))))
    ok &= worst < 1e-12
    return ok, "; ".join(parts) + f"; embed vs kernel {worst:.1e}"


# 6 -------------------------------------------------------------------------

def gradient_checks():
    rng = np.random.default_rng(6)
    h = 1e-5
    instances = worst = 0
    while instances < 25:
        B, E, D = int(rng.integers(2, 7)), int(rng.integers(3, 20)), int(rng.integers(2, 8))
        n = int(rng.integers(1, 5))
        M, m = rng.normal(size=(D, E)), 0.1 * rng.normal(size=D)
        za, zp = rng.normal(size=(2, B, E))
        res = batch_triplet_loss(M, m, za, zp, n)
        if res.loss == 0.0:
            continue
        compared = 0
        for target in ("M", "m", "za"):
            base = {"M": M, "m": m, "za": za}[target]
            analytic = {"M": res.grad_M, "m": res.grad_m, "za": res.grad_z_anchor}[target]
            idx = tuple(int(rng.integers(0, s)) for s in base.shape)
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            args_p = {"M": M, "m": m, "za": za, target: plus}
            args_m = {"M": M, "m": m, "za": za, target: minus}
            lp = batch_triplet_loss(args_p["M"], args_p["m"], args_p["za"], zp, n)
            lm = batch_triplet_loss(args_m["M"], args_m["m"], args_m["za"], zp, n)
            hinges = np.concatenate([lp.selection.losses, lm.selection.losses])
            # skip points where a hinge or the mined negative switches inside the stencil
            if (lp.selection.negatives != lm.selection.negatives).any() or np.any((hinges > 0) & (hinges < 1e-3)):
                continue
            fd = (lp.loss - lm.loss) / (2 * h)
            rel = abs(fd - analytic[idx]) / max(abs(fd), abs(analytic[idx]), 1e-8)
            worst = max(worst, rel)
            compared += 1
        instances += compared > 0
    return worst < 1e-4, f"worst relative error {worst:.2e} over {instances} instances"


# 7 -------------------------------------------------------------------------

def mining_oracle():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(50):
        B, D = int(rng.integers(2, 65)), int(rng.integers(2, 33))
        A, P = rng.normal(size=(2, B, D))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        P /= np.linalg.norm(P, axis=1, keepdims=True)
        mismatches += mine_hardest(A, P).negatives.tolist() != mine_brute(A.tolist(), P.tolist())
    return mismatches == 0, f"{50 - mismatches}/50 batches identical"


# 8 -------------------------------------------------------------------------

def metric_oracles():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        size = int(rng.integers(2, 40))
        d = rng.integers(0, 12, size).astype(float) / 4
        y = rng.uniform(size=size) < 0.5
        y[0], y[1] = True, False
        worst = max(worst, abs(fpr_at_95(d, y) - fpr95_sweep(d.tolist(), y.tolist())))
        rel = rng.uniform(size=size) < 0.4
        rel[int(rng.integers(size))] = True
        worst = max(worst, abs(average_precision(rel) - ap_definition(rel.tolist())))
    degenerate = (fpr_at_95([0.1, 0.2, 0.3, 0.7, 0.8], [1, 1, 1, 0, 0]) == 0.0
                  and average_precision([1, 1, 1, 0, 0]) == 1.0)
    return worst < 1e-12 and degenerate, f"max diff {worst:.1e}, degenerate cases exact: {degenerate}"


# 9 -------------------------------------------------------------------------

def toy_trainability():
    # base rate 0.3: see the decisions ledger; momentum, decay and schedule are fixed
    common = dict(n_classes=32, n=4, d=8, class_seed=0)
    X_train, y_train = synthetic_clusters(per_class=16, seed=1, **common)
    X_test, y_test = synthetic_clusters(per_class=8, seed=2, **common)
    config = TrainConfig(variant="xy", s=1, kappa=8.0, D=16, epochs=10, batch_pairs=16, lr=0.3,
                         momentum=0.9, weight_decay=1e-4, seed=0)
    init_head, _ = train_head_toy(X_train, y_train, TrainConfig(**{**config.__dict__, "epochs": 0}))
    head, trace = train_head_toy(X_train, y_train, config)
    again, _ = train_head_toy(X_train, y_train, config)
    before = all_pairs_fpr95(describe_batch(init_head, X_test), y_test)
    after = all_pairs_fpr95(describe_batch(head, X_test), y_test)
    deterministic = head.M.tobytes() == again.M.tobytes()
    return after < before and deterministic, (f"held-out FPR@95 {before:.4f} -> {after:.4f}, "
                                              f"{len(trace)} steps, deterministic: {deterministic}")


# 10 ------------------------------------------------------------------------

def resolution_independence():
    rng = np.random.default_rng(10)
    d, s, D = 128, 2, 128
    M = random_orthogonal_init((D, 2 * d * (2 * s + 1) ** 2), 0)
    head = DescriptorHead("combined", M, np.zeros(D), d=d, s=s)
    ok, shapes = True, []
    for n in (8, 16):
        phis = (np.abs(rng.normal(size=(n, n, d))), np.abs(rng.normal(size=(n, n, d))))
        desc = describe_spatial_efficient(head, head.tables(n), phis)
        ok &= desc.normalized.shape == (D,) and bool(np.all(np.isfinite(desc.normalized)))
        ok &= abs(np.linalg.norm(desc.normalized) - 1.0) < 1e-12
        shapes.append(n)
    counts = {N: count_parameters("combined", s=2, N=N)["total"] for N in (32, 64)}
    ok &= counts[32] == counts[64] == 1_105_312 and head.n_params == 819_328
    return ok, f"n in {shapes} -> D={D}, parameters {counts[32]} for N=32 and N=64"


CRITERIA = [
    (1, "parameter table reproduction", 1, parameter_table),
    (2, "memory reduction factor", 1, memory_factor),
    (3, "efficient/naive aggregation equality", 30, efficient_equals_naive),
    (4, "fully connected match-kernel equivalence", 10, fc_match_kernel),
    (5, "kernel approximation", 10, kernel_approximation),
    (6, "gradient checks", 30, gradient_checks),
    (7, "mining oracle", 10, mining_oracle),
    (8, "metric oracles", 10, metric_oracles),
    (9, "toy trainability", 300, toy_trainability),
    (10, "resolution independence", 10, resolution_independence),
]


@pytest.mark.parametrize("number, title, budget, body", CRITERIA, ids=[f"c{c[0]:02d}" for c in CRITERIA])
def test_criterion(number, title, budget, body, capsys):
    assert run_criterion(number, title, budget, body, capsys)


if __name__ == "__main__":
    results = [run_criterion(*c) for c in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
