"""Fast invariant checks runnable from an installed package (``emkdesc selftest``)."""

from __future__ import annotations

import numpy as np

from .aggregation import (
    DescriptorHead,
    FcHead,
    describe_fc,
    describe_fc_split,
    describe_spatial_efficient,
    describe_spatial_naive,
    match_kernel_similarity,
    memory_reduction_factor,
    parameter_report,
)
from .evaluation import average_precision, fpr_at_95
from .featuremap import build_feature_map_spec, embed, kernel_value
from .learning import batch_triplet_loss, mine_hardest

REFERENCE_TOTALS = {
    ("hardnet", 32): 1_334_560, ("hardnet", 64): 4_480_288,
    ("xy", 1): 433_568, ("xy", 2): 695_712,
    ("rhotheta", 1): 433_568, ("rhotheta", 2): 695_712,
    ("combined", 1): 581_024, ("combined", 2): 1_105_312,
    ("star_combined", 1): 867_008, ("star_combined", 2): 1_391_296,
}


def _check_feature_map(rng):
    spec = build_feature_map_spec(8.0, 3)
    a, b = rng.uniform(-np.pi, np.pi, (2, 200))
    fa, fb = embed(spec, a), embed(spec, b)
    return (np.max(np.abs(np.linalg.norm(fa, axis=1) - 1)) < 1e-12
            and np.max(np.abs(np.sum(fa * fb, axis=1) - kernel_value(spec, a - b))) < 1e-12)


def _check_parameter_totals(rng):
    report = parameter_report()
    got = {(r["model"], r["N"] if r["model"] == "hardnet" else r["s"]): r["total"] for r in report["models"]}
    return got == REFERENCE_TOTALS and report["conv_total"] == 285_984


def _check_memory(rng):
    return round(memory_reduction_factor(8, 128, 2), 1) == 20.9


def _random_head(rng, variant, d, s, D):
    blocks = 2 if variant == "combined" else 1
    E = blocks * d * (2 * s + 1) ** 2
    return DescriptorHead(variant, rng.normal(size=(D, E)), rng.normal(size=D), d=d, s=s,
                          kappas=tuple(rng.uniform(1, 10, 2 * blocks)))


def _check_efficient(rng):
    worst = 0.0
    for variant in ("xy", "rhotheta", "combined"):
        head = _random_head(rng, variant, 3, 2, 5)
        phis = tuple(rng.normal(size=(4, 4, 3)) for _ in range(2 if variant == "combined" else 1))
        tables = head.tables(4)
        a = describe_spatial_efficient(head, tables, phis).raw
        b = describe_spatial_naive(head, tables, phis).raw
        worst = max(worst, np.max(np.abs(a - b)))
    return worst < 1e-10


def _check_fc(rng):
    n, d, D = 3, 2, 4
    head = FcHead(rng.normal(size=(D, n * n * d)), rng.normal(size=D), n=n, d=d)
    pa, pb = rng.normal(size=(2, n, n, d))
    total, _ = match_kernel_similarity(head, pa, pb)
    ra, rb = describe_fc(head, pa).raw, describe_fc(head, pb).raw
    return (np.max(np.abs(ra - describe_fc_split(head, pa).raw)) < 1e-12
            and abs(total - ra @ rb) < 1e-8)


def _check_mining(rng):
    A, P = rng.normal(size=(2, 16, 8))
    sel = mine_hardest(A, P)
    for i in range(16):
        dists = [np.sqrt(np.sum((A[i] - P[j]) ** 2)) if j != i else np.inf for j in range(16)]
        if sel.negatives[i] != int(np.argmin(dists)):
            return False
    return True


def _check_metrics(rng):
    return (fpr_at_95([0.1, 0.2, 0.9, 1.0], [True, True, False, False]) == 0.0
            and average_precision([True, True, False]) == 1.0
            and average_precision([False, True]) == 0.5)


def _check_gradient(rng):
    B, E, D, n = 4, 6, 3, 2
    M, m = rng.normal(size=(D, E)), rng.normal(size=D)
    za, zp = rng.normal(size=(2, B, E))
    res = batch_triplet_loss(M, m, za, zp, n)
    h = 1e-5
    k = (1, 2)
    Mp, Mm = M.copy(), M.copy()
    Mp[k] += h
    Mm[k] -= h
    fd = (batch_triplet_loss(Mp, m, za, zp, n).loss - batch_triplet_loss(Mm, m, za, zp, n).loss) / (2 * h)
    return abs(fd - res.grad_M[k]) <= 1e-4 * max(1.0, abs(fd))


CHECKS = {
    "feature map unit norm and kernel identity": _check_feature_map,
    "parameter table totals": _check_parameter_totals,
    "memory reduction factor 20.9": _check_memory,
    "efficient equals naive aggregation": _check_efficient,
    "fc split and match-kernel total": _check_fc,
    "hardest-negative mining vs brute force": _check_mining,
    "metric degenerate cases": _check_metrics,
    "triplet gradient vs finite differences": _check_gradient,
}


def run_selfcheck(seed: int = 0) -> list[tuple[str, bool]]:
    rng = np.random.default_rng(seed)
    results = []
    for name, check in CHECKS.items():
        try:
            ok = bool(check(rng))
        except Exception:
            ok = False
        results.append((name, ok))
    return results
