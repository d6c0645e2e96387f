"""Triplet-loss training of the whitening head ``(M, m)``.

The convolutional part is frozen, so training works on aggregated encodings
``z = vec(Phi^T F)``: the raw descriptor is ``M z + n^2 m``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .aggregation import DescriptorHead, _spatial_inputs, encode_batch
from .backend import random_orthogonal_init

__all__ = [
    "HeadGradients",
    "TrainConfig",
    "TripletBatch",
    "TripletSelection",
    "batch_triplet_loss",
    "head_gradients",
    "linear_lr",
    "make_pair_batches",
    "mine_hardest",
    "sgd_step",
    "synthetic_clusters",
    "train_head",
    "train_head_toy",
    "triplet_loss",
    "write_loss_trace",
]

log = logging.getLogger(__name__)

MARGIN = 1.0


def _check_unit(name, v, tol=1e-6):
    norm = np.linalg.norm(v)
    if abs(norm - 1.0) > tol:
        raise ValueError(f"{name} must be l2-normalized (norm {norm:.8g})")


def triplet_loss(anchor, positive, negative) -> float:
    """``max(0, 1 + |a - p| - |a - n|)`` on unit-norm descriptors."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    for name, v in (("anchor", a), ("positive", p), ("negative", n)):
        _check_unit(name, v)
    return max(0.0, MARGIN + float(np.linalg.norm(a - p)) - float(np.linalg.norm(a - n)))


@dataclass(frozen=True, eq=False)
class TripletSelection:
    negatives: np.ndarray
    losses: np.ndarray


def _pair_distances(anchors, positives) -> np.ndarray:
    diff = anchors[:, None, :] - positives[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def mine_hardest(anchors, positives) -> TripletSelection:
    """For each anchor pick the closest positive of any other pair.

    Ties go to the smallest index.
    """
    A = np.asarray(anchors, dtype=np.float64)
    P = np.asarray(positives, dtype=np.float64)
    if A.ndim != 2 or A.shape != P.shape:
        raise ValueError(f"anchors {A.shape} and positives {P.shape} must be matching (B, D) arrays")
    B = A.shape[0]
    if B < 2:
        raise ValueError(f"hardest-in-batch mining needs at least 2 pairs, got {B}")
    dist = _pair_distances(A, P)
    own = np.diagonal(dist).copy()
    np.fill_diagonal(dist, np.inf)
    neg = np.argmin(dist, axis=1)
    losses = np.maximum(0.0, MARGIN + own - dist[np.arange(B), neg])
    return TripletSelection(negatives=neg, losses=losses)


@dataclass(frozen=True, eq=False)
class TripletBatch:
    loss: float
    grad_M: np.ndarray
    grad_m: np.ndarray
    selection: TripletSelection
    grad_z_anchor: np.ndarray
    grad_z_positive: np.ndarray


def _normalize_rows(raw):
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ArithmeticError("all-zero descriptor in batch")
    return raw / norms, norms


def _unit_direction(diff):
    dist = np.linalg.norm(diff, axis=1, keepdims=True)
    safe = np.where(dist > 0.0, dist, 1.0)
    return np.where(dist > 0.0, diff / safe, 0.0)


def batch_triplet_loss(M, m, z_anchor, z_positive, n: int) -> TripletBatch:
    """Mean hardest-in-batch triplet loss and its gradients.

    ``z_anchor`` and ``z_positive`` are ``(B, E)`` encodings. The negative
    selection is treated as fixed when differentiating.
    """
    n2 = n * n
    raw_a = z_anchor @ M.T + n2 * m
    raw_p = z_positive @ M.T + n2 * m
    a_hat, a_norm = _normalize_rows(raw_a)
    p_hat, p_norm = _normalize_rows(raw_p)
    sel = mine_hardest(a_hat, p_hat)
    B = len(a_hat)

    active = sel.losses > 0.0
    neg = sel.negatives
    u_pos = _unit_direction(a_hat - p_hat)
    u_neg = _unit_direction(a_hat - p_hat[neg])
    scale = active[:, None] / B
    g_a = scale * (u_pos - u_neg)
    g_p = -scale * u_pos
    np.add.at(g_p, neg, scale * u_neg)

    # through l2 normalization
    g_raw_a = (g_a - a_hat * np.sum(a_hat * g_a, axis=1, keepdims=True)) / a_norm
    g_raw_p = (g_p - p_hat * np.sum(p_hat * g_p, axis=1, keepdims=True)) / p_norm

    return TripletBatch(
        loss=float(np.mean(sel.losses)),
        grad_M=g_raw_a.T @ z_anchor + g_raw_p.T @ z_positive,
        grad_m=n2 * (g_raw_a.sum(axis=0) + g_raw_p.sum(axis=0)),
        selection=sel,
        grad_z_anchor=g_raw_a @ M,
        grad_z_positive=g_raw_p @ M,
    )


@dataclass(frozen=True, eq=False)
class HeadGradients:
    M: np.ndarray
    m: np.ndarray
    phis: tuple


def encoding_to_tensor_grad(tables, grad_z, d: int) -> tuple:
    """Pull a gradient w.r.t. ``vec(Phi^T F)`` back to the feature tensor(s)."""
    grads = []
    width = grad_z.shape[-1] // len(tables)
    for k, table in enumerate(tables):
        gz = grad_z[k * width : (k + 1) * width].reshape(d, table.dim)
        grads.append((table.F @ gz.T).reshape(table.n, table.n, d))
    return tuple(grads)


def head_gradients(head: DescriptorHead, tables, phis, upstream) -> HeadGradients:
    """Gradients of ``upstream . raw_descriptor`` w.r.t. ``M``, ``m`` and the tensors."""
    tables, phis = _spatial_inputs(head, tables, phis)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != (head.D,):
        raise ValueError(f"upstream gradient must have shape {(head.D,)}, got {up.shape}")
    z = np.concatenate([(phi.reshape(-1, head.d).T @ t.F).reshape(-1) for t, phi in zip(tables, phis)])
    n2 = tables[0].n ** 2
    return HeadGradients(
        M=np.outer(up, z),
        m=n2 * up,
        phis=encoding_to_tensor_grad(tables, head.M.T @ up, head.d),
    )


def linear_lr(base_lr: float, progress: float, total: float) -> float:
    """Learning rate decayed linearly from ``base_lr`` to 0 over ``total`` epochs."""
    return base_lr * max(0.0, 1.0 - progress / total)


def sgd_step(params: dict, grads: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4, state: dict | None = None):
    """One momentum-SGD update; returns ``(new_params, new_state)``.

    Weight decay is added to the gradient, and the velocity starts at zero,
    matching the usual deep-learning formulation
    ``v <- momentum * v + (g + wd * p)``, ``p <- p - lr * v``.
    """
    state = {} if state is None else state
    new_params, new_state = {}, {}
    for name, p in params.items():
        g = grads[name] + weight_decay * p
        v = momentum * state[name] + g if name in state else g
        new_state[name] = v
        new_params[name] = p - lr * v
    return new_params, new_state


@dataclass
class TrainConfig:
    variant: str = "xy"
    s: int = 1
    kappa: float | tuple = 8.0
    D: int = 128
    weighted: bool = True
    epochs: int = 10
    batch_pairs: int = 16
    lr: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0


def make_pair_batches(labels, batch_pairs: int, rng) -> list[np.ndarray]:
    """Anchor/positive index pairs grouped into batches with distinct labels.

    Each round pairs up the shuffled samples of every class; a round's pairs
    are split into batches in a shuffled class order, so one batch never
    holds two pairs of the same class. Returns arrays of shape ``(b, 2)``.
    """
    labels = np.asarray(labels)
    classes = {}
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        pairs = idx[: len(idx) // 2 * 2].reshape(-1, 2)
        if len(pairs):
            classes[c] = pairs
    if len(classes) < 2:
        raise ValueError("training needs at least two classes with two samples each")
    rounds = max(len(p) for p in classes.values())
    batches = []
    for r in range(rounds):
        order = [c for c in rng.permutation(list(classes)) if r < len(classes[c])]
        round_pairs = np.array([classes[c][r] for c in order])
        for start in range(0, len(round_pairs), batch_pairs):
            chunk = round_pairs[start : start + batch_pairs]
            if len(chunk) >= 2:
                batches.append(chunk)
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _drop_zero_pairs(params, Z, batch, n):
    """Skip pairs where either side would give an all-zero descriptor."""
    raw = Z[batch.reshape(-1)] @ params["M"].T + n * n * params["m"]
    keep = np.all(np.linalg.norm(raw, axis=1).reshape(-1, 2) > 0.0, axis=1)
    if not keep.all():
        log.debug("skipping %d pair(s) with an all-zero descriptor", int((~keep).sum()))
    return batch[keep]


def train_head(head: DescriptorHead, Z, labels, n: int, config: TrainConfig, rng=None):
    """Train ``head`` in place on precomputed encodings ``Z`` of shape ``(N, E)``.

    Returns the loss trace: one dict per step with epoch, step, mean_loss, lr.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    params = {"M": head.M.copy(), "m": head.m.copy()}
    state = None
    trace = []
    step = 0
    for epoch in range(config.epochs):
        batches = make_pair_batches(labels, config.batch_pairs, rng)
        for k, batch in enumerate(batches):
            lr = linear_lr(config.lr, epoch + k / len(batches), config.epochs)
            batch = _drop_zero_pairs(params, Z, batch, n)
            if len(batch) < 2:
                continue
            result = batch_triplet_loss(params["M"], params["m"], Z[batch[:, 0]], Z[batch[:, 1]], n)
            params, state = sgd_step(params, {"M": result.grad_M, "m": result.grad_m}, lr,
                                     config.momentum, config.weight_decay, state)
            trace.append({"epoch": epoch, "step": step, "mean_loss": result.loss, "lr": lr})
            step += 1
        log.debug("epoch %d mean loss %.5f", epoch, np.mean([t["mean_loss"] for t in trace if t["epoch"] == epoch]))
    head.M, head.m = params["M"], params["m"]
    return trace


def train_head_toy(tensors, labels, config: TrainConfig):
    """Initialize a head orthogonally and train it on labelled feature tensors.

    ``tensors`` is ``(N, n, n, d)``; a combined head takes ``(N, n, n, 2d)``
    with the cartesian network's channels first. Deterministic given
    ``config.seed``.
    """
    x = np.asarray(tensors, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    blocks = 2 if config.variant == "combined" else 1
    if x.ndim != 4 or x.shape[3] % blocks:
        raise ValueError(f"tensors of shape {x.shape} do not fit a {config.variant} head")
    d = x.shape[3] // blocks
    E = blocks * d * (2 * config.s + 1) ** 2
    head = DescriptorHead(config.variant, random_orthogonal_init((config.D, E), rng.integers(2**63)),
                          np.zeros(config.D), d=d, s=config.s, kappas=config.kappa,
                          weighted=config.weighted)
    Z = encode_batch(head.tables(x.shape[1]), x)
    trace = train_head(head, Z, labels, x.shape[1], config, rng)
    return head, trace


def write_loss_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "step", "mean_loss", "lr"])
        writer.writeheader()
        writer.writerows(trace)


def synthetic_clusters(n_classes=32, per_class=16, n=4, d=8, signal_channels=2,
                       noise=0.3, nuisance=2.0, seed=0, class_seed=0):
    """Labelled feature tensors clustered by class.

    Class identity lives in the first ``signal_channels`` channels; the rest
    carry large class-independent noise that a random projection mixes in
    and a trained head learns to suppress. ``class_seed`` fixes the class
    prototypes, ``seed`` the per-sample noise.
    """
    protos = np.zeros((n_classes, n, n, d))
    protos[..., :signal_channels] = np.random.default_rng(class_seed).normal(
        size=(n_classes, n, n, signal_channels))
    rng = np.random.default_rng(seed)
    X = np.repeat(protos, per_class, axis=0) + noise * rng.normal(size=(n_classes * per_class, n, n, d))
    X[..., signal_channels:] += nuisance * rng.normal(size=X[..., signal_channels:].shape)
    return X, np.repeat(np.arange(n_classes), per_class)
