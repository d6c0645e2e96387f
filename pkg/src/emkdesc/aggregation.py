"""Descriptor construction from feature tensors.

A feature tensor is an ``(n, n, d)`` array; ``phi[i-1, j-1]`` is the
convolutional descriptor at grid position ``(i, j)``. Reshaping it to
``(n*n, d)`` gives the matrix ``Phi`` whose rows follow the same flat order as
:class:`~emkdesc.position_encoding.PositionTable` rows.

Spatial descriptors are ``M vec(Phi^T F) + n^2 m`` where ``vec`` flattens
row-major, so ``vec(Phi^T F)`` equals ``sum_p phi_p kron F_p``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .backend import HARDNET_ARCH, output_size
from .exceptions import NormalizationError
from .featuremap import FeatureMapSpec, build_feature_map_spec
from .position_encoding import (
    CARTESIAN,
    POLAR,
    PositionTable,
    build_position_table,
    grid_geometry,
)

__all__ = [
    "HEAD_VARIANTS",
    "Descriptor",
    "DescriptorHead",
    "FcHead",
    "count_parameters",
    "describe_batch",
    "describe_cat",
    "describe_fc",
    "describe_fc_split",
    "describe_spatial_efficient",
    "describe_spatial_naive",
    "describe_sum",
    "encode_batch",
    "match_kernel_similarity",
    "memory_reduction_factor",
    "position_tables",
    "similarity_heatmap",
    "parameter_report",
]

HEAD_VARIANTS = ("xy", "rhotheta", "combined")
TABLE_VARIANTS = {
    "xy": (CARTESIAN,),
    "rhotheta": (POLAR,),
    "combined": (CARTESIAN, POLAR),
}


def _as_tensor(phi) -> np.ndarray:
    t = np.asarray(phi, dtype=np.float64)
    if t.ndim != 3 or t.shape[0] != t.shape[1]:
        raise ValueError(f"feature tensor must have shape (n, n, d), got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("feature tensor contains non-finite values")
    return t


@dataclass(frozen=True, eq=False)
class Descriptor:
    raw: np.ndarray
    normalized: np.ndarray
    gamma: float

    @classmethod
    def from_raw(cls, raw) -> "Descriptor":
        raw = np.asarray(raw, dtype=np.float64)
        norm = np.sqrt(raw @ raw)
        if norm == 0.0:
            raise NormalizationError("cannot normalize an all-zero descriptor")
        gamma = 1.0 / norm
        return cls(raw=raw, normalized=gamma * raw, gamma=gamma)

    @property
    def dim(self) -> int:
        return self.raw.shape[0]


@dataclass(eq=False)
class FcHead:
    """Fully connected head ``W vec(phi) + w`` with ``W`` of shape ``(D, n*n*d)``."""

    W: np.ndarray
    w: np.ndarray
    n: int
    d: int

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        D = self.W.shape[0]
        if self.W.shape != (D, self.n * self.n * self.d) or self.w.shape != (D,):
            raise ValueError(
                f"FC head shapes W{self.W.shape}, w{self.w.shape} inconsistent with n={self.n}, d={self.d}"
            )

    @property
    def D(self) -> int:
        return self.W.shape[0]

    def blocks(self) -> np.ndarray:
        """Per-position blocks ``W_p`` stacked as ``(n*n, D, d)``."""
        return self.W.reshape(self.D, self.n * self.n, self.d).transpose(1, 0, 2)

    def check(self, phi: np.ndarray) -> None:
        if phi.shape != (self.n, self.n, self.d):
            raise ValueError(f"FC head expects tensor {(self.n, self.n, self.d)}, got {phi.shape}")


@dataclass(eq=False)
class DescriptorHead:
    """Whitening parameters ``(M, m)`` of a spatially encoded descriptor.

    ``kappas`` gives one Von Mises concentration per coordinate channel:
    ``(x, y)``, ``(rho, theta)`` or ``(x, y, rho, theta)`` for combined.
    """

    variant: str
    M: np.ndarray
    m: np.ndarray
    d: int
    s: int
    kappas: tuple = None
    weighted: bool = True

    def __post_init__(self):
        if self.variant not in HEAD_VARIANTS:
            raise ValueError(f"unknown head variant {self.variant!r}")
        n_channels = 2 * len(TABLE_VARIANTS[self.variant])
        if self.kappas is None:
            self.kappas = (8.0,) * n_channels
        elif np.isscalar(self.kappas):
            self.kappas = (float(self.kappas),) * n_channels
        self.kappas = tuple(float(k) for k in self.kappas)
        if len(self.kappas) != n_channels:
            raise ValueError(f"{self.variant} head needs {n_channels} kappa values, got {len(self.kappas)}")
        self.M = np.asarray(self.M, dtype=np.float64)
        self.m = np.asarray(self.m, dtype=np.float64)
        if self.M.ndim != 2 or self.M.shape[1] != self.E or self.m.shape != (self.M.shape[0],):
            raise ValueError(
                f"head shapes M{self.M.shape}, m{self.m.shape} inconsistent with E={self.E}"
            )

    @property
    def D(self) -> int:
        return self.M.shape[0]

    @property
    def block_dim(self) -> int:
        return self.d * (2 * self.s + 1) ** 2

    @property
    def E(self) -> int:
        return len(TABLE_VARIANTS[self.variant]) * self.block_dim

    @property
    def n_params(self) -> int:
        return self.M.size + self.m.size

    def feature_maps(self) -> list[tuple[FeatureMapSpec, FeatureMapSpec]]:
        specs = [build_feature_map_spec(k, self.s) for k in self.kappas]
        return [tuple(specs[i : i + 2]) for i in range(0, len(specs), 2)]

    def tables(self, n: int) -> tuple[PositionTable, ...]:
        return position_tables(self.variant, n, self.s, self.kappas, self.weighted)


@lru_cache(maxsize=64)
def position_tables(variant: str, n: int, s: int, kappas: tuple, weighted: bool = True):
    """Position tables for a head variant; cached since they only depend on config."""
    geom = grid_geometry(n)
    specs = [build_feature_map_spec(k, s) for k in kappas]
    return tuple(
        build_position_table(kind, geom, specs[2 * i : 2 * i + 2], weighted)
        for i, kind in enumerate(TABLE_VARIANTS[variant])
    )


def _spatial_inputs(head: DescriptorHead, tables, phis):
    if isinstance(tables, PositionTable):
        tables = (tables,)
    if isinstance(phis, np.ndarray) and phis.ndim == 3:
        phis = (phis,)
    tables, phis = tuple(tables), tuple(_as_tensor(p) for p in phis)
    kinds = TABLE_VARIANTS[head.variant]
    if tuple(t.variant for t in tables) != kinds:
        raise ValueError(f"{head.variant} head needs tables {kinds}, got {[t.variant for t in tables]}")
    if len(phis) == 1 and len(kinds) == 2:
        phis = phis * 2
    if len(phis) != len(kinds):
        raise ValueError(f"{head.variant} head takes {len(kinds)} tensors, got {len(phis)}")
    for table, phi in zip(tables, phis):
        if phi.shape[:2] != (table.n, table.n) or phi.shape[2] != head.d:
            raise ValueError(f"tensor {phi.shape} does not fit n={table.n}, d={head.d}")
        if table.s != head.s:
            raise ValueError(f"table has s={table.s}, head has s={head.s}")
    return tables, phis


def describe_fc(head: FcHead, phi) -> Descriptor:
    phi = _as_tensor(phi)
    head.check(phi)
    return Descriptor.from_raw(head.W @ phi.reshape(-1) + head.w)


def describe_fc_split(head: FcHead, phi) -> Descriptor:
    """Same descriptor as :func:`describe_fc`, summed block by block."""
    phi = _as_tensor(phi)
    head.check(phi)
    n2 = head.n * head.n
    rows = phi.reshape(n2, head.d)
    w_split = head.w / n2
    raw = np.zeros(head.D)
    for W_p, v in zip(head.blocks(), rows):
        raw += W_p @ v + w_split
    return Descriptor.from_raw(raw)


def describe_spatial_naive(head: DescriptorHead, tables, phis) -> Descriptor:
    """Materialize every per-position Kronecker encoding, then project."""
    tables, phis = _spatial_inputs(head, tables, phis)
    blocks = []
    for table, phi in zip(tables, phis):
        rows = phi.reshape(-1, head.d)
        # (n^2, d * K): one weighted encoding per position
        encodings = np.stack([np.kron(v, f) for v, f in zip(rows, table.F)])
        blocks.append(encodings.sum(axis=0))
    n2 = tables[0].n ** 2
    return Descriptor.from_raw(head.M @ np.concatenate(blocks) + n2 * head.m)


def _encode(tables, phis, d: int) -> np.ndarray:
    return np.concatenate([(phi.reshape(-1, d).T @ t.F).reshape(-1) for t, phi in zip(tables, phis)])


def describe_spatial_efficient(head: DescriptorHead, tables, phis) -> Descriptor:
    tables, phis = _spatial_inputs(head, tables, phis)
    n2 = tables[0].n ** 2
    return Descriptor.from_raw(head.M @ _encode(tables, phis, head.d) + n2 * head.m)


def encode_batch(tables, phis_batch) -> np.ndarray:
    """Aggregated encodings ``vec(Phi^T F)`` for a batch.

    ``phis_batch`` is ``(B, n, n, d)``, or ``(B, n, n, 2d)`` for two tables
    (first ``d`` channels go with the first table). Returns ``(B, E)``.
    """
    x = np.asarray(phis_batch, dtype=np.float64)
    B, n = x.shape[0], x.shape[1]
    d = x.shape[3] // len(tables)
    parts = []
    for k, table in enumerate(tables):
        rows = x[..., k * d : (k + 1) * d].reshape(B, n * n, d)
        parts.append(np.einsum("bpd,pk->bdk", rows, table.F).reshape(B, -1))
    return np.concatenate(parts, axis=1)


def describe_batch(head: DescriptorHead, phis_batch, threads: int | None = None) -> np.ndarray:
    """Raw descriptors ``(B, D)`` for a batch of tensors.

    Work is split into fixed chunks, so results do not depend on how many
    threads run them. ``threads`` defaults to ``$EMK_THREADS`` or 1.
    """
    x = np.asarray(phis_batch, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"batch must be (B, n, n, channels), got {x.shape}")
    tables = head.tables(x.shape[1])
    if x.shape[3] == head.d and len(tables) == 2:
        x = np.concatenate([x, x], axis=3)
    if x.shape[3] != head.d * len(tables):
        raise ValueError(f"batch has {x.shape[3]} channels, head expects {head.d * len(tables)}")
    n2 = x.shape[1] ** 2
    if threads is None:
        threads = int(os.environ.get("EMK_THREADS", "1") or 1)
    chunks = [x[i : i + 64] for i in range(0, len(x), 64)]

    def run(chunk):
        return encode_batch(tables, chunk) @ head.M.T + n2 * head.m

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(run, chunks))
    else:
        out = [run(c) for c in chunks]
    return np.concatenate(out) if out else np.zeros((0, head.D))


def describe_sum(phi) -> Descriptor:
    phi = _as_tensor(phi)
    return Descriptor.from_raw(phi.reshape(-1, phi.shape[2]).sum(axis=0))


def describe_cat(phi) -> Descriptor:
    phi = _as_tensor(phi)
    return Descriptor.from_raw(phi.reshape(-1).copy())


def _position_codes(head, phi, tables=None) -> np.ndarray:
    """Per-position affine encodings whose sum over positions is the raw descriptor."""
    if isinstance(head, FcHead):
        head.check(phi)
        n2 = head.n * head.n
        rows = phi.reshape(n2, head.d)
        return np.einsum("pDd,pd->pD", head.blocks(), rows) + head.w / n2
    if tables is None:
        tables = head.tables(phi[0].shape[0] if isinstance(phi, tuple) else phi.shape[0])
    tables, phis = _spatial_inputs(head, tables, phi)
    K = tables[0].dim
    codes = np.tile(head.m, (tables[0].n ** 2, 1))
    for k, (table, p) in enumerate(zip(tables, phis)):
        M_block = head.M[:, k * head.block_dim : (k + 1) * head.block_dim].reshape(head.D, head.d, K)
        codes += np.einsum("Dik,pi,pk->pD", M_block, p.reshape(-1, head.d), table.F, optimize=True)
    return codes


def _coerce(phi):
    if isinstance(phi, (tuple, list)):
        return tuple(_as_tensor(p) for p in phi)
    return _as_tensor(phi)


def match_kernel_similarity(head, phi_a, phi_b, tables=None):
    """Pairwise position similarities between two patches.

    Returns ``(total, map)`` with ``map[p, q]`` the inner product of the
    affine per-position encodings of ``a`` at ``p`` and ``b`` at ``q``. The
    bias is attributed once per position, so ``map.sum()`` equals the inner
    product of the two raw descriptors.
    """
    phi_a, phi_b = _coerce(phi_a), _coerce(phi_b)
    shape_a = phi_a[0].shape if isinstance(phi_a, tuple) else phi_a.shape
    shape_b = phi_b[0].shape if isinstance(phi_b, tuple) else phi_b.shape
    if shape_a != shape_b:
        raise ValueError(f"patches have different tensor shapes {shape_a} and {shape_b}")
    codes_a = _position_codes(head, phi_a, tables)
    codes_b = _position_codes(head, phi_b, tables)
    sim = codes_a @ codes_b.T
    return float(sim.sum()), sim


def similarity_heatmap(head, phi_a, phi_b, p, tables=None) -> np.ndarray:
    """Similarity of position ``p`` of ``a`` to every position of ``b``, rescaled to [0, 1]."""
    _, sim = match_kernel_similarity(head, phi_a, phi_b, tables)
    n = int(round(np.sqrt(sim.shape[0])))
    i, j = (int(v) for v in p)
    if not (1 <= i <= n and 1 <= j <= n):
        raise ValueError(f"position {tuple(p)} is off the {n}x{n} grid")
    row = sim[(i - 1) * n + (j - 1)].reshape(n, n)
    lo, hi = row.min(), row.max()
    if hi == lo:
        return np.zeros_like(row)
    return np.clip((row - lo) / (hi - lo), 0.0, 1.0)


def memory_reduction_factor(n: int, d: int, s: int) -> float:
    """Ratio of naive to efficient transient storage for one descriptor."""
    K = (2 * s + 1) ** 2
    return (n * n * d * K) / (n * n * (d + K))


MODELS = ("hardnet", "xy", "rhotheta", "combined", "star_combined")


def count_parameters(model: str, s: int = 2, N: int = 32, d: int = 128, D: int = 128,
                     fc_bias: bool = False, architecture=HARDNET_ARCH) -> dict:
    """Parameter counts of one model configuration.

    ``fc_bias`` adds ``D`` to the FC layer; the published HardNet counts
    exclude it.
    """
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}; choose from {MODELS}")
    conv = sum(spec.n_params for spec in architecture)
    n = output_size(architecture, N)
    report = {"model": model, "N": N, "n": n, "d": d, "D": D, "phi": conv}
    if model == "hardnet":
        report["s"] = None
        report["head"] = D * n * n * d + (D if fc_bias else 0)
    else:
        K = (2 * s + 1) ** 2
        blocks = 2 if model in ("combined", "star_combined") else 1
        report["s"] = s
        report["head"] = D * blocks * d * K + D
    if model == "star_combined":
        report["phi_tilde"] = conv
    report["total"] = conv + report.get("phi_tilde", 0) + report["head"]
    return report


def parameter_report(architecture=HARDNET_ARCH) -> dict:
    """Every count of the published parameter table, keyed by model."""
    layers = [
        {"layer": k + 1, "shape": [spec.in_channels, spec.out_channels, 3, 3], "params": spec.n_params}
        for k, spec in enumerate(architecture)
    ]
    rows = [count_parameters("hardnet", N=N, architecture=architecture) for N in (32, 64)]
    for model in MODELS[1:]:
        rows += [count_parameters(model, s=s, architecture=architecture) for s in (1, 2)]
    return {
        "conv_layers": layers,
        "conv_total": sum(item["params"] for item in layers),
        "models": rows,
    }
