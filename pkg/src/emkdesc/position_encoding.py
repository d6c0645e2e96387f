"""Spatial embeddings of grid positions and the precomputed position table.

Positions ``p = (i, j)`` use 1-based grid coordinates. Flat index of ``p`` is
``(i - 1) * n + (j - 1)``, which is also the row-major order of an
``(n, n, d)`` feature tensor reshaped to ``(n*n, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .featuremap import AngleMapping, FeatureMapSpec, embed, to_angle

__all__ = [
    "CARTESIAN",
    "POLAR",
    "GridGeometry",
    "PositionTable",
    "build_position_table",
    "center_weight",
    "encode_position",
    "grid_geometry",
    "position_angles",
]

CARTESIAN = "cartesian"
POLAR = "polar"
VARIANTS = (CARTESIAN, POLAR)


@dataclass(frozen=True)
class GridGeometry:
    n: int

    @property
    def center(self) -> float:
        return (self.n + 1) / 2.0

    @property
    def rho_max(self) -> float:
        return math.sqrt(2.0) * (self.n - 1) / 2.0

    def check(self, p) -> tuple[int, int]:
        i, j = (int(v) for v in p)
        if not (1 <= i <= self.n and 1 <= j <= self.n):
            raise ValueError(f"position {tuple(p)} is off the {self.n}x{self.n} grid")
        return i, j

    def rho(self, p) -> float:
        i, j = self.check(p)
        c = self.center
        return math.hypot(i - c, j - c)

    def theta(self, p) -> float:
        i, j = self.check(p)
        c = self.center
        return math.atan2(j - c, i - c)

    def positions(self):
        return [(i, j) for i in range(1, self.n + 1) for j in range(1, self.n + 1)]


def grid_geometry(n: int) -> GridGeometry:
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise ValueError(f"grid side must be a positive integer, got {n}")
    return GridGeometry(int(n))


def center_weight(geom: GridGeometry, p) -> float:
    """``exp(-(rho_p / rho_max)^2)``; 1 at the centre and exp(-1) at corners."""
    rho = geom.rho(p)
    if rho == 0.0:
        return 1.0
    return math.exp(-((rho / geom.rho_max) ** 2))


def position_angles(variant: str, geom: GridGeometry, p) -> tuple[float, float]:
    """The two angles fed to the feature maps for position ``p``."""
    if variant == CARTESIAN:
        i, j = geom.check(p)
        mapping = AngleMapping(1.0, float(geom.n))
        return to_angle(mapping, i), to_angle(mapping, j)
    if variant == POLAR:
        rho = geom.rho(p)
        # clamp float noise at the corners
        rho = min(rho, geom.rho_max)
        return (
            to_angle(AngleMapping(0.0, geom.rho_max), rho),
            to_angle(AngleMapping(periodic=True), geom.theta(p)),
        )
    raise ValueError(f"unknown position variant {variant!r}")


def _check_pair(spec_pair) -> tuple[FeatureMapSpec, FeatureMapSpec]:
    first, second = spec_pair
    if first.s != second.s:
        raise ValueError(f"feature maps disagree on s ({first.s} vs {second.s})")
    return first, second


def encode_position(variant: str, geom: GridGeometry, spec_pair, p) -> np.ndarray:
    """``f(a_p) kron f(b_p)`` for the variant's two angles, first-factor-major."""
    first, second = _check_pair(spec_pair)
    a, b = position_angles(variant, geom, p)
    return np.kron(embed(first, a), embed(second, b))


@dataclass(frozen=True, eq=False)
class PositionTable:
    variant: str
    n: int
    s: int
    F: np.ndarray
    weights: np.ndarray

    @property
    def dim(self) -> int:
        return self.F.shape[1]


def build_position_table(variant: str, geom: GridGeometry, spec_pair, weighted: bool = True) -> PositionTable:
    first, second = _check_pair(spec_pair)
    positions = geom.positions()
    if weighted:
        w = np.array([center_weight(geom, p) for p in positions])
    else:
        w = np.ones(len(positions))
    F = np.stack([encode_position(variant, geom, (first, second), p) for p in positions])
    F *= w[:, None]
    F.setflags(write=False)
    w.setflags(write=False)
    return PositionTable(variant=variant, n=geom.n, s=first.s, F=F, weights=w)
