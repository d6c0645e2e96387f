"""Explicit feature maps approximating the normalized Von Mises kernel.

A map ``f`` with ``s`` frequencies sends an angle to a unit vector in
``R^(2s+1)`` such that ``f(a) . f(b) = sum_i u_i cos(i (a - b))``, a truncated
Fourier series of ``exp(kappa * (cos(a - b) - 1))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AngleMapping",
    "FeatureMapSpec",
    "bessel_i",
    "build_feature_map_spec",
    "embed",
    "kernel_value",
    "to_angle",
]

MAX_KAPPA = 32.0


def bessel_i(order: int, x: float) -> float:
    """Modified Bessel function of the first kind ``I_order(x)``.

    Power series ``sum_k (x/2)^(2k+order) / (k! (k+order)!)``, stopped once a
    term drops below 1e-16 of the running sum. All terms are positive for
    ``x >= 0`` so there is no cancellation; accurate for ``x <= 32``.
    """
    if order < 0:
        raise ValueError(f"order must be non-negative, got {order}")
    if x < 0:
        raise ValueError(f"x must be non-negative, got {x}")
    half = x / 2.0
    term = half**order / math.factorial(order)
    total = term
    k = 0
    while term > 1e-16 * total:
        k += 1
        term *= half * half / (k * (k + order))
        total += term
    return total


@dataclass(frozen=True)
class FeatureMapSpec:
    """Von Mises feature map parameters.

    ``u`` holds the Fourier coefficients ``u_0 .. u_s``; they are positive and
    sum to one so the embedded kernel equals 1 at zero offset.
    """

    kappa: float
    s: int
    u: tuple[float, ...]

    @property
    def dim(self) -> int:
        return 2 * self.s + 1

    def to_dict(self) -> dict:
        return {"kappa": self.kappa, "s": self.s, "u": list(self.u)}

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureMapSpec":
        spec = build_feature_map_spec(float(data["kappa"]), int(data["s"]))
        if "u" in data and tuple(float(v) for v in data["u"]) != spec.u:
            raise ValueError("stored coefficients do not match kappa and s")
        return spec


def build_feature_map_spec(kappa: float, s: int) -> FeatureMapSpec:
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if kappa > MAX_KAPPA:
        raise ValueError(f"kappa above {MAX_KAPPA} is not supported, got {kappa}")
    if isinstance(s, bool) or int(s) != s or s < 1:
        raise ValueError(f"s must be a positive integer, got {s}")
    s = int(s)
    bessel = [bessel_i(i, kappa) for i in range(s + 1)]
    weights = [bessel[0]] + [2.0 * b for b in bessel[1:]]
    z = math.fsum(weights)
    return FeatureMapSpec(kappa=float(kappa), s=s, u=tuple(w / z for w in weights))


def embed(spec: FeatureMapSpec, alpha):
    """Embed an angle (or an array of angles) with the feature map.

    Component order: ``sqrt(u_0)``, the ``s`` cosine terms, then the ``s``
    sine terms. Array input of shape ``S`` gives output of shape
    ``S + (2s+1,)``.
    """
    u = np.asarray(spec.u)
    root = np.sqrt(u[1:])
    freqs = np.arange(1, spec.s + 1)
    a = np.asarray(alpha, dtype=np.float64)[..., None] * freqs
    head = np.broadcast_to(np.sqrt(u[0]), a.shape[:-1] + (1,))
    return np.concatenate([head, root * np.cos(a), root * np.sin(a)], axis=-1)


def kernel_value(spec: FeatureMapSpec, delta):
    """Truncated Von Mises kernel ``sum_i u_i cos(i * delta)``."""
    u = np.asarray(spec.u)
    d = np.asarray(delta, dtype=np.float64)[..., None]
    out = np.sum(u * np.cos(d * np.arange(spec.s + 1)), axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AngleMapping:
    """Affine map of a coordinate range onto ``[0, target_span]``.

    Periodic mappings pass the coordinate through unchanged (it is already an
    angle). A zero-width domain maps every coordinate to 0.
    """

    domain_min: float = 0.0
    domain_max: float = math.pi
    target_span: float = math.pi
    periodic: bool = False

    def __post_init__(self):
        if not self.periodic and self.domain_max < self.domain_min:
            raise ValueError("domain_max must not be below domain_min")


def to_angle(mapping: AngleMapping, coordinate: float) -> float:
    if mapping.periodic:
        return float(coordinate)
    lo, hi = mapping.domain_min, mapping.domain_max
    if not lo <= coordinate <= hi:
        raise ValueError(f"coordinate {coordinate} outside [{lo}, {hi}]")
    if hi == lo:
        return 0.0
    return mapping.target_span * (coordinate - lo) / (hi - lo)
