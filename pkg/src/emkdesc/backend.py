"""Forward-only inference of the convolutional part and tensor/patch I/O.

Each layer is a bias-free 3x3 convolution with padding 1, followed by
batch normalization in inference mode and ReLU.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, FormatError

__all__ = [
    "BN_EPS",
    "ConvLayer",
    "ConvLayerSpec",
    "HARDNET_ARCH",
    "export_tensor",
    "forward",
    "import_tensor",
    "output_size",
    "random_conv_layers",
    "random_orthogonal_init",
    "read_patch",
]

BN_EPS = 1e-5
TENSOR_MAGIC = b"EMKT"


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def n_params(self) -> int:
        return self.in_channels * self.out_channels * 9

    def out_size(self, size: int) -> int:
        return (size + 2 - 3) // self.stride + 1

    def to_dict(self) -> dict:
        return {"in": self.in_channels, "out": self.out_channels, "stride": self.stride}

    @classmethod
    def from_dict(cls, data: dict) -> "ConvLayerSpec":
        return cls(int(data["in"]), int(data["out"]), int(data["stride"]))


# Strides are not listed anywhere; (1, 1, 2, 1, 2, 1) takes N=32 to n=8.
HARDNET_ARCH = (
    ConvLayerSpec(1, 32, 1),
    ConvLayerSpec(32, 32, 1),
    ConvLayerSpec(32, 64, 2),
    ConvLayerSpec(64, 64, 1),
    ConvLayerSpec(64, 128, 2),
    ConvLayerSpec(128, 128, 1),
)


def output_size(architecture, N: int) -> int:
    size = N
    for spec in architecture:
        size = spec.out_size(size)
    return size


@dataclass(eq=False)
class ConvLayer:
    """Weights of one layer: kernel ``(out, in, 3, 3)`` and BN statistics."""

    spec: ConvLayerSpec
    weight: np.ndarray
    bn_mean: np.ndarray = field(default=None)
    bn_var: np.ndarray = field(default=None)
    bn_scale: np.ndarray = field(default=None)
    bn_shift: np.ndarray = field(default=None)
    eps: float = BN_EPS

    def __post_init__(self):
        out, inp = self.spec.out_channels, self.spec.in_channels
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.shape != (out, inp, 3, 3):
            raise FormatError(
                f"conv weight shape {self.weight.shape} does not match {(out, inp, 3, 3)}"
            )
        defaults = {"bn_mean": 0.0, "bn_var": 1.0, "bn_scale": 1.0, "bn_shift": 0.0}
        for name, fill in defaults.items():
            value = getattr(self, name)
            value = np.full(out, fill) if value is None else np.asarray(value, dtype=np.float64)
            if value.shape != (out,):
                raise FormatError(f"{name} has shape {value.shape}, expected {(out,)}")
            setattr(self, name, value)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Apply conv -> BN -> ReLU to an ``(H, W, in)`` array."""
        stride = self.spec.stride
        padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        # windows: (H', W', in, 3, 3)
        windows = sliding_window_view(padded, (3, 3), axis=(0, 1))[::stride, ::stride]
        y = np.einsum("hwcij,ocij->hwo", windows, self.weight, optimize=True)
        y = (y - self.bn_mean) / np.sqrt(self.bn_var + self.eps) * self.bn_scale + self.bn_shift
        return np.maximum(y, 0.0)


def forward(layers, patch, expected_n: int | None = None) -> np.ndarray:
    """Run the convolutional part on an ``(N, N)`` patch; returns ``(n, n, d)``."""
    x = np.asarray(patch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ConfigurationError(f"patch must be square 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("patch contains non-finite values")
    if expected_n is not None:
        got = output_size([layer.spec for layer in layers], x.shape[0])
        if got != expected_n:
            raise ConfigurationError(f"patch side {x.shape[0]} yields n={got}, expected {expected_n}")
    x = x[:, :, None]
    for layer in layers:
        if x.shape[2] != layer.spec.in_channels:
            raise FormatError(
                f"layer expects {layer.spec.in_channels} input channels, got {x.shape[2]}"
            )
        x = layer(x)
    return x


def random_orthogonal_init(shape, seed) -> np.ndarray:
    """Seeded matrix with orthonormal rows (``D <= E``) or columns (``D > E``).

    QR of a Gaussian matrix with the sign of ``diag(R)`` folded back in, so
    the result is Haar-distributed and deterministic per seed.
    """
    rows, cols = (int(v) for v in shape)
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q.T.copy() if rows <= cols else q


def random_conv_layers(architecture=HARDNET_ARCH, seed=0) -> list[ConvLayer]:
    """Orthogonally initialized layers with identity BN statistics."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in architecture:
        flat = random_orthogonal_init((spec.out_channels, spec.in_channels * 9), rng.integers(2**63))
        layers.append(ConvLayer(spec, flat.reshape(spec.out_channels, spec.in_channels, 3, 3)))
    return layers


def export_tensor(path, tensor) -> None:
    t = np.asarray(tensor)
    if t.ndim != 3 or t.shape[0] != t.shape[1]:
        raise ValueError(f"feature tensor must be (n, n, d), got {t.shape}")
    n, _, d = t.shape
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC + struct.pack("<II", n, d))
        fh.write(t.astype("<f4").tobytes())


def import_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: not an EMKT tensor file")
    n, d = struct.unpack_from("<II", data, 4)
    expected = 12 + 4 * n * n * d
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for n={n}, d={d}, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(n, n, d).copy()


def read_patch(path) -> np.ndarray:
    """Read an 8-bit binary PGM patch scaled to [0, 1]."""
    from PIL import Image

    with open(path, "rb") as fh:
        if fh.read(2) != b"P5":
            raise FormatError(f"{path}: expected a binary (P5) PGM")
    try:
        with Image.open(path) as img:
            if img.format != "PPM" or img.mode != "L":
                raise FormatError(f"{path}: expected an 8-bit grayscale PGM")
            pixels = np.asarray(img, dtype=np.float64)
    except (OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: {exc}") from exc
    return pixels / 255.0
