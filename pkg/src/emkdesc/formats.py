"""Model and descriptor files.

Model file layout::

    b"EMKM" | u32 manifest length | manifest (UTF-8 JSON) | f32 blobs

Blob offsets in the manifest are relative to the first byte after the
manifest. All integers and floats are little-endian. Descriptor files are
``b"EMKD" | u32 count | u32 D | count*D f32``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregation import Descriptor, DescriptorHead, describe_spatial_efficient
from .backend import BN_EPS, HARDNET_ARCH, ConvLayer, ConvLayerSpec, forward, output_size, random_conv_layers, random_orthogonal_init
from .exceptions import ConfigurationError, FormatError
from .featuremap import FeatureMapSpec

__all__ = [
    "DescriptorModel",
    "FORMAT_VERSION",
    "load_model",
    "read_descriptors",
    "save_model",
    "write_descriptors",
]

FORMAT_VERSION = 1
MODEL_MAGIC = b"EMKM"
DESCRIPTOR_MAGIC = b"EMKD"
_BN_FIELDS = ("bn_mean", "bn_var", "bn_scale", "bn_shift")


@dataclass(eq=False)
class DescriptorModel:
    """Convolutional part(s) plus a spatial head, for patches of side ``N``.

    ``phi_tilde`` is the separate network feeding the polar block of a
    combined head; when it is ``None`` both blocks share ``phi``.
    """

    head: DescriptorHead
    phi: list
    N: int = 32
    phi_tilde: list | None = None

    def __post_init__(self):
        if self.phi_tilde is not None and self.head.variant != "combined":
            raise ConfigurationError("a separate polar network needs a combined head")
        for layers in filter(None, (self.phi, self.phi_tilde)):
            if layers[-1].spec.out_channels != self.head.d:
                raise ConfigurationError(
                    f"network outputs {layers[-1].spec.out_channels} channels, head expects d={self.head.d}"
                )

    @property
    def n(self) -> int:
        return output_size([layer.spec for layer in self.phi], self.N)

    def features(self, patch):
        phi = forward(self.phi, patch, expected_n=self.n)
        if self.head.variant != "combined":
            return phi
        if self.phi_tilde is None:
            return (phi, phi)
        return (phi, forward(self.phi_tilde, patch, expected_n=self.n))

    def describe(self, patch) -> Descriptor:
        return describe_spatial_efficient(self.head, self.head.tables(self.n), self.features(patch))

    @classmethod
    def random(cls, variant="combined", s=2, N=32, D=128, kappas=None, weighted=True,
               separate=True, seed=0, architecture=HARDNET_ARCH) -> "DescriptorModel":
        """Orthogonally initialized model, deterministic per seed."""
        rng = np.random.default_rng(seed)
        d = architecture[-1].out_channels
        blocks = 2 if variant == "combined" else 1
        E = blocks * d * (2 * s + 1) ** 2
        head = DescriptorHead(variant, random_orthogonal_init((D, E), rng.integers(2**63)),
                              np.zeros(D), d=d, s=s, kappas=kappas, weighted=weighted)
        phi = random_conv_layers(architecture, rng.integers(2**63))
        tilde = random_conv_layers(architecture, rng.integers(2**63)) if variant == "combined" and separate else None
        return cls(head=head, phi=phi, N=N, phi_tilde=tilde)


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_model(path, model: DescriptorModel) -> None:
    head = model.head
    blobs, layout = [], {}
    offset = 0

    def add(name, array):
        nonlocal offset
        data = _f32(array)
        layout[name] = {"offset": offset, "shape": list(np.shape(array))}
        blobs.append(data)
        offset += len(data)

    networks = [("phi", model.phi)]
    if model.phi_tilde is not None:
        networks.append(("phi_tilde", model.phi_tilde))
    for name, layers in networks:
        for k, layer in enumerate(layers):
            add(f"{name}.{k}.weight", layer.weight)
            for field in _BN_FIELDS:
                add(f"{name}.{k}.{field}", getattr(layer, field))
    add("M", head.M)
    add("m", head.m)

    specs = [spec for pair in head.feature_maps() for spec in pair]
    manifest = {
        "format_version": FORMAT_VERSION,
        "variant": head.variant,
        "N": model.N,
        "n": model.n,
        "d": head.d,
        "D": head.D,
        "s": head.s,
        "kappa": list(head.kappas),
        "feature_maps": [spec.to_dict() for spec in specs],
        "weighted": head.weighted,
        "bn_eps": model.phi[0].eps,
        "pixel_standardization": False,
        "conv_layout": "OIHW",
        "conv": {name: [layer.spec.to_dict() for layer in layers] for name, layers in networks},
        "blobs": layout,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<I", len(header)) + header)
        for data in blobs:
            fh.write(data)


def load_model(path) -> DescriptorModel:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not an EMKM model file")
    (length,) = struct.unpack_from("<I", raw, 4)
    try:
        manifest = json.loads(raw[8 : 8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {manifest.get('format_version')}")
    body = raw[8 + length :]

    def blob(name):
        try:
            entry = manifest["blobs"][name]
        except KeyError:
            raise FormatError(f"{path}: missing blob {name!r}") from None
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start < 0 or start + 4 * count > len(body):
            raise FormatError(f"{path}: blob {name!r} runs past end of file")
        return np.frombuffer(body, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float64)

    try:
        eps = float(manifest.get("bn_eps", BN_EPS))
        networks = {}
        for name, specs in manifest["conv"].items():
            layers = []
            for k, spec in enumerate(specs):
                stats = {field: blob(f"{name}.{k}.{field}") for field in _BN_FIELDS}
                layers.append(ConvLayer(ConvLayerSpec.from_dict(spec), blob(f"{name}.{k}.weight"), eps=eps, **stats))
            networks[name] = layers
        for stored in manifest.get("feature_maps", []):
            FeatureMapSpec.from_dict(stored)
        head = DescriptorHead(manifest["variant"], blob("M"), blob("m"), d=int(manifest["d"]),
                              s=int(manifest["s"]), kappas=tuple(manifest["kappa"]),
                              weighted=bool(manifest["weighted"]))
        model = DescriptorModel(head=head, phi=networks["phi"], N=int(manifest["N"]),
                                phi_tilde=networks.get("phi_tilde"))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: incomplete manifest ({exc})") from exc
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: {exc}") from exc
    if model.n != manifest["n"] or head.D != manifest["D"]:
        raise FormatError(f"{path}: manifest n/D disagree with stored weights")
    return model


def write_descriptors(path, descriptors) -> None:
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"descriptors must be (count, D), got {x.shape}")
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC + struct.pack("<II", *x.shape))
        fh.write(_f32(x))


def read_descriptors(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != DESCRIPTOR_MAGIC:
        raise FormatError(f"{path}: not an EMKD descriptor file")
    count, D = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * count * D:
        raise FormatError(f"{path}: size does not match count={count}, D={D}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(count, D).astype(np.float64)
