"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 data or format problem, 3 numerical failure.
Options may also come from a JSON ``--config`` file; flags win over it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import MODELS, count_parameters, describe_batch, encode_batch, similarity_heatmap, parameter_report
from .backend import import_tensor, read_patch
from .evaluation import evaluate_matching, evaluate_retrieval, evaluate_verification
from .exceptions import ConfigurationError, FormatError, NormalizationError
from .formats import DescriptorModel, load_model, read_descriptors, save_model, write_descriptors
from .learning import TrainConfig, train_head, write_loss_trace
from .selfcheck import run_selfcheck

log = logging.getLogger("emkdesc")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


DEFAULTS = {
    "variant": "combined",
    "s": 2,
    "N": 32,
    "D": 128,
    "kappa": 8.0,
    "seed": 0,
    "separate": True,
    "format": "text",
    "epochs": 10,
    "batch_pairs": 16,
    "lr": 10.0,
    "momentum": 0.9,
    "weight_decay": 1e-4,
}


def _setting(args, name):
    value = getattr(args, name, None)
    if value is None:
        value = args.config_values.get(name, DEFAULTS.get(name))
    return value


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("EMK_THREADS", "1")))
    except ValueError:
        raise UsageError("EMK_THREADS must be an integer") from None


def _input_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(f for f in p.iterdir() if f.suffix.lower() in (".pgm", ".emkt"))
        elif p.exists():
            files.append(p)
        else:
            raise FormatError(f"{p}: no such file")
    if not files:
        raise FormatError("no input patches found")
    return files


def _features(model: DescriptorModel, path: Path):
    """Feature tensor(s) for a PGM patch or a pre-computed EMKT tensor."""
    if path.suffix.lower() == ".emkt":
        phi = import_tensor(path)
        if model.head.variant == "combined" and phi.shape[2] == 2 * model.head.d:
            return (phi[..., : model.head.d], phi[..., model.head.d :])
        return (phi, phi) if model.head.variant == "combined" else phi
    return model.features(read_patch(path))


def _stack(feats) -> np.ndarray:
    if isinstance(feats, tuple):
        return np.concatenate(feats, axis=2)
    return feats


def _require_model(args) -> DescriptorModel:
    path = _setting(args, "model")
    if not path:
        raise UsageError("--model is required")
    if not Path(path).is_file():
        raise FormatError(f"{path}: model file not found")
    return load_model(path)


def cmd_describe(args) -> int:
    model = _require_model(args)
    out = _setting(args, "out")
    if not out:
        raise UsageError("--out is required")
    files = _input_files(args.inputs)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        feats = list(pool.map(lambda f: _stack(_features(model, f)), files))
    raw = describe_batch(model.head, np.stack(feats), threads=_threads())
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("an input produced an all-zero descriptor")
    write_descriptors(out, raw / norms)
    Path(str(out) + ".names.txt").write_text("".join(f"{f.name}\n" for f in files))
    log.info("wrote %d descriptors of dimension %d to %s", len(files), raw.shape[1], out)
    return 0


def _parse_position(text) -> tuple[int, int]:
    try:
        i, j = (int(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"position must look like 'i,j', got {text!r}") from None
    return i, j


def write_pgm(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(image.astype(np.uint8), mode="L").save(path, format="PPM")


def cmd_simmap(args) -> int:
    model = _require_model(args)
    out = _setting(args, "out")
    if not out:
        raise UsageError("--out is required")
    fa = _features(model, Path(args.patch_a))
    fb = _features(model, Path(args.patch_b))
    heat = similarity_heatmap(model.head, fa, fb, _parse_position(args.pos))
    write_pgm(out, np.rint(heat * 255))
    with open(Path(out).with_suffix(".csv"), "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in heat])
    return 0


def cmd_params(args) -> int:
    variant = args.variant or args.config_values.get("variant")
    if variant is not None:
        if variant not in MODELS:
            raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(MODELS)}")
        report = {"models": [count_parameters(variant, s=int(_setting(args, "s")), N=int(_setting(args, "N")))]}
    else:
        report = parameter_report()
    if _setting(args, "format") == "json":
        print(json.dumps(report, indent=2))
        return 0
    if "conv_layers" in report:
        for layer in report["conv_layers"]:
            print(f"conv{layer['layer']}\t{layer['shape']}\t{layer['params']}")
        print(f"conv total\t{report['conv_total']}")
    for row in report["models"]:
        tag = f"N={row['N']}" if row["model"] == "hardnet" else f"s={row['s']}"
        tilde = f"\tphi_tilde={row['phi_tilde']}" if "phi_tilde" in row else ""
        print(f"{row['model']}\t{tag}\tphi={row['phi']}{tilde}\thead={row['head']}\ttotal={row['total']}")
    return 0


def cmd_eval(args) -> int:
    path = _setting(args, "descriptors")
    if not path:
        raise UsageError("--descriptors is required")
    x = read_descriptors(path)
    names_file = Path(str(path) + ".names.txt")
    names = names_file.read_text().splitlines() if names_file.exists() else None
    reports = []
    for key, fn in (("pairs", evaluate_verification), ("retrieval", evaluate_retrieval),
                    ("matching", evaluate_matching)):
        labels = _setting(args, key)
        if labels:
            reports += fn(x, labels, names)
    if not reports:
        raise UsageError("give at least one of --pairs, --retrieval, --matching")
    text = json.dumps(reports, indent=2)
    out = _setting(args, "out")
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_selftest(args) -> int:
    results = run_selfcheck(int(_setting(args, "seed")))
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    failed = sum(not ok for _, ok in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else EXIT_NUMERIC


def cmd_init(args) -> int:
    out = _setting(args, "out")
    if not out:
        raise UsageError("--out is required")
    variant = _setting(args, "variant")
    if variant not in ("xy", "rhotheta", "combined"):
        raise UsageError(f"unknown variant {variant!r}")
    kappa = _setting(args, "kappa")
    model = DescriptorModel.random(variant=variant, s=int(_setting(args, "s")), N=int(_setting(args, "N")),
                                   D=int(_setting(args, "D")), kappas=kappa,
                                   separate=bool(_setting(args, "separate")), seed=int(_setting(args, "seed")))
    save_model(out, model)
    return 0


def cmd_train(args) -> int:
    model = _require_model(args)
    out, labels_path = _setting(args, "out"), _setting(args, "labels")
    if not out or not labels_path:
        raise UsageError("--labels and --out are required")
    try:
        with open(labels_path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and r[0] != "path"]
    except OSError as exc:
        raise FormatError(str(exc)) from exc
    if any(len(r) != 2 for r in rows) or not rows:
        raise FormatError(f"{labels_path}: expected rows of 'path,label'")
    base = Path(labels_path).parent
    feats = np.stack([_stack(_features(model, base / r[0])) for r in rows])
    labels = np.array([r[1] for r in rows])
    config = TrainConfig(variant=model.head.variant, s=model.head.s, D=model.head.D,
                         epochs=int(_setting(args, "epochs")), batch_pairs=int(_setting(args, "batch_pairs")),
                         lr=float(_setting(args, "lr")), momentum=float(_setting(args, "momentum")),
                         weight_decay=float(_setting(args, "weight_decay")), seed=int(_setting(args, "seed")))
    Z = encode_batch(model.head.tables(feats.shape[1]), feats)
    trace = train_head(model.head, Z, labels, feats.shape[1], config)
    if not np.all(np.isfinite(model.head.M)):
        raise NormalizationError("training diverged")
    save_model(out, model)
    trace_path = _setting(args, "trace")
    if trace_path:
        write_loss_trace(trace_path, trace)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default option values")
    common.add_argument("--model", help="model file")
    common.add_argument("--variant", help="descriptor variant")
    common.add_argument("--s", type=int, help="feature map frequencies")
    common.add_argument("--out", help="output path")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="emkdesc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("describe", parents=[common], help="write descriptors of PGM patches or EMKT tensors")
    p.add_argument("inputs", nargs="+", help="files or directories")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("simmap", parents=[common], help="similarity heat-map of one position against a patch")
    p.add_argument("patch_a")
    p.add_argument("patch_b")
    p.add_argument("--pos", required=True, help="grid position 'i,j' (1-based)")
    p.set_defaults(func=cmd_simmap)

    p = sub.add_parser("eval", parents=[common], help="evaluate a descriptor file against label CSVs")
    p.add_argument("--descriptors")
    p.add_argument("--pairs", help="CSV id_a,id_b,is_match")
    p.add_argument("--retrieval", help="CSV query_id,pool_id,is_relevant")
    p.add_argument("--matching", help="CSV group,query_id,candidate_id,is_correspondence")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", parents=[common], help="parameter counts per model")
    p.add_argument("--N", type=int, help="patch side")
    p.add_argument("--format", choices=("text", "json"))
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("selftest", parents=[common], help="run the built-in invariant checks")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("init", parents=[common], help="write an orthogonally initialized model")
    p.add_argument("--N", type=int, help="patch side")
    p.add_argument("--D", type=int, help="descriptor dimension")
    p.add_argument("--kappa", type=float, help="Von Mises concentration for every coordinate")
    p.add_argument("--shared", dest="separate", action="store_false", default=None,
                   help="combined variant: one network for both encodings")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", parents=[common], help="train the head of a model on labelled patches")
    p.add_argument("--labels", help="CSV path,label (paths relative to the CSV)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-pairs", dest="batch_pairs", type=int)
    p.add_argument("--trace", help="write the loss trace CSV here")
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.config_values = {}
        if args.config:
            with open(args.config) as fh:
                args.config_values = json.load(fh)
            if not isinstance(args.config_values, dict):
                raise UsageError("config file must hold a JSON object")
        return args.func(args)
    except UsageError as exc:
        print(f"emkdesc: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NormalizationError, ArithmeticError, FloatingPointError) as exc:
        print(f"emkdesc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ConfigurationError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"emkdesc: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
