"""Regenerate tests/fixtures. Golden metric values come from the oracles only."""

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from oracles import ap_definition, fpr95_sweep

HERE = Path(__file__).parent / "fixtures"


def main():
    rng = np.random.default_rng(2024)
    labels = np.repeat(np.arange(6), 3)
    protos = rng.normal(size=(6, 16))
    x = protos[labels] + 0.8 * rng.normal(size=(18, 16))
    x = (x / np.linalg.norm(x, axis=1, keepdims=True)).astype("<f4")
    HERE.mkdir(exist_ok=True)
    (HERE / "desc.emkd").write_bytes(b"EMKD" + struct.pack("<II", *x.shape) + x.tobytes())
    names = [f"p{i:02d}.pgm" for i in range(18)]
    (HERE / "desc.emkd.names.txt").write_text("".join(n + "\n" for n in names))
    xd = x.astype(np.float64)

    def dist(a, b):
        return math.sqrt(sum((u - v) ** 2 for u, v in zip(xd[a], xd[b])))

    pairs = [(int(a), int(b)) for a, b in rng.integers(0, 18, size=(60, 2)) if a != b]
    rows = [(names[a], names[b], int(labels[a] == labels[b])) for a, b in pairs]
    with open(HERE / "pairs.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([("id_a", "id_b", "is_match"), *rows])
    d = [dist(a, b) for a, b in pairs]
    y = [bool(r[2]) for r in rows]
    ranked = [y[i] for i in sorted(range(len(d)), key=lambda i: d[i])]
    golden = [{"metric": "verification_ap", "value": ap_definition(ranked)},
              {"metric": "fpr95", "value": fpr95_sweep(d, y)}]

    ret_rows, aps = [], []
    for q in range(0, 18, 3):
        pool = [j for j in range(18) if j != q]
        for j in pool:
            ret_rows.append((names[q], names[j], int(labels[j] == labels[q])))
        order = sorted(pool, key=lambda j: dist(q, j))
        aps.append(ap_definition([labels[j] == labels[q] for j in order]))
    with open(HERE / "retrieval.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(ret_rows)
    golden.append({"metric": "retrieval_map", "value": sum(aps) / len(aps)})
    (HERE / "golden.json").write_text(json.dumps(golden, indent=2) + "\n")


if __name__ == "__main__":
    main()
