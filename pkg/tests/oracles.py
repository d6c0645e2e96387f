"""Independent reference implementations used as test oracles.

Each one re-derives a quantity from its definition with plain loops, so it
shares no code path with the package function it checks.
"""

import math

import numpy as np


def bessel_i_quad(order, x):
    """I_order(x) = (1/pi) * int_0^pi exp(x cos t) cos(order t) dt."""
    import warnings

    from scipy.integrate import IntegrationWarning, quad

    with warnings.catch_warnings():
        # tolerance requests below round-off are reported but harmless
        warnings.simplefilter("ignore", IntegrationWarning)
        value, _ = quad(lambda t: math.exp(x * math.cos(t)) * math.cos(order * t), 0.0, math.pi,
                        epsabs=1e-13, epsrel=1e-13, limit=200)
    return value / math.pi


def fourier_kernel(kappa, s, delta):
    """Truncated normalized Von Mises series with coefficients from quadrature."""
    bessel = [bessel_i_quad(i, kappa) for i in range(s + 1)]
    z = bessel[0] + 2 * sum(bessel[1:])
    return (bessel[0] + 2 * sum(bessel[i] * math.cos(i * delta) for i in range(1, s + 1))) / z


def kron_loop(*vectors):
    """Kronecker product of vectors, first factor major, via nested loops."""
    out = [1.0]
    for v in vectors:
        out = [a * b for a in out for b in v]
    return np.array(out)


def spatial_descriptor_loop(M, m, weights, encodings, phis):
    """sum_p w_p * (M (phi_p kron e_p) + m), one position at a time.

    ``encodings`` is a list (one per block) of dicts position -> unweighted
    (2s+1)^2 embedding; ``phis`` the matching list of (n, n, d) tensors.
    """
    n = phis[0].shape[0]
    raw = np.zeros(M.shape[0])
    for i in range(n):
        for j in range(n):
            w = weights[i * n + j]
            g = np.concatenate([kron_loop(phi[i, j], enc[(i + 1, j + 1)]) for enc, phi in zip(encodings, phis)])
            raw += w * (M @ g) + m
    return raw


def mine_brute(anchors, positives):
    B = len(anchors)
    chosen = []
    for i in range(B):
        best, best_j = math.inf, None
        for j in range(B):
            if j == i:
                continue
            d = math.sqrt(sum((a - p) ** 2 for a, p in zip(anchors[i], positives[j])))
            if d < best:
                best, best_j = d, j
        chosen.append(best_j)
    return chosen


def fpr95_sweep(distances, is_match):
    """Try every distinct distance as threshold; keep the smallest reaching 95% recall."""
    pos = [d for d, y in zip(distances, is_match) if y]
    neg = [d for d, y in zip(distances, is_match) if not y]
    for t in sorted(set(distances)):
        recall = sum(d <= t for d in pos) / len(pos)
        if recall >= 0.95:
            return sum(d <= t for d in neg) / len(neg)
    raise AssertionError("unreachable")


def ap_definition(relevance):
    """AP = mean over relevant ranks k of (#relevant in top k) / k."""
    rel = list(relevance)
    precisions = []
    for k in range(1, len(rel) + 1):
        if rel[k - 1]:
            precisions.append(sum(rel[:k]) / k)
    return sum(precisions) / len(precisions)


def conv_by_definition(x, weight, stride):
    """3x3 zero-padded convolution, output[h, w, o] summed element by element."""
    H, W, C = x.shape
    O = weight.shape[0]
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    out = np.zeros((Ho, Wo, O))
    for oh in range(Ho):
        for ow in range(Wo):
            for o in range(O):
                acc = 0.0
                for c in range(C):
                    for di in range(3):
                        for dj in range(3):
                            r, q = oh * stride + di - 1, ow * stride + dj - 1
                            if 0 <= r < H and 0 <= q < W:
                                acc += x[r, q, c] * weight[o, c, di, dj]
                out[oh, ow, o] = acc
    return out


def gram_schmidt_rows(a):
    """Classical Gram-Schmidt on the rows of ``a``."""
    basis = []
    for row in np.asarray(a, dtype=float):
        v = row.copy()
        for b in basis:
            v -= (v @ b) * b
        basis.append(v / np.linalg.norm(v))
    return np.array(basis)
