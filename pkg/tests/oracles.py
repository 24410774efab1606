"""Independent reference implementations used only by the tests."""

from fractions import Fraction
import math

import numpy as np


def exact_round(x: float, mantissa_bits: int, emin: int, emax: int) -> float:
    """Round-to-nearest-even with exact rational arithmetic."""
    if x == 0 or not math.isfinite(x):
        return x
    q = Fraction(x)
    sign = -1 if q < 0 else 1
    q = abs(q)
    e = math.floor(math.log2(q))
    # guard against log2 rounding
    while Fraction(2) ** e > q:
        e -= 1
    while Fraction(2) ** (e + 1) <= q:
        e += 1
    quantum = Fraction(2) ** (max(e, emin) - mantissa_bits)
    n, rem = divmod(q, quantum)
    half = quantum / 2
    if rem > half or (rem == half and n % 2 == 1):
        n += 1
    val = n * quantum
    max_finite = (2 - Fraction(2) ** -mantissa_bits) * Fraction(2) ** emax
    if val > max_finite:
        return sign * math.inf
    return sign * float(val)


def bf16_from_f32_bits(x: np.ndarray) -> np.ndarray:
    """Classic bit-level float32 -> bfloat16 round-to-nearest-even conversion."""
    u = np.asarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    lsb = (u >> 16) & 1
    r = ((u + 0x7FFF + lsb) >> 16) << 16
    return r.astype(np.uint32).view(np.float32).astype(np.float64)


def naive_attention(X, wq, wk, wv, wo, n_heads):
    """Loop-based multi-head attention with no shared code paths."""
    n, d = X.shape
    dh = d // n_heads
    Q, K, V = X @ wq, X @ wk, X @ wv
    heads = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        out = np.zeros((n, dh))
        for i in range(n):
            s = np.array([sum(Q[i, sl][a] * K[j, sl][a] for a in range(dh)) for j in range(n)]) / math.sqrt(dh)
            w = np.exp(s - s.max())
            w /= w.sum()
            for j in range(n):
                out[i] += w[j] * V[j, sl]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ wo


def jac_norm_dense(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(np.linalg.svd(np.diag(p) - np.outer(p, p), compute_uv=False)[0])


def average_ranks(v):
    v = list(v)
    out = [0.0] * len(v)
    for i, a in enumerate(v):
        less = sum(1 for b in v if b < a)
        equal = sum(1 for b in v if b == a)
        out[i] = less + (equal + 1) / 2
    return out


def textbook_pearson(a, b) -> float:
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = math.sqrt(sum((x - ma) ** 2 for x in a))
    db = math.sqrt(sum((y - mb) ** 2 for y in b))
    return num / (da * db)
