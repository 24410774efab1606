"""Dense kernels with optional rounding emulation, and spectral estimators."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NoConvergenceWarning
from .precision import PrecisionSpec, round_to

__all__ = [
    "PowerIterConfig",
    "DEFAULT_POWER",
    "SHORT_BUDGET",
    "gemm",
    "fro_norm",
    "spectral_norm",
    "power_iteration",
    "cond_ridge",
    "singular_values",
    "softmax_rows",
    "softmax_jac_norm",
    "softmax_jac_norms",
]


@dataclass(frozen=True)
class PowerIterConfig:
    iters: int = 50
    tol: float = 1e-8
    seed: int = 0xC0FFEE


DEFAULT_POWER = PowerIterConfig()
# the 2-3 step runtime budget used for large models; not converged in general
SHORT_BUDGET = PowerIterConfig(iters=3, tol=np.inf)


def _rnd(spec: PrecisionSpec, x, fmt=None):
    if spec.is_reference:
        return x
    return round_to(fmt or spec.compute, x)


def gemm(A, B, spec: PrecisionSpec) -> np.ndarray:
    """Matrix product ``A @ B`` under ``spec``.

    Leading batch dimensions broadcast as in :func:`numpy.matmul`.  Under a
    reference spec the product is exact float64.  Otherwise the inputs are
    rounded to the compute format, every product and every partial sum is
    rounded to the accumulator format, summation runs left to right over the
    inner index, and the result is rounded back to the compute format.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise DimensionMismatchError(f"cannot multiply {A.shape} by {B.shape}")
    if spec.is_reference:
        return A @ B
    acc_fmt = spec.accumulator
    A = round_to(spec.compute, A)
    B = round_to(spec.compute, B)
    # every product rounded at once: prod[..., i, j, l] = A[..., i, j] * B[..., j, l]
    prod = round_to(acc_fmt, A[..., :, :, None] * B[..., None, :, :])
    acc = prod[..., :, 0, :]
    for j in range(1, A.shape[-1]):
        acc = round_to(acc_fmt, acc + prod[..., :, j, :])
    if acc_fmt is not spec.compute:
        acc = round_to(spec.compute, acc)
    return acc


def fro_norm(A) -> float:
    return float(np.linalg.norm(np.asarray(A, dtype=np.float64)))


def power_iteration(A, cfg: PowerIterConfig = DEFAULT_POWER) -> tuple[float, bool]:
    """Largest singular value of ``A`` by power iteration on ``A^T A``.

    Returns ``(estimate, converged)``; convergence means the relative change
    of the estimate fell below ``cfg.tol``.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.size == 0:
        raise ValueError("power_iteration needs a nonempty 2-D matrix")
    if cfg.iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    v = rng.standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(cfg.iters):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        new_sigma = float(np.sqrt(nw))
        v = w / nw
        if sigma > 0 and abs(new_sigma - sigma) <= cfg.tol * new_sigma:
            return float(np.linalg.norm(A @ v)), True
        sigma = new_sigma
    return float(np.linalg.norm(A @ v)), False


def spectral_norm(A, iters: int = 50, tol: float = 1e-8, seed: int = 0xC0FFEE) -> float:
    """``||A||_2`` by power iteration; warns with :class:`NoConvergenceWarning` if not converged."""
    est, ok = power_iteration(A, PowerIterConfig(iters, tol, seed))
    if not ok:
        warnings.warn(
            f"power iteration did not reach tol={tol} in {iters} iterations",
            NoConvergenceWarning,
            stacklevel=2,
        )
    return est


def singular_values(A) -> np.ndarray:
    return np.linalg.svd(np.asarray(A, dtype=np.float64), compute_uv=False)


def cond_ridge(A, lam: float = 0.0) -> float:
    """``sigma_max / (sigma_min + lam)`` over the ``min(m, n)`` singular values."""
    if lam < 0:
        raise ValueError("ridge must be nonnegative")
    s = singular_values(A)
    smin = s[-1] + lam
    if smin == 0.0:
        return np.inf
    return float(s[0] / smin)


def softmax_rows(S, spec: PrecisionSpec) -> np.ndarray:
    """Row-wise softmax over the last axis with the max-shift.

    Under emulation the subtraction, exponential, each partial sum and the
    division are rounded; the row sum runs left to right in the accumulator
    format.
    """
    S = np.asarray(S, dtype=np.float64)
    if spec.is_reference:
        z = S - S.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    acc_fmt = spec.accumulator
    S = round_to(spec.compute, S)
    z = round_to(spec.compute, S - S.max(axis=-1, keepdims=True))
    e = round_to(spec.compute, np.exp(z))
    total = e[..., 0:1]
    for j in range(1, e.shape[-1]):
        total = round_to(acc_fmt, total + e[..., j : j + 1])
    total = round_to(spec.compute, total)
    return round_to(spec.compute, e / total)


def softmax_jac_norms(P, method: str = "eig", iters: int = 500, tol: float = 1e-13,
                      seed: int = 0xC0FFEE) -> np.ndarray:
    """``||Diag(p) - p p^T||_2`` for every row ``p`` of ``P`` (last axis).

    ``"eig"`` takes the top eigenvalue of the symmetric PSD Jacobian with a
    batched dense solver.  ``"power"`` runs batched power iteration on the
    subspace orthogonal to the all-ones vector, where the Jacobian acts.
    """
    P = np.asarray(P, dtype=np.float64)
    if method == "eig":
        J = -P[..., :, None] * P[..., None, :]
        idx = np.arange(P.shape[-1])
        J[..., idx, idx] += P
        return np.clip(np.linalg.eigvalsh(J)[..., -1], 0.0, None)
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    shape = P.shape[:-1]
    n = P.shape[-1]
    P2 = P.reshape(-1, n)
    if n == 1:
        return np.zeros(shape)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v = np.broadcast_to(v - v.mean(), P2.shape).copy()
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    lam = np.zeros(P2.shape[0])
    active = np.ones(P2.shape[0], dtype=bool)
    for _ in range(iters):
        p = P2[active]
        x = v[active]
        w = p * x - p * np.sum(p * x, axis=1, keepdims=True)
        w -= w.mean(axis=1, keepdims=True)
        rq = np.sum(x * w, axis=1)
        nw = np.linalg.norm(w, axis=1)
        zero = nw == 0.0
        nw[zero] = 1.0
        x_new = w / nw[:, None]
        # a zero image means the iterate sits in the null space; J is then 0
        # on this row only if p is one-hot, which the Rayleigh quotient shows.
        done = np.abs(rq - lam[active]) <= tol * np.maximum(rq, 1e-300)
        done |= zero
        lam[active] = rq
        v[active] = np.where(zero[:, None], x, x_new)
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if not active.any():
            break
    return np.clip(lam, 0.0, None).reshape(shape)


def softmax_jac_norm(p) -> float:
    """Spectral norm of the softmax Jacobian ``Diag(p) - p p^T`` at a probability row."""
    return float(softmax_jac_norms(np.asarray(p, dtype=np.float64)[None, :])[0])
