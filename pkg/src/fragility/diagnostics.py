"""Per-layer fragility diagnostics, first-order error bounds and the combined predictor."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import SmallGainViolation, ZeroScoreError
from .linalg import cond_ridge, softmax_jac_norms
from .model import DualTrace, Params, layer_residual_gains

__all__ = [
    "KernelConstants",
    "DiagnosticsOptions",
    "HeadDiagnostics",
    "LayerDiagnostics",
    "BoundBreakdown",
    "DiagnosticsRecord",
    "RECORD_COLUMNS",
    "kappa_score",
    "kappa_softmax",
    "kappa_softmax_rows",
    "kappa_V",
    "kappa_eff",
    "rho_LN",
    "c_LN",
    "attention_bound",
    "relaxation_factor",
    "first_order_factor",
    "depth_relaxation",
    "layer_bracket",
    "combined_predictor",
    "config_predictor",
    "unified_bound",
    "token_variance_median",
    "layer_diagnostics",
    "trace_diagnostics",
    "diagnostics_records",
]


@dataclass(frozen=True)
class KernelConstants:
    """First-order kernel constants.

    ``None`` for the GEMM constants means "inner accumulation length of the
    GEMM in question" (head width for scores, sequence length for ``P V``).
    """

    c_gemm: float | None = None
    c_gemm_prime: float | None = None
    c_smx: float = 4.0
    C1: float = 1.0
    C2: float = 1.0
    C3: float = 1.0
    c_unified: float | None = None  # defaults to the score GEMM length


@dataclass(frozen=True)
class DiagnosticsOptions:
    norm_mode: str = "frobenius"  # norm inside kappa_score: frobenius | spectral
    aggregate: str = "max"  # head aggregation: max | sum
    ridge: float = 1e-6
    top_rows: int | None = None  # rows sampled by largest ||S_i|| for kappa_softmax
    constants: KernelConstants = KernelConstants()
    compute_rho: bool = True


def _norm(A, mode: str) -> float:
    if mode == "frobenius":
        return float(np.linalg.norm(A))
    if mode == "spectral":
        return float(np.linalg.norm(A, 2))
    raise ValueError(f"unknown norm mode {mode!r}")


def kappa_score(Q, K, S, d: int, norm_mode: str = "frobenius") -> float:
    """``||Q|| ||K|| / (||S|| sqrt(d))``; raises :class:`ZeroScoreError` for ``S = 0``."""
    ns = _norm(S, norm_mode)
    if ns == 0.0:
        raise ZeroScoreError("score matrix is zero")
    return _norm(Q, norm_mode) * _norm(K, norm_mode) / (ns * math.sqrt(d))


def kappa_softmax_rows(S, P) -> np.ndarray:
    """Per-row sensitivity ``||J(P_i)||_2 ||S_i|| / ||P_i||`` (last axis is the row)."""
    S = np.asarray(S, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    jn = softmax_jac_norms(P)
    return jn * np.linalg.norm(S, axis=-1) / np.linalg.norm(P, axis=-1)


def kappa_softmax(S, P, top_rows: int | None = None) -> tuple[float, int]:
    """Row maximum of the softmax sensitivity, and the row achieving it.

    With ``top_rows`` only the rows with the largest ``||S_i||`` are scanned.
    """
    S = np.asarray(S, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    rows = np.arange(S.shape[0])
    if top_rows is not None and top_rows < S.shape[0]:
        order = np.argsort(-np.linalg.norm(S, axis=1), kind="stable")
        rows = np.sort(order[:top_rows])
    vals = kappa_softmax_rows(S[rows], P[rows])
    i = int(np.argmax(vals))
    return float(vals[i]), int(rows[i])


def kappa_V(V, lam: float = 1e-6) -> float:
    return cond_ridge(V, lam)


def kappa_eff(W1, W2, W_O, lam: float = 1e-6) -> float:
    """Sum of the ridged condition numbers of the FFN weights and output projection."""
    return cond_ridge(W1, lam) + cond_ridge(W2, lam) + cond_ridge(W_O, lam)


def rho_LN(sigma2: float, eps: float, d_model: int, eps_mach: float) -> float:
    """``(sigma2 / eps) * d_model * eps_mach``; below 1 the LayerNorm is eps-dominated."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    return sigma2 / eps * d_model * eps_mach


def c_LN(sigma: float, eps: float, C1: float = 1.0, C2: float = 1.0, C3: float = 1.0) -> float:
    if not eps > 0:
        raise ValueError("eps must be > 0")
    return C1 * sigma / math.sqrt(eps) + C2 * sigma * sigma / eps + C3


@dataclass
class HeadDiagnostics:
    kappa_score: float
    kappa_softmax: float
    kappa_V: float
    row: int = 0  # row attaining kappa_softmax


def attention_bound(
    head: HeadDiagnostics,
    eps_eff: float,
    c_gemm: float,
    c_gemm_prime: float,
    c_smx: float = 4.0,
) -> float:
    """First-order relative error bound for ``A = P V`` in the printed bracket form.

    ``[c_smx + k_softmax (1 + c_gemm k_score) + c'_gemm] * eps * k(V)``.
    """
    bracket = c_smx + head.kappa_softmax * (1.0 + c_gemm * head.kappa_score) + c_gemm_prime
    return bracket * eps_eff * head.kappa_V


def relaxation_factor(rho: float) -> float:
    """Exact residual conditioning factor ``(1 + rho) / (1 - rho)``."""
    if rho < 0:
        raise ValueError("rho must be >= 0")
    if rho >= 1:
        raise SmallGainViolation(f"rho = {rho} >= 1: relaxation bound is vacuous")
    return (1.0 + rho) / (1.0 - rho)


def first_order_factor(rho: float) -> float:
    """Heuristic first-order relaxation ``1 + rho`` used in the unified bound."""
    return 1.0 + rho


def depth_relaxation(rhos) -> float:
    return float(np.prod([relaxation_factor(r) for r in rhos]))


@dataclass
class LayerDiagnostics:
    heads: list[HeadDiagnostics]
    kappa_score: float  # head aggregates
    kappa_softmax: float
    kappa_V: float
    kappa_eff: float
    C_LN: float
    rho_LN: list[float]  # per LN instance
    sigma2: list[float]  # median token variance per LN input
    rho_residual: tuple[float, float] | None  # (attention, ffn) branch gains
    w_o_norm: float
    d_head: int
    seq_len: int
    eps_eff: float
    attention_bounds: list[float] = field(default_factory=list)

    @property
    def rho_layer(self) -> float | None:
        """Gain of the whole block minus identity, composed from the two branches."""
        if self.rho_residual is None:
            return None
        ra, rf = self.rho_residual
        return (1.0 + ra) * (1.0 + rf) - 1.0

    @property
    def small_gain(self) -> bool | None:
        r = self.rho_layer
        return None if r is None else r < 1.0


def layer_bracket(diag: LayerDiagnostics, c: float | None = None) -> float:
    """``k_eff + k_softmax (1 + c k_score) k(V) + C_LN`` for one layer."""
    c = diag.d_head if c is None else c
    return diag.kappa_eff + diag.kappa_softmax * (1.0 + c * diag.kappa_score) * diag.kappa_V + diag.C_LN


def combined_predictor(diag: LayerDiagnostics) -> float:
    """``k_softmax (1 + k_score) k(V) ||W_O||_2 + k_eff + C_LN`` for one layer."""
    return (
        diag.kappa_softmax * (1.0 + diag.kappa_score) * diag.kappa_V * diag.w_o_norm
        + diag.kappa_eff
        + diag.C_LN
    )


def config_predictor(diags, reduce: str = "sum", eps: float | None = None) -> float:
    vals = [combined_predictor(d) for d in diags]
    if reduce == "sum":
        out = float(np.sum(vals))
    elif reduce == "max":
        out = float(np.max(vals))
    else:
        raise ValueError(f"unknown layer reduction {reduce!r}")
    return out * eps if eps is not None else out


@dataclass
class BoundBreakdown:
    brackets: list[float]
    downstream: list[float]
    total: float
    vacuous: bool
    eps: float
    attention_bounds: list[list[float]] = field(default_factory=list)


def unified_bound(brackets, rhos, eps_eff: float, attention_bounds=None) -> BoundBreakdown:
    """``eps * sum_l bracket_l * prod_{k > l} (1 + rho_k)``.

    ``vacuous`` is set when any ``rho_k >= 1``.
    """
    brackets = [float(b) for b in brackets]
    rhos = [float(r) for r in rhos]
    if len(brackets) != len(rhos):
        raise ValueError("brackets and rhos must have the same length")
    L = len(brackets)
    downstream = [1.0] * L
    for ell in range(L - 2, -1, -1):
        downstream[ell] = downstream[ell + 1] * first_order_factor(rhos[ell + 1])
    total = eps_eff * sum(b * w for b, w in zip(brackets, downstream))
    return BoundBreakdown(
        brackets=brackets,
        downstream=downstream,
        total=float(total),
        vacuous=any(r >= 1.0 for r in rhos),
        eps=eps_eff,
        attention_bounds=list(attention_bounds or []),
    )


def token_variance_median(X) -> float:
    """Median over tokens (rows) of the per-token population variance."""
    X = np.asarray(X, dtype=np.float64)
    return float(np.median(X.reshape(-1, X.shape[-1]).var(axis=-1)))


def _aggregate(vals, how: str) -> float:
    if how == "max":
        return float(np.max(vals))
    if how == "sum":
        return float(np.sum(vals))
    raise ValueError(f"unknown head aggregation {how!r}")


def layer_diagnostics(
    params: Params,
    trace: DualTrace,
    index: int,
    opts: DiagnosticsOptions = DiagnosticsOptions(),
    ln_eps_mach: float | None = None,
) -> LayerDiagnostics:
    """Diagnostics of one layer from the reference taps of ``trace``.

    ``ln_eps_mach`` is the unit roundoff used in ``rho_LN``; it defaults to the
    compute precision of the trace's low-precision spec.
    """
    from .precision import effective_eps

    cfg = params.config
    layer = params.layers[index]
    taps = trace.layers[index].ref
    att = taps.attn
    consts = opts.constants
    eps_eff = effective_eps(trace.spec)
    c_g = consts.c_gemm if consts.c_gemm is not None else cfg.d_head
    c_gp = consts.c_gemm_prime if consts.c_gemm_prime is not None else cfg.seq_len
    heads = []
    bounds = []
    for h in range(cfg.n_heads):
        try:
            ks = kappa_score(att.Q[h], att.K[h], att.S[h], cfg.d_head, opts.norm_mode)
        except ZeroScoreError:
            ks = math.inf
        ksm, row = kappa_softmax(att.S[h], att.P[h], opts.top_rows)
        kv = kappa_V(att.V[h], opts.ridge)
        hd = HeadDiagnostics(ks, ksm, kv, row)
        heads.append(hd)
        bounds.append(attention_bound(hd, eps_eff, c_g, c_gp, consts.c_smx))
    if ln_eps_mach is None:
        ln_eps_mach = trace.spec.compute.eps_mach
    sig2 = [token_variance_median(x) for x in taps.ln_inputs]
    rhos_ln = [rho_LN(s, e, cfg.d_model, ln_eps_mach) for s, e in zip(sig2, layer.ln_eps)]
    cln = sum(
        c_LN(math.sqrt(s), e, consts.C1, consts.C2, consts.C3) for s, e in zip(sig2, layer.ln_eps)
    )
    rho_res = layer_residual_gains(params, taps, index) if opts.compute_rho else None
    return LayerDiagnostics(
        heads=heads,
        kappa_score=_aggregate([h.kappa_score for h in heads], opts.aggregate),
        kappa_softmax=_aggregate([h.kappa_softmax for h in heads], opts.aggregate),
        kappa_V=_aggregate([h.kappa_V for h in heads], opts.aggregate),
        kappa_eff=kappa_eff(layer.w1, layer.w2, layer.w_o, opts.ridge),
        C_LN=cln,
        rho_LN=rhos_ln,
        sigma2=sig2,
        rho_residual=rho_res,
        w_o_norm=float(np.linalg.norm(layer.w_o, 2)),
        d_head=cfg.d_head,
        seq_len=cfg.seq_len,
        eps_eff=eps_eff,
        attention_bounds=bounds,
    )


def trace_diagnostics(
    params: Params, trace: DualTrace, opts: DiagnosticsOptions = DiagnosticsOptions()
) -> tuple[list[LayerDiagnostics], BoundBreakdown | None]:
    """Diagnostics for every layer plus the unified bound (when gains were computed)."""
    diags = [layer_diagnostics(params, trace, i, opts) for i in range(len(params.layers))]
    if not opts.compute_rho:
        return diags, None
    c = opts.constants.c_unified
    bound = unified_bound(
        [layer_bracket(d, c) for d in diags],
        [d.rho_layer for d in diags],
        diags[0].eps_eff,
        [d.attention_bounds for d in diags],
    )
    return diags, bound


RECORD_COLUMNS = [
    "step", "layer", "head", "kappa_score", "kappa_softmax", "kappa_V", "kappa_eff",
    "rho_LN", "C_LN", "rho_resid_attn", "rho_resid_ffn", "w_o_norm", "bracket",
    "bound_total", "r_block_attn", "r_block_ffn", "r_block_out", "predictor", "predictor_eps",
]


@dataclass
class DiagnosticsRecord:
    """One CSV row; ``head = -1`` carries the head aggregate."""

    step: int
    layer: int
    head: int
    kappa_score: float
    kappa_softmax: float
    kappa_V: float
    kappa_eff: float
    rho_LN: float
    C_LN: float
    rho_resid_attn: float
    rho_resid_ffn: float
    w_o_norm: float
    bracket: float
    bound_total: float
    r_block_attn: float
    r_block_ffn: float
    r_block_out: float
    predictor: float
    predictor_eps: float

    def as_row(self) -> dict:
        return asdict(self)


def diagnostics_records(
    step: int,
    trace: DualTrace,
    diags: list[LayerDiagnostics],
    bound: BoundBreakdown | None,
    c: float | None = None,
) -> list[DiagnosticsRecord]:
    """Flatten diagnostics to rows: one per head plus one aggregate row per layer.

    ``rho_LN`` holds the smallest (most eps-dominated) LN instance of the layer.
    """
    nan = float("nan")
    out = []
    for ell, d in enumerate(diags):
        lt = trace.layers[ell]
        rr = d.rho_residual or (nan, nan)
        pred = combined_predictor(d)
        common = dict(
            step=step,
            layer=ell,
            kappa_eff=d.kappa_eff,
            rho_LN=min(d.rho_LN),
            C_LN=d.C_LN,
            rho_resid_attn=rr[0],
            rho_resid_ffn=rr[1],
            w_o_norm=d.w_o_norm,
            bracket=layer_bracket(d, c),
            bound_total=bound.total if bound is not None else nan,
            r_block_attn=lt.r_attn,
            r_block_ffn=lt.r_ffn,
            r_block_out=lt.r_block,
            predictor=pred,
            predictor_eps=pred * d.eps_eff,
        )
        for h, hd in enumerate(d.heads):
            out.append(DiagnosticsRecord(head=h, kappa_score=hd.kappa_score,
                                         kappa_softmax=hd.kappa_softmax, kappa_V=hd.kappa_V, **common))
        out.append(DiagnosticsRecord(head=-1, kappa_score=d.kappa_score,
                                     kappa_softmax=d.kappa_softmax, kappa_V=d.kappa_V, **common))
    return out
