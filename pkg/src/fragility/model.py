"""Toy pre-LN Transformer encoder with a paired reference/low-precision forward pass."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionTooLargeError
from .linalg import gemm, softmax_rows
from .precision import REFERENCE, Context, PrecisionSpec, round_to

__all__ = [
    "ModelConfig",
    "LayerParams",
    "Params",
    "AttentionOutput",
    "BlockTaps",
    "LayerTrace",
    "DualTrace",
    "init_params",
    "ln_forward",
    "attention_forward",
    "ffn_forward",
    "block_forward",
    "forward",
    "forward_dual",
    "relative_mismatch",
    "residual_jacobian_norm",
    "attention_branch",
    "ffn_branch",
    "layer_residual_gains",
    "MAX_JACOBIAN_DIM",
]

MAX_JACOBIAN_DIM = 4096


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    seq_len: int = 16
    d_model: int = 32
    n_heads: int = 4
    ffn_hidden: int | None = None  # defaults to 2 * d_model
    ln_eps: float = 1e-5
    seed: int = 0
    residual_scale: float = 1.0  # multiplies the init of W_O and W_2

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        for name in ("depth", "seq_len", "d_model", "n_heads"):
            if int(getattr(self, name)) < 1:
                out.append(f"{name} must be >= 1")
        if self.ffn_hidden is not None and self.ffn_hidden < 1:
            out.append("ffn_hidden must be >= 1")
        if self.n_heads >= 1 and self.d_model % self.n_heads != 0:
            out.append("d_model must be divisible by n_heads")
        if not self.ln_eps > 0:
            out.append("ln_eps must be > 0")
        if not self.residual_scale > 0:
            out.append("residual_scale must be > 0")
        return out

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def hidden(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 2 * self.d_model


@dataclass
class LayerParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    ln_eps: list[float] = field(default_factory=lambda: [1e-5, 1e-5])

    def head_block(self, name: str, head: int, n_heads: int) -> np.ndarray:
        """Columns of ``w_q``/``w_k``/``w_v`` (or rows of ``w_o``) owned by ``head``."""
        w = getattr(self, name)
        dh = w.shape[0 if name == "w_o" else 1] // n_heads
        sl = slice(head * dh, (head + 1) * dh)
        return w[sl, :] if name == "w_o" else w[:, sl]

    def ln(self, which: int):
        if which == 0:
            return self.ln1_gamma, self.ln1_beta, self.ln_eps[0]
        return self.ln2_gamma, self.ln2_beta, self.ln_eps[1]


@dataclass
class Params:
    config: ModelConfig
    layers: list[LayerParams]

    def copy(self) -> "Params":
        return copy.deepcopy(self)

    def ln_eps_snapshot(self) -> list[list[float]]:
        return [list(lp.ln_eps) for lp in self.layers]

    def equals(self, other: "Params") -> bool:
        if self.config != other.config or len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            for name in ("w_q", "w_k", "w_v", "w_o", "w1", "w2",
                         "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
                if not np.array_equal(getattr(a, name), getattr(b, name)):
                    return False
            if list(a.ln_eps) != list(b.ln_eps):
                return False
        return True


def init_params(config: ModelConfig) -> Params:
    """Seeded Gaussian init with std ``1/sqrt(fan_in)``; LN scale 1, shift 0."""
    rng = np.random.default_rng(config.seed)
    d, m = config.d_model, config.hidden
    layers = []
    for _ in range(config.depth):
        w = {
            name: rng.standard_normal(shape) / np.sqrt(shape[0])
            for name, shape in (
                ("w_q", (d, d)),
                ("w_k", (d, d)),
                ("w_v", (d, d)),
                ("w_o", (d, d)),
                ("w1", (d, m)),
                ("w2", (m, d)),
            )
        }
        w["w_o"] *= config.residual_scale
        w["w2"] *= config.residual_scale
        layers.append(
            LayerParams(
                **w,
                ln1_gamma=np.ones(d),
                ln1_beta=np.zeros(d),
                ln2_gamma=np.ones(d),
                ln2_beta=np.zeros(d),
                ln_eps=[float(config.ln_eps), float(config.ln_eps)],
            )
        )
    return Params(config, layers)


def _r(spec: PrecisionSpec, x):
    return x if spec.is_reference else round_to(spec.compute, x)


def ln_forward(x, gamma, beta, eps: float, spec: PrecisionSpec = REFERENCE) -> np.ndarray:
    """LayerNorm over the last axis (population variance).

    Under emulation every reduction step and pointwise op is rounded in the
    compute format; LayerNorm ignores FP32 accumulation.
    """
    x = np.asarray(x, dtype=np.float64)
    if not eps > 0:
        raise ValueError("LayerNorm eps must be > 0")
    if spec.is_reference:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        return xc / np.sqrt(var + eps) * gamma + beta
    spec = spec.with_context(Context.LAYERNORM)
    r = lambda v: round_to(spec.compute, v)  # noqa: E731
    d = x.shape[-1]
    x = r(x)
    s = x[..., 0:1]
    for j in range(1, d):
        s = r(s + x[..., j : j + 1])
    mu = r(s / d)
    xc = r(x - mu)
    sq = r(xc * xc)
    s = sq[..., 0:1]
    for j in range(1, d):
        s = r(s + sq[..., j : j + 1])
    var = r(s / d)
    den = r(np.sqrt(r(var + r(eps))))
    y = r(xc / den)
    y = r(y * r(gamma))
    return r(y + r(beta))


@dataclass
class AttentionOutput:
    out: np.ndarray  # (..., n, d_model)
    Q: np.ndarray  # (..., h, n, d_head)
    K: np.ndarray
    V: np.ndarray
    S: np.ndarray  # (..., h, n, n)
    P: np.ndarray
    A: np.ndarray  # (..., h, n, d_head)


def _split_heads(Z: np.ndarray, n_heads: int) -> np.ndarray:
    *lead, n, d = Z.shape
    return np.swapaxes(Z.reshape(*lead, n, n_heads, d // n_heads), -2, -3)


def _merge_heads(Z: np.ndarray) -> np.ndarray:
    *lead, h, n, dh = Z.shape
    return np.swapaxes(Z, -2, -3).reshape(*lead, n, h * dh)


def attention_forward(X, layer: LayerParams, spec: PrecisionSpec, n_heads: int) -> AttentionOutput:
    """Multi-head self-attention on already-normalized input ``X``."""
    X = _r(spec, np.asarray(X, dtype=np.float64))
    d = X.shape[-1]
    qkv = gemm(X, np.concatenate([layer.w_q, layer.w_k, layer.w_v], axis=1), spec)
    Q = _split_heads(qkv[..., :d], n_heads)
    K = _split_heads(qkv[..., d : 2 * d], n_heads)
    V = _split_heads(qkv[..., 2 * d :], n_heads)
    dh = d // n_heads
    scale = _r(spec, 1.0 / np.sqrt(dh))
    S = _r(spec, gemm(Q, np.swapaxes(K, -1, -2), spec) * scale)
    P = softmax_rows(S, spec)
    A = gemm(P, V, spec)
    out = gemm(_merge_heads(A), layer.w_o, spec)
    return AttentionOutput(out, Q, K, V, S, P, A)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def ffn_forward(X, layer: LayerParams, spec: PrecisionSpec) -> np.ndarray:
    H = gemm(X, layer.w1, spec)
    G = _r(spec, _gelu(H))
    return gemm(G, layer.w2, spec)


@dataclass
class BlockTaps:
    x_in: np.ndarray  # block input, also the first LN input
    ln1_out: np.ndarray
    attn: AttentionOutput
    mid: np.ndarray  # residual stream after attention, second LN input
    ln2_out: np.ndarray
    ffn_out: np.ndarray
    out: np.ndarray

    @property
    def ln_inputs(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x_in, self.mid


def block_forward(X, layer: LayerParams, spec: PrecisionSpec, n_heads: int) -> BlockTaps:
    X = _r(spec, np.asarray(X, dtype=np.float64))
    g1, b1, e1 = layer.ln(0)
    h1 = ln_forward(X, g1, b1, e1, spec)
    att = attention_forward(h1, layer, spec, n_heads)
    mid = _r(spec, X + att.out)
    g2, b2, e2 = layer.ln(1)
    h2 = ln_forward(mid, g2, b2, e2, spec)
    f = ffn_forward(h2, layer, spec)
    out = _r(spec, mid + f)
    return BlockTaps(X, h1, att, mid, h2, f, out)


def forward(params: Params, X0, spec: PrecisionSpec = REFERENCE) -> list[BlockTaps]:
    taps = []
    X = np.asarray(X0, dtype=np.float64)
    for layer in params.layers:
        t = block_forward(X, layer, spec, params.config.n_heads)
        taps.append(t)
        X = t.out
    return taps


def relative_mismatch(lp, ref) -> float:
    """``||lp - ref||_F / ||ref||_F`` (0 when both vanish)."""
    lp = np.asarray(lp, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    num = np.linalg.norm(lp - ref)
    den = np.linalg.norm(ref)
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return float(num / den)


@dataclass
class LayerTrace:
    ref: BlockTaps
    lp: BlockTaps
    r_attn: float
    r_ffn: float
    r_block: float
    r_ln: tuple[float, float]


@dataclass
class DualTrace:
    spec: PrecisionSpec
    X0: np.ndarray
    layers: list[LayerTrace]

    @property
    def r_block(self) -> np.ndarray:
        return np.array([lt.r_block for lt in self.layers])

    def r_tap(self, tap: str) -> np.ndarray:
        key = {"attn": "r_attn", "ffn": "r_ffn", "block": "r_block"}[tap]
        return np.array([getattr(lt, key) for lt in self.layers])

    @property
    def final_mismatch(self) -> float:
        return self.layers[-1].r_block

    def ln_mismatch(self) -> float:
        """Relative mismatch over all LayerNorm outputs of the stack taken together."""
        num = 0.0
        den = 0.0
        for lt in self.layers:
            for a, b in ((lt.lp.ln1_out, lt.ref.ln1_out), (lt.lp.ln2_out, lt.ref.ln2_out)):
                num += float(np.sum((a - b) ** 2))
                den += float(np.sum(b**2))
        return float(np.sqrt(num / den)) if den > 0 else 0.0


def forward_dual(params: Params, X0, lp_spec: PrecisionSpec) -> DualTrace:
    """Reference and emulated passes over identical parameters and inputs."""
    X0 = np.asarray(X0, dtype=np.float64)
    cfg = params.config
    if X0.shape[-1] != cfg.d_model or X0.ndim != 2:
        raise ValueError(f"X0 must be (n, {cfg.d_model}), got {X0.shape}")
    ref = forward(params, X0, REFERENCE)
    lp = forward(params, X0, lp_spec)
    layers = []
    for a, b in zip(ref, lp):
        layers.append(
            LayerTrace(
                ref=a,
                lp=b,
                r_attn=relative_mismatch(b.attn.out, a.attn.out),
                r_ffn=relative_mismatch(b.ffn_out, a.ffn_out),
                r_block=relative_mismatch(b.out, a.out),
                r_ln=(
                    relative_mismatch(b.ln1_out, a.ln1_out),
                    relative_mismatch(b.ln2_out, a.ln2_out),
                ),
            )
        )
    return DualTrace(lp_spec, X0, layers)


def residual_jacobian_norm(
    branch: Callable[[np.ndarray], np.ndarray],
    x,
    *,
    batched: bool = False,
    max_dim: int = MAX_JACOBIAN_DIM,
) -> float:
    """Largest singular value of the Jacobian of ``branch`` at ``x``.

    Dense central differences, one column per input coordinate, with step
    ``1e-5 * max(1, ||x||_inf)``.  With ``batched=True`` the branch is called
    once on a stack of perturbed inputs (leading axis).
    """
    x = np.asarray(x, dtype=np.float64)
    dim = x.size
    if dim > max_dim:
        raise DimensionTooLargeError(f"input dimension {dim} exceeds dense limit {max_dim}")
    h = 1e-5 * max(1.0, float(np.max(np.abs(x))) if dim else 1.0)
    eye = np.eye(dim).reshape(dim, *x.shape)
    if batched:
        plus = np.asarray(branch(x[None] + h * eye))
        minus = np.asarray(branch(x[None] - h * eye))
        cols = (plus - minus).reshape(dim, -1) / (2 * h)
    else:
        cols = np.stack(
            [
                (np.asarray(branch(x + h * e)) - np.asarray(branch(x - h * e))).ravel() / (2 * h)
                for e in eye
            ]
        )
    J = cols.T
    if J.shape[0] > max_dim:
        raise DimensionTooLargeError(f"output dimension {J.shape[0]} exceeds dense limit {max_dim}")
    if not np.any(J):
        return 0.0
    return float(np.linalg.svd(J, compute_uv=False)[0])


def attention_branch(layer: LayerParams, n_heads: int) -> Callable[[np.ndarray], np.ndarray]:
    g, b, e = layer.ln(0)
    return lambda X: attention_forward(ln_forward(X, g, b, e), layer, REFERENCE, n_heads).out


def ffn_branch(layer: LayerParams) -> Callable[[np.ndarray], np.ndarray]:
    g, b, e = layer.ln(1)
    return lambda X: ffn_forward(ln_forward(X, g, b, e), layer, REFERENCE)


def layer_residual_gains(params: Params, taps: BlockTaps, index: int) -> tuple[float, float]:
    """Jacobian norms of the attention and FFN branches at the reference hidden states."""
    layer = params.layers[index]
    ra = residual_jacobian_norm(attention_branch(layer, params.config.n_heads), taps.x_in, batched=True)
    rf = residual_jacobian_norm(ffn_branch(layer), taps.mid, batched=True)
    return ra, rf
