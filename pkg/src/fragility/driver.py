"""Desk-scale experiment runners: width/precision sweeps, planted lead-lag
scenarios and matched control-vs-intervention runs."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diagnostics import (
    DiagnosticsOptions,
    config_predictor,
    diagnostics_records,
    kappa_softmax_rows,
    trace_diagnostics,
)
from .earlywarning import SpikeConfig, lag_scan, permutation_pvalue, precision_at_k
from .errors import SampleTooSmallError
from .io import write_csv
from .mitigation import EVENT_COLUMNS, EpsBumpConfig, EpsBumpEvent, EpsBumpPolicy
from .model import ModelConfig, Params, forward, forward_dual, init_params
from .precision import REFERENCE, PrecisionSpec, effective_eps
from .stats import SUMMARY_COLUMNS, positive_subset, regression_row

__all__ = [
    "SweepConfig",
    "Trajectory",
    "Exp3Config",
    "RunLog",
    "WeightPath",
    "TiePlanter",
    "substream",
    "derive_seed",
    "max_kappa_softmax",
    "run_exp1",
    "run_exp2",
    "run_exp3",
    "exp2_series",
    "exp3_arm",
]

log = logging.getLogger(__name__)

MODES = ("drift", "scripted_tie")
TAPS = ("attn", "ffn", "block")

# substream purposes
_MODEL, _INPUT, _DRIFT, _TARGET, _BETA, _PERM = range(6)


@dataclass(frozen=True)
class SweepConfig:
    widths: tuple[int, ...] = (32, 64)
    precisions: tuple[str, ...] = ("bf16-native", "fp16-native")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    steps: int = 195
    tail_fraction: float = 0.25
    tap: str = "block"
    predictor_reduce: str = "sum"

    def specs(self) -> list[PrecisionSpec]:
        return [PrecisionSpec.parse(p) for p in self.precisions]

    def problems(self, min_steps: int = 1) -> list[str]:
        out = []
        for name in ("widths", "precisions", "seeds"):
            if len(getattr(self, name)) == 0:
                out.append(f"{name} must be nonempty")
        for p in self.precisions:
            try:
                PrecisionSpec.parse(p)
            except ValueError as exc:
                out.append(str(exc))
        if any(int(w) < 1 for w in self.widths):
            out.append("widths must be positive")
        if self.steps < min_steps:
            out.append(f"steps = {self.steps} must be >= {min_steps}")
        if not 0.0 < self.tail_fraction <= 1.0:
            out.append("tail_fraction must lie in (0, 1]")
        if self.tap not in TAPS:
            out.append(f"tap must be one of {', '.join(TAPS)}")
        if self.predictor_reduce not in ("sum", "max"):
            out.append("predictor_reduce must be 'sum' or 'max'")
        return out


@dataclass(frozen=True)
class Trajectory:
    """Scripted weight path.

    ``drift`` is a mean-reverting random walk of every weight matrix around
    its initial value.  ``scripted_tie`` adds, in layer 0 / head 0, a query
    edit that drives two logits of one score row through a tie at
    ``tie_step`` and a value-conditioning degradation that follows the
    measured ``kappa_softmax`` series ``lag`` steps later.
    """

    mode: str = "scripted_tie"
    scale: float = 0.01  # stationary std of the drift, relative to init std
    reversion: float = 0.9
    tie_step: int = 97
    tie_sharpness: float = 0.15
    tie_logit: float = 12.0
    lag: int = 16
    gain: float = 40.0

    def problems(self, steps: int | None = None, max_lag: int = 60) -> list[str]:
        out = []
        if self.mode not in MODES:
            out.append(f"mode must be one of {', '.join(MODES)}")
        if self.scale < 0:
            out.append("scale must be >= 0")
        if not 0.0 <= self.reversion < 1.0:
            out.append("reversion must lie in [0, 1)")
        if self.tie_sharpness <= 0:
            out.append("tie_sharpness must be > 0")
        if self.lag < 0:
            out.append("lag must be >= 0")
        if self.gain < 0:
            out.append("gain must be >= 0")
        if self.mode == "scripted_tie" and steps is not None:
            if not max_lag <= self.tie_step <= steps - 1 - max_lag:
                out.append(
                    f"tie_step = {self.tie_step} must leave {max_lag} steps on each side of a {steps}-step run"
                )
        return out


@dataclass(frozen=True)
class Exp3Config:
    """Grid and input scenario of the control-vs-intervention study.

    Inputs are ``offset + std * z`` with ``std`` chosen so the LayerNorm
    indicator of the raw input equals ``input_rho``; LN shifts are drawn
    with standard deviation ``beta_std``.
    """

    rho_stars: tuple[float, ...] = (0.5, 0.6, 0.7)
    eps_maxes: tuple[float, ...] = (5e-3, 1e-2)
    steps: int = 60
    tail_steps: int = 50
    input_offset: float = 0.2
    input_rho: float = 0.9
    beta_std: float = 1.0

    def problems(self) -> list[str]:
        out = []
        if not self.rho_stars or not self.eps_maxes:
            out.append("rho_stars and eps_maxes must be nonempty")
        if any(not 0 < r < 1 for r in self.rho_stars):
            out.append("rho_stars must lie in (0, 1)")
        if any(not e > 0 for e in self.eps_maxes):
            out.append("eps_maxes must be > 0")
        if not 1 <= self.tail_steps <= self.steps:
            out.append("tail_steps must lie in [1, steps]")
        if not self.input_rho > 0:
            out.append("input_rho must be > 0")
        if self.beta_std < 0:
            out.append("beta_std must be >= 0")
        return out


@dataclass
class RunLog:
    """Per-step series of one run; every list has one entry per step."""

    r_block: list[float] = field(default_factory=list)
    loss_proxy: list[float] = field(default_factory=list)
    kappa_softmax: list[float] = field(default_factory=list)
    ln_mismatch: list[float] = field(default_factory=list)
    records: list = field(default_factory=list)
    events: list[EpsBumpEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.r_block)

    def complete(self) -> bool:
        n = len(self.r_block)
        return all(len(s) in (0, n) for s in (self.loss_proxy, self.kappa_softmax, self.ln_mismatch))


def substream(root_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a ``(seed, purpose, ...)`` key under ``root_seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), *map(int, key)]))


def derive_seed(root_seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([int(root_seed), *map(int, key)]).generate_state(1)[0])


_MATRICES = ("w_q", "w_k", "w_v", "w_o", "w1", "w2")


class WeightPath:
    """Mean-reverting drift of all weight matrices around ``base``.

    ``D_{t+1} = a D_t + scale sqrt(1 - a^2) Z_t / sqrt(fan_in)``, so the
    stationary std of each entry is ``scale`` times its init std.
    """

    def __init__(self, base: Params, traj: Trajectory, rng: np.random.Generator):
        self.base = base
        self.traj = traj
        self.rng = rng
        self.offsets = [{n: np.zeros_like(getattr(lp, n)) for n in _MATRICES} for lp in base.layers]

    def step(self) -> Params:
        a = self.traj.reversion
        k = self.traj.scale * math.sqrt(1.0 - a * a)
        out = self.base.copy()
        for lp, off in zip(out.layers, self.offsets):
            for n in _MATRICES:
                w = getattr(lp, n)
                off[n] = a * off[n] + k * self.rng.standard_normal(w.shape) / math.sqrt(w.shape[0])
                setattr(lp, n, w + off[n])
        return out


class TiePlanter:
    """Plants a softmax tie in layer 0, head 0 and a delayed value-conditioning loss.

    The query edit is a rank-one update of ``W_Q`` that changes only one row
    of ``Q`` (the row ``row`` of the normalized input is mapped through a
    pseudo-inverse).  The value edit shrinks the smallest singular value of
    the head's ``W_V`` block by ``s`` and rescales ``W_O`` to compensate, so
    the reference function is unchanged while rounding error in that
    direction grows like ``1/s``.
    """

    def __init__(self, params: Params, X0: np.ndarray, traj: Trajectory):
        from .model import ln_forward

        cfg = params.config
        self.traj = traj
        self.dh = cfg.d_head
        layer = params.layers[0]
        g, b, e = layer.ln(0)
        H = ln_forward(X0, g, b, e)
        self.H = H
        self.row = 0
        self.u = np.linalg.pinv(H)[:, self.row]  # H @ u = e_row
        Q = H @ layer.w_q[:, : self.dh]
        K = H @ layer.w_k[:, : self.dh]
        self.pair = self._pick_pair(Q, K)

    def _pick_pair(self, Q, K) -> tuple[int, int]:
        # the pair whose planted logits clear every other logit of the row by the most
        n = K.shape[0]
        best, pair = -np.inf, (1, 2)
        for j in range(n):
            for k in range(j + 1, n):
                v = self._edit(Q[self.row], K, (j, k), 0.0)
                s = (Q[self.row] + v) @ K.T / math.sqrt(self.dh)
                rest = np.delete(s, [j, k])
                margin = self.traj.tie_logit - rest.max()
                if margin > best:
                    best, pair = margin, (j, k)
        return pair

    def _edit(self, q, K, pair, delta) -> np.ndarray:
        # minimum-norm change of q putting logits j, k at L + delta/2, L - delta/2
        j, k = pair
        L = self.traj.tie_logit
        sc = 1.0 / math.sqrt(self.dh)
        M = np.stack([K[j], K[k]]) * sc
        rhs = np.array([L + delta / 2, L - delta / 2]) - M @ q
        return np.linalg.lstsq(M, rhs, rcond=None)[0]

    def apply_tie(self, params: Params, step: int) -> None:
        layer = params.layers[0]
        dh = self.dh
        Q = self.H @ layer.w_q[:, :dh]
        K = self.H @ layer.w_k[:, :dh]
        delta = self.traj.tie_sharpness * (step - self.traj.tie_step)
        v = self._edit(Q[self.row], K, self.pair, delta)
        layer.w_q[:, :dh] += np.outer(self.u, v)

    def apply_value(self, params: Params, kappa_lagged: float) -> float:
        """Shrink the head's weakest value direction by ``1 / (1 + gain * kappa)``."""
        layer = params.layers[0]
        dh = self.dh
        inv_s = 1.0 + self.traj.gain * kappa_lagged
        U, S, Vt = np.linalg.svd(layer.w_v[:, :dh], full_matrices=False)
        S2 = S.copy()
        S2[-1] /= inv_s
        layer.w_v[:, :dh] = (U * S2) @ Vt
        layer.w_o[:dh, :] = Vt.T @ np.diag(S / S2) @ Vt @ layer.w_o[:dh, :]
        return inv_s


def max_kappa_softmax(taps) -> float:
    """Largest row sensitivity of the softmax over every layer and head."""
    return float(max(np.max(kappa_softmax_rows(t.attn.S, t.attn.P)) for t in taps))


def _loss(out: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((out - target) ** 2))


def _tail(values, fraction: float) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    k = max(1, math.ceil(fraction * len(v)))
    return v[-k:]


# ---------------------------------------------------------------- Exp-1


def _exp1_config(args) -> dict:
    sweep, model, traj, root_seed, seed, width, prec = args
    spec = PrecisionSpec.parse(prec)
    mcfg = replace(model, d_model=width, seed=derive_seed(root_seed, seed, _MODEL, width))
    params = init_params(mcfg)
    X0 = substream(root_seed, seed, _INPUT, width).standard_normal((mcfg.seq_len, width))
    path = WeightPath(params, replace(traj, mode="drift"), substream(root_seed, seed, _DRIFT, width))
    opts = DiagnosticsOptions(compute_rho=False)
    r, preds, raw = [], [], []
    for step in range(sweep.steps):
        p = path.step()
        trace = forward_dual(p, X0, spec)
        diags, _ = trace_diagnostics(p, trace, opts)
        rv = float(trace.r_tap(sweep.tap)[-1])
        pv = config_predictor(diags, sweep.predictor_reduce)
        r.append(rv)
        preds.append(pv)
        raw.append(dict(seed=seed, width=width, precision=spec.label, step=step, r=rv,
                        predictor=pv, predictor_eps=pv * effective_eps(spec)))
    tail = float(np.percentile(_tail(r, sweep.tail_fraction), 95))
    pred = float(np.mean(preds))
    eps = effective_eps(spec)
    summary = dict(seed=seed, width=width, precision=spec.label, eps=eps, tail_r=tail,
                   predictor=pred, predictor_eps=pred * eps)
    return dict(summary=summary, raw=raw)


RAW1_COLUMNS = ["seed", "width", "precision", "step", "r", "predictor", "predictor_eps"]
CONFIG1_COLUMNS = ["seed", "width", "precision", "eps", "tail_r", "predictor", "predictor_eps"]


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def run_exp1(
    sweep: SweepConfig,
    model: ModelConfig = ModelConfig(),
    traj: Trajectory = Trajectory(mode="drift"),
    root_seed: int = 0,
    out_dir=None,
    jobs: int = 1,
) -> dict:
    """Predictor-vs-tail-mismatch sweep over seeds, widths and precisions.

    Returns ``{"configs": [...], "raw": [...], "regressions": [...], "skipped": reason | None}``.
    Regressions are log-space fits of the per-config 95th-percentile mismatch
    tail on the predictor and on ``predictor * eps``: pooled over every
    precision (the mixed view) and within each precision.
    """
    items = [
        (sweep, model, traj, root_seed, s, w, p)
        for s in sweep.seeds
        for w in sweep.widths
        for p in sweep.precisions
    ]
    results = _pmap(_exp1_config, items, jobs)
    configs = [r["summary"] for r in results]
    raw = [row for r in results for row in r["raw"]]
    regressions, skipped = [], None
    tails = np.array([c["tail_r"] for c in configs])
    if not np.any(tails > 0):
        skipped = "all mismatches are zero (reference precision only)"
        log.info("exp1 regression skipped: %s", skipped)
    else:
        labels = [f'{c["seed"]}/{c["width"]}/{c["precision"]}' for c in configs]
        groups = [("mixed", configs, labels)]
        precs = sorted({c["precision"] for c in configs})
        if len(precs) > 1:
            for p in precs:
                sel = [i for i, c in enumerate(configs) if c["precision"] == p]
                groups.append((p, [configs[i] for i in sel], [labels[i] for i in sel]))
        for name, cs, labs in groups:
            for proxy in ("predictor", "predictor_eps"):
                try:
                    sample = positive_subset([c[proxy] for c in cs], [c["tail_r"] for c in cs],
                                             labs, f"exp1 {name} {proxy}")
                except SampleTooSmallError:
                    if name == "mixed":
                        raise
                    log.info("exp1 %s %s: fewer than 3 positive pairs, skipped", name, proxy)
                    continue
                row = regression_row(proxy if name == "mixed" else f"{proxy}[{name}]", sample)
                regressions.append(row.as_row())
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "exp1_raw.csv", raw, RAW1_COLUMNS)
        write_csv(out / "exp1_configs.csv", configs, CONFIG1_COLUMNS)
        write_csv(out / "exp1_regression.csv", regressions, SUMMARY_COLUMNS)
    return dict(configs=configs, raw=raw, regressions=regressions, skipped=skipped)


# ---------------------------------------------------------------- Exp-2


def exp2_series(
    model: ModelConfig,
    traj: Trajectory,
    spec: PrecisionSpec,
    steps: int,
    root_seed: int,
    seed: int,
    records: bool = False,
) -> RunLog:
    """Evolve one seed's weights and log kappa_softmax, final mismatch and loss per step."""
    mcfg = replace(model, seed=derive_seed(root_seed, seed, _MODEL))
    params = init_params(mcfg)
    X0 = substream(root_seed, seed, _INPUT).standard_normal((mcfg.seq_len, mcfg.d_model))
    target = substream(root_seed, seed, _TARGET).standard_normal(X0.shape)
    path = WeightPath(params, traj, substream(root_seed, seed, _DRIFT))
    tie = TiePlanter(params, X0, traj) if traj.mode == "scripted_tie" else None
    run = RunLog()
    kappa0 = None
    for step in range(steps):
        p = path.step()
        if tie is not None:
            tie.apply_tie(p, step)
            if kappa0 is None:
                kappa0 = max_kappa_softmax(forward(p, X0, REFERENCE))
            src = run.kappa_softmax[step - traj.lag] if step >= traj.lag else kappa0
            tie.apply_value(p, src)
        trace = forward_dual(p, X0, spec)
        run.kappa_softmax.append(max_kappa_softmax([lt.ref for lt in trace.layers]))
        run.r_block.append(trace.final_mismatch)
        run.loss_proxy.append(_loss(trace.layers[-1].lp.out, target))
        run.ln_mismatch.append(trace.ln_mismatch())
        if records:
            diags, bound = trace_diagnostics(p, trace, DiagnosticsOptions(compute_rho=False))
            run.records.extend(diagnostics_records(step, trace, diags, bound))
    return run


LEADLAG_COLUMNS = ["seed", "target_name", "best_lag", "best_corr", "p_value", "precision_at_k", "K", "planted_lag"]
SERIES2_COLUMNS = ["seed", "step", "kappa_softmax", "r_block", "loss_proxy"]


def _exp2_seed(args) -> dict:
    model, traj, spec_text, steps, spike, root_seed, seed = args
    spec = PrecisionSpec.parse(spec_text)
    run = exp2_series(model, traj, spec, steps, root_seed, seed)
    rows = []
    planted = traj.lag if traj.mode == "scripted_tie" else ""
    for j, (name, target) in enumerate((("fwd_error", run.r_block), ("loss_proxy", run.loss_proxy))):
        res = lag_scan(run.kappa_softmax, target, spike)
        p = permutation_pvalue(run.kappa_softmax, target, spike, substream(root_seed, seed, _PERM, j))
        rows.append(dict(seed=seed, target_name=name, best_lag=res.best_lag, best_corr=res.best_corr,
                         p_value=p, precision_at_k=precision_at_k(run.kappa_softmax, target, spike),
                         K=spike.k_for(steps), planted_lag=planted))
    series = [
        dict(seed=seed, step=t, kappa_softmax=run.kappa_softmax[t], r_block=run.r_block[t],
             loss_proxy=run.loss_proxy[t])
        for t in range(steps)
    ]
    return dict(rows=rows, series=series)


def run_exp2(
    seeds,
    steps: int = 195,
    trajectory: Trajectory = Trajectory(),
    model: ModelConfig = ModelConfig(),
    spike: SpikeConfig = SpikeConfig(),
    precision: str = "fp16-native",
    root_seed: int = 0,
    out_dir=None,
    jobs: int = 1,
) -> dict:
    """Lead-lag reports of max kappa_softmax against forward error and loss, one row per seed and target."""
    items = [(model, trajectory, precision, steps, spike, root_seed, s) for s in seeds]
    results = _pmap(_exp2_seed, items, jobs)
    rows = [r for res in results for r in res["rows"]]
    series = [r for res in results for r in res["series"]]
    fwd = [r for r in rows if r["target_name"] == "fwd_error"]
    loss = [r for r in rows if r["target_name"] == "loss_proxy"]
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "leadlag.csv", fwd, LEADLAG_COLUMNS)
        write_csv(out / "leadlag_loss.csv", loss, LEADLAG_COLUMNS)
        write_csv(out / "exp2_series.csv", series, SERIES2_COLUMNS)
    return dict(fwd_error=fwd, loss_proxy=loss, series=series)


# ---------------------------------------------------------------- Exp-3


def _exp3_setup(model: ModelConfig, exp3: Exp3Config, spec: PrecisionSpec, root_seed: int, seed: int):
    mcfg = replace(model, seed=derive_seed(root_seed, seed, _MODEL))
    params = init_params(mcfg)
    rng = substream(root_seed, seed, _BETA)
    for lp in params.layers:
        lp.ln1_beta = exp3.beta_std * rng.standard_normal(mcfg.d_model)
        lp.ln2_beta = exp3.beta_std * rng.standard_normal(mcfg.d_model)
    # input std putting the LN indicator of the raw input at input_rho
    var = exp3.input_rho * mcfg.ln_eps / (mcfg.d_model * spec.compute.eps_mach)
    return params, math.sqrt(var)


def exp3_arm(
    model: ModelConfig,
    exp3: Exp3Config,
    traj: Trajectory,
    spec: PrecisionSpec,
    bump: EpsBumpConfig | None,
    root_seed: int,
    seed: int,
) -> RunLog:
    """One arm of the matched study; ``bump=None`` is the control arm.

    Both arms draw inputs, drift and targets from the same substreams, so they
    differ only through the LayerNorm eps updates.
    """
    params, std = _exp3_setup(model, exp3, spec, root_seed, seed)
    d, n = params.config.d_model, params.config.seq_len
    data = substream(root_seed, seed, _INPUT)
    target = substream(root_seed, seed, _TARGET).standard_normal((n, d))
    path = WeightPath(params, replace(traj, mode="drift"), substream(root_seed, seed, _DRIFT))
    policy = EpsBumpPolicy(bump, enabled=True) if bump is not None else None
    eps_state = params.ln_eps_snapshot()
    run = RunLog()
    for step in range(1, exp3.steps + 1):
        p = path.step()
        for lp, eps in zip(p.layers, eps_state):
            lp.ln_eps = list(eps)
        X = exp3.input_offset + std * data.standard_normal((n, d))
        trace = forward_dual(p, X, spec)
        run.r_block.append(trace.final_mismatch)
        run.loss_proxy.append(_loss(trace.layers[-1].lp.out, target))
        run.ln_mismatch.append(trace.ln_mismatch())
        if policy is not None:
            policy(p, step, [lt.lp for lt in trace.layers], spec.compute.eps_mach)
            eps_state = p.ln_eps_snapshot()
    if policy is not None:
        run.events = list(policy.events)
    return run


EXP3_COLUMNS = [
    "rho_star", "eps_max", "delta_loss", "delta_loss_std", "delta_r", "delta_r_std",
    "delta_ln", "delta_ln_std", "n_seeds", "n_events",
]
EXP3_SEED_COLUMNS = [
    "seed", "rho_star", "eps_max", "control_loss", "control_r", "control_ln",
    "intervention_loss", "intervention_r", "intervention_ln", "n_events",
]


def _tail_mean(v, k: int) -> float:
    return float(np.mean(np.asarray(v)[-k:]))


def _exp3_seed(args) -> dict:
    model, exp3, traj, bump_base, spec_text, root_seed, seed, enabled = args
    spec = PrecisionSpec.parse(spec_text)
    k = exp3.tail_steps
    control = exp3_arm(model, exp3, traj, spec, None, root_seed, seed)
    rows, events = [], []
    for rho in exp3.rho_stars:
        for cap in exp3.eps_maxes:
            cfg = replace(bump_base, rho_star=rho, eps_max=cap)
            arm = exp3_arm(model, exp3, traj, spec, cfg if enabled else None, root_seed, seed)
            rows.append(dict(
                seed=seed, rho_star=rho, eps_max=cap,
                control_loss=_tail_mean(control.loss_proxy, k),
                control_r=_tail_mean(control.r_block, k),
                control_ln=_tail_mean(control.ln_mismatch, k),
                intervention_loss=_tail_mean(arm.loss_proxy, k),
                intervention_r=_tail_mean(arm.r_block, k),
                intervention_ln=_tail_mean(arm.ln_mismatch, k),
                n_events=len(arm.events),
            ))
            events.extend(dict(seed=seed, rho_star=rho, eps_max=cap, **e.as_row()) for e in arm.events)
    return dict(rows=rows, events=events)


def run_exp3(
    seeds,
    exp3: Exp3Config = Exp3Config(),
    bump: EpsBumpConfig = EpsBumpConfig(),
    model: ModelConfig = ModelConfig(),
    traj: Trajectory = Trajectory(mode="drift"),
    precision: str = "bf16-native",
    root_seed: int = 0,
    out_dir=None,
    jobs: int = 1,
    enabled: bool = True,
) -> dict:
    """Control-vs-intervention tail means, summarized as ``control - intervention`` per grid cell."""
    items = [(model, exp3, traj, bump, precision, root_seed, s, enabled) for s in seeds]
    results = _pmap(_exp3_seed, items, jobs)
    per_seed = [r for res in results for r in res["rows"]]
    events = [e for res in results for e in res["events"]]
    summary = []
    for rho in exp3.rho_stars:
        for cap in exp3.eps_maxes:
            cell = [r for r in per_seed if r["rho_star"] == rho and r["eps_max"] == cap]
            row = dict(rho_star=rho, eps_max=cap, n_seeds=len(cell),
                       n_events=int(sum(r["n_events"] for r in cell)))
            for key, name in (("loss", "delta_loss"), ("r", "delta_r"), ("ln", "delta_ln")):
                d = np.array([r[f"control_{key}"] - r[f"intervention_{key}"] for r in cell])
                row[name] = float(d.mean())
                row[f"{name}_std"] = float(d.std(ddof=1)) if len(d) > 1 else 0.0
            summary.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "exp3_summary.csv", summary, EXP3_COLUMNS)
        write_csv(out / "exp3_seeds.csv", per_seed, EXP3_SEED_COLUMNS)
        write_csv(out / "exp3_events.csv", events, ["seed", "rho_star", "eps_max", *EVENT_COLUMNS])
    return dict(summary=summary, per_seed=per_seed, events=events)
