"""Lead-lag scans, surrogate permutation tests and Spike Precision@K."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConstantSeriesError

__all__ = [
    "SpikeConfig",
    "LagScanResult",
    "TimeSeries",
    "zscore",
    "lag_correlations",
    "lag_scan",
    "permutation_pvalue",
    "detect_spikes",
    "precision_at_k",
    "lead_lag_report",
]


@dataclass(frozen=True)
class SpikeConfig:
    horizon: int = 40
    window: int = 20
    z_threshold: float = 1.5
    K: int | None = None  # None -> ceil(0.1 * T)
    max_lag: int = 60
    n_perm: int = 999
    perm_scheme: str = "phase"  # phase | circular

    def problems(self) -> list[str]:
        out = []
        if self.perm_scheme not in ("phase", "circular"):
            out.append("perm_scheme must be 'phase' or 'circular'")
        for name in ("horizon", "window", "max_lag"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.n_perm < 0:
            out.append("n_perm must be >= 0")
        if not self.z_threshold > 0:
            out.append("z_threshold must be > 0")
        if self.K is not None and self.K < 1:
            out.append("K must be >= 1")
        return out

    def k_for(self, T: int) -> int:
        k = self.K if self.K is not None else math.ceil(0.1 * T)
        if not 1 <= k <= T:
            raise ValueError(f"K = {k} outside [1, {T}]")
        return k


@dataclass
class TimeSeries:
    name: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or not np.all(np.isfinite(self.values)):
            raise ValueError(f"series {self.name!r} must be 1-D and finite")

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class LagScanResult:
    best_lag: int
    best_corr: float
    p_value: float | None = None


def _values(series) -> np.ndarray:
    if isinstance(series, TimeSeries):
        return series.values
    return np.asarray(series, dtype=np.float64)


def zscore(series) -> np.ndarray:
    """Standardize with the population standard deviation."""
    x = _values(series)
    sd = x.std()
    if not sd > 0:
        raise ConstantSeriesError("cannot z-score a constant series")
    return (x - x.mean()) / sd


def _lag_order(max_lag: int) -> np.ndarray:
    # preference order for ties: |lag| ascending, positive before negative
    order = [0]
    for k in range(1, max_lag + 1):
        order += [k, -k]
    return np.array(order)


def lag_correlations(predictor, target, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Pearson correlation of ``predictor[t]`` with ``target[t + lag]`` for every lag.

    ``predictor`` may be 2-D (a stack of series, one per row); the result then
    has one row of correlations per series.  Returns ``(lags, corr)``.
    """
    x = np.atleast_2d(np.asarray(predictor, dtype=np.float64))
    y = np.asarray(target, dtype=np.float64)
    T = y.shape[-1]
    if x.shape[-1] != T:
        raise ValueError("series lengths differ")
    lags = np.arange(-max_lag, max_lag + 1)
    corr = np.empty((x.shape[0], len(lags)))
    for j, lag in enumerate(lags):
        if lag >= 0:
            a, b = x[:, : T - lag], y[lag:]
        else:
            a, b = x[:, -lag:], y[: T + lag]
        a = a - a.mean(axis=1, keepdims=True)
        b = b - b.mean()
        den = np.sqrt(np.sum(a * a, axis=1) * np.sum(b * b))
        with np.errstate(invalid="ignore", divide="ignore"):
            c = (a @ b) / den
        corr[:, j] = np.where(den > 0, c, 0.0)
    if np.ndim(predictor) == 1:
        return lags, corr[0]
    return lags, corr


def _best(lags, corr_row, order) -> tuple[int, float]:
    idx = order + (len(lags) // 2)
    vals = np.abs(corr_row[idx])
    k = int(np.argmax(vals))  # first maximum in preference order
    return int(lags[idx[k]]), float(corr_row[idx[k]])


def lag_scan(predictor, target, cfg: SpikeConfig = SpikeConfig()) -> LagScanResult:
    """Lag in ``[-max_lag, max_lag]`` with the largest absolute correlation.

    A positive lag means the predictor leads the target.
    """
    x = zscore(predictor)
    y = zscore(target)
    T = len(x)
    if len(y) != T:
        raise ValueError("series lengths differ")
    if T < 2 * cfg.max_lag + 2:
        raise ValueError(f"series too short ({T}) for max_lag {cfg.max_lag}")
    lags, corr = lag_correlations(x, y, cfg.max_lag)
    lag, c = _best(lags, corr, _lag_order(cfg.max_lag))
    return LagScanResult(lag, c)


def _circular_surrogates(x: np.ndarray, cfg: SpikeConfig, rng) -> np.ndarray:
    T = len(x)
    lo = max(cfg.window, cfg.max_lag + 1)
    hi = T - lo
    if hi < lo:
        raise ValueError("series too short for the circular-shift window")
    shifts = rng.integers(lo, hi + 1, size=cfg.n_perm)
    return x[(np.arange(T)[None, :] - shifts[:, None]) % T]


def _phase_surrogates(x: np.ndarray, cfg: SpikeConfig, rng) -> np.ndarray:
    T = len(x)
    F = np.fft.rfft(x)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(cfg.n_perm, len(F)))
    phase[:, 0] = 0.0
    if T % 2 == 0:
        phase[:, -1] = 0.0
    return np.fft.irfft(F * np.exp(1j * phase), n=T)


def permutation_pvalue(predictor, target, cfg: SpikeConfig = SpikeConfig(), rng=None) -> float:
    """Permutation p-value of the best-lag correlation.

    Every surrogate predictor is rescanned over all lags and keeps its own
    best ``|corr|``; ``p = (1 + #{surrogate >= observed}) / (n_perm + 1)``.

    Surrogates preserve the predictor's autocorrelation.  ``"phase"``
    (default) shifts every Fourier component of the predictor by an
    independent random phase, which keeps the periodogram exactly.
    ``"circular"`` shifts the whole series by one random offset in
    ``[m, T - m]``, ``m = max(window, max_lag + 1)``; with the best lag
    re-selected per permutation it is anti-conservative on short series,
    because each shift rescans most of the same circular offsets.
    """
    if cfg.n_perm == 0:
        return 1.0
    rng = np.random.default_rng(rng)
    x = zscore(predictor)
    y = zscore(target)
    _, corr = lag_correlations(x, y, cfg.max_lag)
    observed = float(np.max(np.abs(corr)))
    if cfg.perm_scheme == "circular":
        surr = _circular_surrogates(x, cfg, rng)
    else:
        surr = _phase_surrogates(x, cfg, rng)
    _, pc = lag_correlations(surr, y, cfg.max_lag)
    perm_best = np.max(np.abs(pc), axis=1)
    exceed = int(np.sum(perm_best >= observed))
    return (1 + exceed) / (cfg.n_perm + 1)


def detect_spikes(series, cfg: SpikeConfig = SpikeConfig()) -> np.ndarray:
    """Steps whose value exceeds the trailing-window mean by ``z_threshold`` trailing stds."""
    v = _values(series)
    w = cfg.window
    if len(v) <= w:
        raise ValueError("series must be longer than the rolling window")
    win = np.lib.stride_tricks.sliding_window_view(v[:-1], w)  # win[t - w] = v[t-w : t]
    base = win[:, :1]
    centered = win - base  # exact zeros for constant windows
    mean = base[:, 0] + centered.mean(axis=1)
    sd = np.maximum(centered.std(axis=1), 1e-12)
    z = (v[w:] - mean) / sd
    return np.flatnonzero(z > cfg.z_threshold) + w


def precision_at_k(predictor, target, cfg: SpikeConfig = SpikeConfig()) -> float:
    """Fraction of the K largest predictor steps followed by a target spike within the horizon."""
    x = _values(predictor)
    T = len(x)
    k = cfg.k_for(T)
    alarms = np.argsort(-x, kind="stable")[:k]
    spikes = np.zeros(T + cfg.horizon + 1, dtype=bool)
    spikes[detect_spikes(target, cfg)] = True
    csum = np.concatenate([[0], np.cumsum(spikes)])
    # spikes in (t, t + H]
    hits = csum[alarms + cfg.horizon + 1] - csum[alarms + 1] > 0
    return float(np.mean(hits))


def lead_lag_report(predictor, target, cfg: SpikeConfig = SpikeConfig(), rng=None) -> LagScanResult:
    res = lag_scan(predictor, target, cfg)
    res.p_value = permutation_pvalue(predictor, target, cfg, rng)
    return res
