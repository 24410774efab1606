"""Correlation and log-log regression helpers for predictor-vs-mismatch studies."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import NonPositiveValueError, SampleTooSmallError

__all__ = [
    "PairedSample",
    "RegressionRow",
    "SUMMARY_COLUMNS",
    "pearson",
    "pearson_log",
    "spearman",
    "ols",
    "ols_loglog",
    "positive_subset",
    "regression_row",
]

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["proxy_name", "pearson_log", "spearman", "r2", "slope", "r2_raw", "slope_raw", "n"]


@dataclass
class PairedSample:
    x: np.ndarray
    y: np.ndarray
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).ravel()
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have equal length")
        if self.labels and len(self.labels) != len(self.x):
            raise ValueError("labels must match the sample length")
        if len(self.x) < 3:
            raise SampleTooSmallError(f"need at least 3 pairs, got {len(self.x)}")

    def __len__(self) -> int:
        return len(self.x)

    def logs(self) -> tuple[np.ndarray, np.ndarray]:
        if np.any(self.x <= 0) or np.any(self.y <= 0):
            raise NonPositiveValueError("log-space statistics need strictly positive values")
        return np.log(self.x), np.log(self.y)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den == 0.0:
        return float("nan")
    return float(np.clip(np.dot(a, b) / den, -1.0, 1.0))


def pearson_log(sample: PairedSample) -> float:
    lx, ly = sample.logs()
    return pearson(lx, ly)


def spearman(sample: PairedSample) -> float:
    """Pearson correlation of the average-ranked series."""
    return pearson(rankdata(sample.x), rankdata(sample.y))


def ols(a, b) -> tuple[float, float]:
    """Least-squares slope of ``b`` on ``a`` and the coefficient of determination."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac = a - a.mean()
    bc = b - b.mean()
    saa = np.dot(ac, ac)
    if saa == 0.0:
        return float("nan"), float("nan")
    slope = np.dot(ac, bc) / saa
    sst = np.dot(bc, bc)
    if sst == 0.0:
        return float(slope), 1.0
    resid = bc - slope * ac
    r2 = 1.0 - np.dot(resid, resid) / sst
    return float(slope), float(np.clip(r2, 0.0, 1.0))


def ols_loglog(sample: PairedSample) -> tuple[float, float]:
    lx, ly = sample.logs()
    return ols(lx, ly)


def positive_subset(x, y, labels=None, what: str = "sample") -> PairedSample:
    """Drop pairs with a non-positive entry (logging how many) and build a sample."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = (x > 0) & (y > 0)
    dropped = int(np.sum(~keep))
    if dropped:
        log.info("%s: excluded %d non-positive pairs from log-space fit", what, dropped)
    labs = [l for l, k in zip(labels, keep) if k] if labels else []
    return PairedSample(x[keep], y[keep], labs)


@dataclass
class RegressionRow:
    proxy_name: str
    pearson_log: float
    spearman: float
    r2: float
    slope: float
    r2_raw: float
    slope_raw: float
    n: int

    def as_row(self) -> dict:
        return dict(self.__dict__)


def regression_row(name: str, sample: PairedSample) -> RegressionRow:
    """Log-space fit as the primary numbers plus raw-space slope and R²."""
    slope, r2 = ols_loglog(sample)
    slope_raw, r2_raw = ols(sample.x, sample.y)
    return RegressionRow(name, pearson_log(sample), spearman(sample), r2, slope, r2_raw, slope_raw, len(sample))
