"""Monotone LayerNorm epsilon bumps for eps-dominated LayerNorms."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diagnostics import rho_LN, token_variance_median
from .model import BlockTaps, Params

__all__ = [
    "EpsBumpConfig",
    "EpsBumpEvent",
    "EVENT_COLUMNS",
    "propose_eps",
    "maybe_bump",
    "restore",
    "EpsBumpPolicy",
]

EVENT_COLUMNS = ["step", "layer", "ln", "sigma2_median", "rho_before", "eps_before", "eps_after"]


@dataclass(frozen=True)
class EpsBumpConfig:
    rho_star: float = 0.5
    check_interval: int = 5
    subsample_size: int = 16
    eps_min: float = 1e-6
    eps_max: float = 1e-2
    restore_at_end: bool = True

    def problems(self) -> list[str]:
        out = []
        if not 0.0 < self.rho_star < 1.0:
            out.append(f"rho_star = {self.rho_star} must lie in (0, 1)")
        if self.check_interval < 1:
            out.append("check_interval must be >= 1")
        if self.subsample_size < 1:
            out.append("subsample_size must be >= 1")
        if not self.eps_min > 0:
            out.append("eps_min must be > 0")
        if not self.eps_max >= self.eps_min:
            out.append(f"eps_max = {self.eps_max} must be >= eps_min = {self.eps_min}")
        return out


@dataclass(frozen=True)
class EpsBumpEvent:
    step: int
    layer: int
    ln: int
    sigma2_median: float
    rho_before: float
    eps_before: float
    eps_after: float

    def as_row(self) -> dict:
        return asdict(self)


def propose_eps(sigma2_median: float, d_model: int, eps_mach: float, cfg: EpsBumpConfig) -> float:
    """Epsilon that brings the LN indicator to ``rho_star``, clipped to ``[eps_min, eps_max]``."""
    if sigma2_median < 0:
        raise ValueError("sigma2_median must be >= 0")
    cand = sigma2_median * d_model * eps_mach / cfg.rho_star
    return float(min(max(cand, cfg.eps_min), cfg.eps_max))


def maybe_bump(
    params: Params,
    step: int,
    taps: list[BlockTaps],
    cfg: EpsBumpConfig,
    eps_mach: float,
) -> list[EpsBumpEvent]:
    """Raise eps of every eps-dominated LayerNorm on checking steps.

    ``taps`` are the activations of the latest forward pass (the low-precision
    arm); the first ``subsample_size`` token rows of each LN input give the
    median token variance.  ``eps_mach`` must be the compute precision's.
    Mutates ``params`` and returns one event per applied update.
    """
    if step % cfg.check_interval != 0:
        return []
    d = params.config.d_model
    events = []
    for ell, (layer, t) in enumerate(zip(params.layers, taps)):
        for which, x in enumerate(t.ln_inputs):
            sub = np.asarray(x)[..., : cfg.subsample_size, :]
            s2 = token_variance_median(sub)
            eps = layer.ln_eps[which]
            rho = rho_LN(s2, eps, d, eps_mach)
            if not rho < 1.0:
                continue
            new = propose_eps(s2, d, eps_mach, cfg)
            if new > eps:
                layer.ln_eps[which] = new
                events.append(EpsBumpEvent(step, ell, which, s2, rho, eps, new))
    return events


def restore(params: Params, events: list[EpsBumpEvent]) -> None:
    """Undo ``events``: every touched LN gets back its eps from before its first bump."""
    for ev in reversed(events):
        params.layers[ev.layer].ln_eps[ev.ln] = ev.eps_before


class EpsBumpPolicy:
    """Stateful wrapper that records events across a run; disabled policies never act."""

    def __init__(self, cfg: EpsBumpConfig, enabled: bool = True):
        self.cfg = cfg
        self.enabled = enabled
        self.events: list[EpsBumpEvent] = []

    def __call__(self, params: Params, step: int, taps: list[BlockTaps], eps_mach: float) -> list[EpsBumpEvent]:
        if not self.enabled:
            return []
        new = maybe_bump(params, step, taps, self.cfg, eps_mach)
        self.events.extend(new)
        return new

    def finish(self, params: Params) -> None:
        if self.cfg.restore_at_end:
            restore(params, self.events)
