"""Low-precision floating-point formats and their rounding.

Values are carried as float64 and re-rounded into the target format after
every emulated scalar operation (round-to-nearest-even).  FP32 is treated as
the reference precision by the kernels in :mod:`fragility.linalg`; the
rounding functions here still round into FP32 when asked directly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import ml_dtypes
import numpy as np

from .errors import FpOverflowError

__all__ = [
    "Accumulate",
    "Context",
    "FpFormat",
    "PrecisionSpec",
    "eps_mach",
    "effective_eps",
    "round_to",
    "REFERENCE",
]


class FpFormat(enum.Enum):
    # name: (mantissa bits, min normal exponent, max exponent)
    FP32 = ("fp32", 23, -126, 127)
    BF16 = ("bf16", 7, -126, 127)
    FP16 = ("fp16", 10, -14, 15)

    def __init__(self, label: str, mantissa_bits: int, emin: int, emax: int):
        self.label = label
        self.mantissa_bits = mantissa_bits
        self.emin = emin
        self.emax = emax
        self.eps_mach = 2.0 ** -mantissa_bits
        self.max_finite = (2.0 - 2.0 ** -mantissa_bits) * 2.0 ** emax
        self.min_normal = 2.0 ** emin

    @classmethod
    def from_name(cls, name: str) -> "FpFormat":
        key = str(name).strip().lower()
        for fmt in cls:
            if fmt.label == key:
                return fmt
        raise ValueError(f"unknown float format {name!r} (expected fp32, bf16 or fp16)")


class Accumulate(enum.Enum):
    NATIVE = "native"
    FP32_ACC = "fp32"

    @classmethod
    def from_name(cls, name: str) -> "Accumulate":
        key = str(name).strip().lower()
        for acc in cls:
            if acc.value == key:
                return acc
        raise ValueError(f"unknown accumulation {name!r} (expected native or fp32)")


class Context(enum.Enum):
    GENERAL = "general"
    LAYERNORM = "layernorm"


@dataclass(frozen=True)
class PrecisionSpec:
    """A compute format plus accumulation policy.

    ``context`` only matters for :func:`effective_eps`: LayerNorm kernels
    use the compute precision even when accumulation is FP32.
    """

    compute: FpFormat = FpFormat.FP32
    accumulate: Accumulate = Accumulate.NATIVE
    context: Context = Context.GENERAL

    @property
    def is_reference(self) -> bool:
        return self.compute is FpFormat.FP32

    @property
    def accumulator(self) -> FpFormat:
        if self.context is Context.LAYERNORM or self.accumulate is Accumulate.NATIVE:
            return self.compute
        return FpFormat.FP32

    def with_context(self, context: Context) -> "PrecisionSpec":
        return PrecisionSpec(self.compute, self.accumulate, context)

    @property
    def label(self) -> str:
        return f"{self.compute.label}-{self.accumulate.value}"

    @classmethod
    def parse(cls, text: str) -> "PrecisionSpec":
        """Parse ``"fp16"``, ``"fp16-fp32"`` or ``"bf16-native"``."""
        parts = str(text).strip().lower().split("-")
        if len(parts) == 1:
            return cls(FpFormat.from_name(parts[0]))
        if len(parts) == 2:
            return cls(FpFormat.from_name(parts[0]), Accumulate.from_name(parts[1]))
        raise ValueError(f"cannot parse precision {text!r}")


REFERENCE = PrecisionSpec(FpFormat.FP32, Accumulate.NATIVE)


def eps_mach(fmt: FpFormat) -> float:
    """Unit roundoff ``2**-mantissa_bits`` of ``fmt``."""
    return fmt.eps_mach


def effective_eps(spec: PrecisionSpec) -> float:
    """Unit roundoff that governs first-order error for kernels run under ``spec``."""
    return spec.accumulator.eps_mach


def _round_generic(x: np.ndarray, fmt: FpFormat) -> np.ndarray:
    # quantum = 2**(max(exponent, emin) - p); dividing by a power of two and
    # rint are exact in float64, so this is a single correct RNE rounding.
    _, e = np.frexp(x)
    q = np.maximum(e - 1, fmt.emin) - fmt.mantissa_bits
    with np.errstate(over="ignore", invalid="ignore"):
        y = np.ldexp(np.rint(np.ldexp(x, -q)), q)
        y = np.where(np.abs(y) > fmt.max_finite, np.copysign(np.inf, x), y)
    return y


def _round_fast(x: np.ndarray, fmt: FpFormat) -> np.ndarray:
    if fmt is FpFormat.FP32:
        with np.errstate(over="ignore"):
            return x.astype(np.float32).astype(np.float64)
    if fmt is FpFormat.FP16:
        with np.errstate(over="ignore"):
            return x.astype(np.float16).astype(np.float64)
    return _round_bf16(x)


def _round_bf16(x: np.ndarray) -> np.ndarray:
    # float64 -> float32 -> bfloat16 double-rounds only when the float32 value
    # is inexact and sits exactly on a bfloat16 midpoint; those inputs take
    # the generic path.
    with np.errstate(over="ignore"):
        f = x.astype(np.float32)
    mid = (f.view(np.uint32) & 0xFFFF) == 0x8000
    if mid.any() and np.any(f[mid] != x[mid]):
        return _round_generic(x, FpFormat.BF16)
    return f.astype(ml_dtypes.bfloat16).astype(np.float64)


def round_to(fmt: FpFormat, x, *, flush_subnormals: bool = False, strict: bool = False):
    """Round ``x`` (scalar or array) to the nearest value representable in ``fmt``.

    Ties go to even.  Overflow yields signed infinity; with ``strict`` it
    raises :class:`FpOverflowError` instead.  Subnormal results are kept
    unless ``flush_subnormals`` is set.
    """
    arr = np.asarray(x, dtype=np.float64)
    y = _round_fast(arr, fmt)
    if flush_subnormals:
        y = np.where(np.abs(y) < fmt.min_normal, np.copysign(0.0, arr), y)
    if strict and not np.all(np.isfinite(y)):
        raise FpOverflowError(f"value out of {fmt.label} range")
    if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
        return float(y)
    return y
