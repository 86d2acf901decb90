"""Bit-exact emulation of reduced-precision binary floating point formats.

Every emulated value lives in a native float64 carrier. bfloat16 and float32
values embed exactly in float64, so rounding a carrier value onto the grid of
a narrower format is exact arithmetic on powers of two.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FloatFormat",
    "NearestEven",
    "Stochastic",
    "BF16",
    "FP32",
    "WIDE",
    "NEAREST_EVEN",
    "quantize",
    "ulp",
    "heuristic_vanish_threshold",
    "exact_vanish_threshold",
    "enumerate_values",
    "finite_values",
]


@dataclass(frozen=True)
class FloatFormat:
    """A sign / exponent / mantissa binary float layout.

    ``bias`` defaults to the IEEE convention ``2**(exponent_bits - 1) - 1``.
    Exponent field values 0 (subnormals) and all-ones (inf/nan) are reserved.
    """

    exponent_bits: int
    mantissa_bits: int
    bias: int | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.exponent_bits < 2 or self.mantissa_bits < 0:
            raise ValueError("need exponent_bits >= 2 and mantissa_bits >= 0")
        if 1 + self.exponent_bits + self.mantissa_bits > 64:
            raise ValueError("format wider than 64 bits")
        if self.bias is None:
            object.__setattr__(self, "bias", 2 ** (self.exponent_bits - 1) - 1)
        if self.mantissa_bits > 52 or self.min_exponent - self.mantissa_bits < -1074 or self.max_exponent > 1023:
            raise ValueError(f"{self} does not embed in a float64 carrier")

    @property
    def width(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def min_exponent(self) -> int:
        return 1 - self.bias

    @property
    def max_exponent(self) -> int:
        return (2**self.exponent_bits - 2) - self.bias

    @property
    def max_finite(self) -> float:
        return float(np.ldexp(2.0 - 2.0**-self.mantissa_bits, self.max_exponent))

    @property
    def min_normal(self) -> float:
        return float(np.ldexp(1.0, self.min_exponent))

    @property
    def min_subnormal(self) -> float:
        return float(np.ldexp(1.0, self.min_exponent - self.mantissa_bits))

    @property
    def is_carrier(self) -> bool:
        """True when the format is the float64 carrier itself (quantize is identity)."""
        return self.exponent_bits == 11 and self.mantissa_bits == 52 and self.bias == 1023

    def tag(self) -> str:
        return self.name or f"e{self.exponent_bits}m{self.mantissa_bits}b{self.bias}"

    def __repr__(self):
        return f"FloatFormat({self.tag()})"


BF16 = FloatFormat(8, 7, 127, name="bf16")
FP32 = FloatFormat(8, 23, 127, name="fp32")
WIDE = FloatFormat(11, 52, 1023, name="fp64")

FORMATS = {f.name: f for f in (BF16, FP32, WIDE)}


def format_from_tag(tag: str) -> FloatFormat:
    try:
        return FORMATS[tag]
    except KeyError:
        raise ValueError(f"unknown format tag {tag!r}") from None


@dataclass(frozen=True)
class NearestEven:
    """Round to nearest, ties to even mantissa."""


@dataclass(frozen=True)
class Stochastic:
    """Round up with probability equal to the fractional distance to the lower neighbor.

    The draw is fully determined by ``seed`` and the input (its shape and values).
    """

    seed: int = 0


NEAREST_EVEN = NearestEven()


def _spacing(x: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    # x = f * 2**e with 0.5 <= |f| < 1, so the leading binary exponent is e - 1
    _, e = np.frexp(x)
    lead = np.maximum(e.astype(np.int64) - 1, fmt.min_exponent)
    return np.ldexp(1.0, (lead - fmt.mantissa_bits).astype(np.int32))


def quantize(x, fmt: FloatFormat, mode=NEAREST_EVEN):
    """Round ``x`` (scalar or array) to the nearest value representable in ``fmt``.

    Finite values beyond the format's range saturate to +/- max finite.
    NaN and infinities pass through unchanged. Subnormals are representable.
    Scalars in give a Python float out; arrays give a new float64 array.
    """
    scalar = np.ndim(x) == 0
    a = np.asarray(x, dtype=np.float64)
    if fmt.is_carrier:
        return float(a) if scalar else a.copy()
    finite = np.isfinite(a)
    xs = np.where(finite, a, 0.0)
    step = _spacing(xs, fmt)
    scaled = xs / step
    if isinstance(mode, NearestEven):
        units = np.rint(scaled)
    elif isinstance(mode, Stochastic):
        lo = np.floor(scaled)
        rng = np.random.default_rng(_stochastic_key(mode.seed, xs))
        units = lo + (rng.random(xs.shape) < (scaled - lo))
    else:
        raise TypeError(f"unknown rounding mode {mode!r}")
    q = units * step
    top = fmt.max_finite
    q = np.clip(q, -top, top)
    # keep the sign of zero results
    q = np.where(q == 0.0, np.copysign(0.0, xs), q)
    out = np.where(finite, q, a)
    return float(out) if scalar else out


def _stochastic_key(seed: int, xs: np.ndarray) -> list[int]:
    data = np.ascontiguousarray(xs).view(np.uint64)
    digest = int(np.bitwise_xor.reduce(data.ravel() * np.uint64(0x9E3779B97F4A7C15), initial=np.uint64(0))) if data.size else 0
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, digest, data.size]


def is_representable(x, fmt: FloatFormat) -> bool:
    a = np.asarray(x, dtype=np.float64)
    return bool(np.all(quantize(a, fmt) == a))


def ulp(x: float, fmt: FloatFormat) -> float:
    """Gap from ``x`` to the next representable value of larger magnitude."""
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("ulp of a non-finite value")
    if x == 0.0:
        return fmt.min_subnormal
    if quantize(x, fmt) != x:
        raise ValueError(f"{x!r} is not representable in {fmt}")
    return float(_spacing(np.float64(x), fmt))


def heuristic_vanish_threshold(w: float, fmt: FloatFormat) -> float:
    """Rule-of-thumb update size below which ``w + u`` rounds back to ``w``: ``w / 2**m``."""
    if not w > 0:
        raise ValueError("w must be positive")
    return float(np.ldexp(float(w), -fmt.mantissa_bits))


def exact_vanish_threshold(w: float, fmt: FloatFormat, two_sided: bool = False) -> float:
    """Largest ``t`` with ``quantize(w + u) == w`` for every ``0 < u < t``.

    Under round-to-nearest-even this is half an ulp. An update of exactly
    ``t`` is absorbed as well when the mantissa of ``w`` is even.

    With ``two_sided=True`` the bound also covers ``w - u``; at an exact
    power of two the grid below ``w`` is twice as fine, so it halves.
    """
    w = float(w)
    if not w > 0:
        raise ValueError("w must be positive")
    if w < fmt.min_normal:
        raise ValueError("vanish thresholds are defined for normal values only")
    up = ulp(w, fmt) / 2
    if not two_sided:
        return up
    mant, _ = np.frexp(w)
    if mant == 0.5 and w > fmt.min_normal:
        return up / 2
    return up


def tie_is_absorbed(w: float, fmt: FloatFormat) -> bool:
    """Whether an update of exactly ``exact_vanish_threshold(w)`` rounds back to ``w``."""
    units = abs(float(w)) / ulp(abs(float(w)), fmt)
    return int(units) % 2 == 0


def finite_values(fmt: FloatFormat, nonnegative: bool = False) -> np.ndarray:
    """Every finite value of ``fmt`` in ascending order (one zero).

    Only practical for narrow formats; bfloat16 has 65280 finite bit patterns.
    """
    if fmt.width > 20:
        raise ValueError("refusing to enumerate a format wider than 20 bits")
    m = fmt.mantissa_bits
    n_exp = 2**fmt.exponent_bits - 1
    fields = np.arange(n_exp, dtype=np.int64)
    fracs = np.arange(2**m, dtype=np.float64)
    sig = np.where(fields[:, None] == 0, fracs[None, :], fracs[None, :] + 2**m)
    exps = np.maximum(fields, 1) - fmt.bias - m
    pos = np.ldexp(sig, exps[:, None].astype(np.int32)).ravel()
    pos = np.unique(pos)
    if nonnegative:
        return pos
    return np.concatenate([-pos[:0:-1], pos])


def enumerate_values(lo: float, hi: float, fmt: FloatFormat) -> list[float]:
    """All representable values ``v`` with ``lo <= v < hi``, ascending."""
    lo, hi = float(lo), float(hi)
    if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
        raise ValueError("need finite lo < hi")
    out = []
    v = quantize(lo, fmt)
    if v < lo:
        v = _next_up(v, fmt)
    while v is not None and v < hi:
        out.append(v)
        v = _next_up(v, fmt)
    return out


def _next_up(v: float, fmt: FloatFormat) -> float | None:
    if v >= fmt.max_finite:
        return None
    if v == 0.0:
        return fmt.min_subnormal
    if v > 0:
        return v + ulp(v, fmt)
    # negative: step toward zero by the spacing of the grid just below |v|
    a = -v
    mant, _ = np.frexp(a)
    gap = ulp(a, fmt) / 2 if mant == 0.5 and a > fmt.min_normal else ulp(a, fmt)
    nxt = -(a - gap)
    return 0.0 if nxt == 0 else nxt
