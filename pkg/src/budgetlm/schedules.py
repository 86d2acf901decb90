"""Learning-rate schedules: warmup + cosine to a floor, and the "infinite" schedule.

The infinite schedule runs warmup, a cosine decay to a plateau value, a long
constant plateau, then a linear anneal to the final value. Phase lengths are
fractions of ``total_steps`` rounded to whole steps; the anneal absorbs the
rounding remainder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

__all__ = ["ScheduleKind", "ScheduleSpec", "lr_at", "phase_boundaries", "cosine_floor", "infinite"]


class ScheduleKind(str, Enum):
    COSINE_FLOOR = "cosine_floor"
    INFINITE = "infinite"


@dataclass(frozen=True)
class ScheduleSpec:
    kind: ScheduleKind
    total_steps: int
    warmup_frac: float
    lr_peak: float
    cosine_end_lr: float
    constant_frac: float = 0.0
    anneal_frac: float = 0.0
    final_lr: float | None = None
    warmup_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.kind is ScheduleKind.INFINITE:
            cos = 1.0 - self.warmup_frac - self.constant_frac - self.anneal_frac
            if cos < -1.0 / self.total_steps:
                raise ValueError("phase fractions exceed 1")
            if self.final_lr is None:
                raise ValueError("the infinite schedule needs final_lr")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleSpec":
        return cls(**d)


def cosine_floor(total_steps: int = 7680, warmup_steps: int = 76, lr_peak: float = 4e-5, floor: float = 2e-6) -> ScheduleSpec:
    return ScheduleSpec(
        ScheduleKind.COSINE_FLOOR, total_steps, warmup_steps / total_steps, lr_peak, floor, warmup_steps=warmup_steps
    )


def infinite(
    total_steps: int,
    lr_peak: float = 3e-5,
    plateau_lr: float = 1.65e-5,
    final_lr: float = 2e-6,
    warmup_frac: float = 0.01,
    cosine_frac: float = 0.60,
    constant_frac: float = 0.25,
) -> ScheduleSpec:
    anneal = 1.0 - warmup_frac - cosine_frac - constant_frac
    return ScheduleSpec(
        ScheduleKind.INFINITE, total_steps, warmup_frac, lr_peak, plateau_lr, constant_frac, anneal, final_lr
    )


def phase_boundaries(spec: ScheduleSpec) -> list[int]:
    """Step indices where each phase ends (the last one is ``total_steps``)."""
    T = spec.total_steps
    warm = spec.warmup_steps if spec.warmup_steps is not None else round(spec.warmup_frac * T)
    if spec.kind is ScheduleKind.COSINE_FLOOR:
        return [warm, T]
    cos_end = T - round(spec.constant_frac * T) - round(spec.anneal_frac * T)
    const_end = cos_end + round(spec.constant_frac * T)
    return [warm, cos_end, const_end, T]


def _lerp(a: float, b: float, t: float) -> float:
    # exact at both ends
    return a * (1.0 - t) + b * t


def _phases(spec: ScheduleSpec):
    """``(start, end, f)`` triples; ``f`` maps a real step in ``[start, end]`` to a rate."""
    bounds = phase_boundaries(spec)
    warm = bounds[0]
    peak = spec.lr_peak
    out = []
    if warm > 0:
        out.append((0, warm, lambda s: peak * (s / warm)))

    def cosine(start, end, hi, lo):
        span = end - start

        def f(s):
            c = 0.5 * (1.0 + math.cos(math.pi * (s - start) / span)) if span else 0.0
            return _lerp(lo, hi, c)

        return f

    if spec.kind is ScheduleKind.COSINE_FLOOR:
        out.append((warm, bounds[1], cosine(warm, bounds[1], peak, spec.cosine_end_lr)))
        return out
    _, cos_end, const_end, T = bounds
    plateau = spec.cosine_end_lr
    out.append((warm, cos_end, cosine(warm, cos_end, peak, plateau)))
    out.append((cos_end, const_end, lambda s: plateau))
    final = spec.final_lr
    span = T - const_end
    out.append((const_end, T, lambda s: _lerp(plateau, final, (s - const_end) / span) if span else final))
    return out


def lr_at(spec: ScheduleSpec, step: int) -> float:
    """Learning rate used for optimizer step ``step`` (1-based; step 0 gives 0 during warmup)."""
    if step < 0 or step > spec.total_steps:
        raise ValueError(f"step {step} outside [0, {spec.total_steps}]")
    for start, end, f in _phases(spec):
        if step <= end:
            return float(f(step))
    raise AssertionError("unreachable")
