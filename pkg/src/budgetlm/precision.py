"""Which float format each piece of training state is kept in."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .numerics import BF16, FP32, WIDE, FloatFormat, format_from_tag

__all__ = ["PrecisionPolicy", "PURE_BF16", "MIXED_BF16", "WIDE_PURE", "WIDE_MIXED", "policy_from_name"]


@dataclass(frozen=True)
class PrecisionPolicy:
    weights_fmt: FloatFormat
    grads_fmt: FloatFormat
    optimizer_state_fmt: FloatFormat
    master_weights: bool
    forward_fmt: FloatFormat
    high_precision_islands: bool = True
    name: str = ""

    def __post_init__(self):
        if self.master_weights and self.optimizer_state_fmt.mantissa_bits < FP32.mantissa_bits:
            raise ValueError("a master copy needs optimizer state at least as wide as fp32")

    @property
    def master_fmt(self) -> FloatFormat:
        # the master copy shares the optimizer state's width (fp32, or the carrier in wide runs)
        return self.optimizer_state_fmt

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("weights_fmt", "grads_fmt", "optimizer_state_fmt", "forward_fmt"):
            d[key] = getattr(self, key).tag()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PrecisionPolicy":
        d = dict(d)
        for key in ("weights_fmt", "grads_fmt", "optimizer_state_fmt", "forward_fmt"):
            d[key] = format_from_tag(d[key])
        return cls(**d)


PURE_BF16 = PrecisionPolicy(BF16, BF16, BF16, False, BF16, True, name="pure")
MIXED_BF16 = PrecisionPolicy(BF16, BF16, FP32, True, BF16, True, name="mixed")
# the same two recipes with every format widened to the float64 carrier
WIDE_PURE = PrecisionPolicy(WIDE, WIDE, WIDE, False, WIDE, True, name="wide-pure")
WIDE_MIXED = PrecisionPolicy(WIDE, WIDE, WIDE, True, WIDE, True, name="wide-mixed")

_PRESETS = {p.name: p for p in (PURE_BF16, MIXED_BF16, WIDE_PURE, WIDE_MIXED)}


def policy_from_name(name: str) -> PrecisionPolicy:
    try:
        return _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown precision preset {name!r}; choose from {sorted(_PRESETS)}") from None
