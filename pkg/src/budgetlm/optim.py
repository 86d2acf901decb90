"""AdamW whose state lives in an emulated float format."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ParameterSet
from .numerics import NEAREST_EVEN, NearestEven, Stochastic, quantize
from .precision import PrecisionPolicy

__all__ = ["AdamWConfig", "OptimizerState", "NumericalAbort", "init_optimizer_state", "adamw_step"]


class NumericalAbort(FloatingPointError):
    """A NaN or infinity reached the optimizer."""


@dataclass(frozen=True)
class AdamWConfig:
    lr_peak: float = 4e-5
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-8
    rounding: NearestEven | Stochastic = NEAREST_EVEN

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    master: dict[str, np.ndarray] | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)


def init_optimizer_state(params: ParameterSet, policy: PrecisionPolicy | None = None) -> OptimizerState:
    policy = policy or params.policy
    m = {n: np.zeros_like(p.values) for n, p in params.items()}
    v = {n: np.zeros_like(p.values) for n, p in params.items()}
    master = None
    if policy.master_weights:
        master = {n: quantize(p.values, policy.master_fmt) for n, p in params.items()}
    return OptimizerState(m, v, master)


def _step_rounding(mode, step: int, index: int):
    if isinstance(mode, Stochastic):
        return Stochastic(hash((mode.seed, step, index)) & 0x7FFFFFFFFFFFFFFF)
    return mode


def adamw_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    cfg: AdamWConfig,
    policy: PrecisionPolicy,
    lr: float,
    only=None,
) -> None:
    """One decoupled-weight-decay Adam step, in place.

    With a master copy the update lands on the master (at the optimizer state
    format) and the stored weights are re-rounded from it. Without one the
    update is rounded straight onto the stored weights with ``cfg.rounding``;
    this is where small updates vanish. ``only`` restricts the step to a
    subset of parameter names; everything else stays bit-identical.
    """
    if policy.master_weights != (state.master is not None):
        raise ValueError("optimizer state does not match the policy's master-weight setting")
    names = list(params) if only is None else [n for n in params if n in set(only)]
    for n in names:
        g = grads[n]
        if g.shape != params[n].values.shape:
            raise ValueError(f"gradient shape mismatch for {n}")
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient in {n} at step {state.step + 1}")

    b1, b2 = cfg.betas
    t = state.step + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    sfmt = policy.optimizer_state_fmt
    for index, n in enumerate(names):
        g = grads[n]
        m = quantize(b1 * state.m[n] + (1.0 - b1) * g, sfmt)
        v = quantize(b2 * state.v[n] + (1.0 - b2) * (g * g), sfmt)
        state.m[n], state.v[n] = m, v
        base = state.master[n] if state.master is not None else params[n].values
        update = lr * ((m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * base)
        if state.master is not None:
            state.master[n] = quantize(base - update, policy.master_fmt)
            params[n].values = quantize(state.master[n], policy.weights_fmt)
        else:
            mode = _step_rounding(cfg.rounding, t, index)
            params[n].values = quantize(base - update, policy.weights_fmt, mode)
    state.step = t
    params.bump()
