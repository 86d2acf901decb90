"""Memory and step-time model for picking a training configuration on a GPU budget.

Byte accounting is per parameter and per device. The coefficients are
calibrated to reproduce which configurations fit on 80 GB devices for a
7B model; they are a ranking model, not a profiler.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field, replace

__all__ = [
    "HardwareSpec",
    "ModelShape",
    "Coefficients",
    "RunConfigPoint",
    "MemoryBreakdown",
    "memory_estimate",
    "time_estimate",
    "config_space",
    "best_config",
    "exhaustive_best",
    "Infeasible",
    "GIB",
    "MISTRAL_7B",
]

GIB = 2**30
MICRO_BATCHES = (1, 2, 4, 8)
SHARDINGS = ("full", "grad_op")
SYNCS = ("sync", "no_sync")


class Infeasible(ValueError):
    pass


@dataclass(frozen=True)
class HardwareSpec:
    gpu_count: int = 1
    per_gpu_memory: float = 80 * GIB
    interconnect_penalty: float = 0.0

    def __post_init__(self):
        if self.gpu_count < 1:
            raise ValueError("gpu_count must be >= 1")
        if self.per_gpu_memory <= 0:
            raise ValueError("per_gpu_memory must be positive")


@dataclass(frozen=True)
class ModelShape:
    param_count: float = 7e9
    n_layers: int = 32
    d_model: int = 4096
    context_length: int = 4096


MISTRAL_7B = ModelShape()


@dataclass(frozen=True)
class Coefficients:
    # bytes per parameter: (weights, master, optimizer m+v, grads)
    pure_bytes: tuple = (2, 0, 4, 2)
    mixed_bytes: tuple = (2, 4, 8, 2)
    # one optimizer-state-sized buffer (per element) held during the step unless paged
    pure_transient: float = 2
    mixed_transient: float = 4
    # gradient accumulator precision under no_sync
    pure_accum: float = 2
    mixed_accum: float = 4
    # activation bytes per element
    pure_act_bytes: float = 2
    mixed_act_bytes: float = 4
    c_act: float = 16
    c_ckpt: float = 2
    r_ckpt: float = 0.35
    r_sync: float = 0.05
    r_paged: float = 0.05
    r_master: float = 0.10
    r_full: float = 0.05
    r_microbatch: float = 0.30


DEFAULT_COEFFICIENTS = Coefficients()


@dataclass(frozen=True)
class RunConfigPoint:
    precision: str = "pure"
    micro_batch: int = 1
    act_ckpt: bool = False
    sharding: str = "full"
    accum_sync: str = "sync"
    paged_optimizer: bool = False
    model: ModelShape = MISTRAL_7B

    def __post_init__(self):
        if self.precision not in ("pure", "mixed"):
            raise ValueError(f"precision must be pure or mixed, got {self.precision!r}")
        if self.micro_batch not in MICRO_BATCHES:
            raise ValueError(f"micro_batch must be one of {MICRO_BATCHES}")
        if self.sharding not in SHARDINGS:
            raise ValueError(f"sharding must be one of {SHARDINGS}")
        if self.accum_sync not in SYNCS:
            raise ValueError(f"accum_sync must be one of {SYNCS}")

    def flags(self) -> tuple:
        """The (micro-batch, ckpt, sharding, sync, paged) tuple used to report configs."""
        return (
            self.micro_batch,
            "yes" if self.act_ckpt else "no",
            self.sharding,
            self.accum_sync,
            "paged" if self.paged_optimizer else "no_paged",
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class MemoryBreakdown:
    weights: float
    master: float
    optimizer_states: float
    gradients: float
    activations: float
    transient_peak: float
    total: float
    feasible: bool

    def to_dict(self) -> dict:
        return asdict(self)


def memory_estimate(cfg: RunConfigPoint, hw: HardwareSpec, coef: Coefficients = DEFAULT_COEFFICIENTS) -> MemoryBreakdown:
    P = cfg.model.param_count
    n = hw.gpu_count
    mixed = cfg.precision == "mixed"
    w, m, o, g = coef.mixed_bytes if mixed else coef.pure_bytes
    weights, master, opt, grads = w * P, m * P, o * P, g * P
    opt, grads = opt / n, grads / n
    if cfg.sharding == "full":
        weights, master = weights / n, master / n
    if cfg.accum_sync == "no_sync" and n > 1:
        # an unsharded gradient accumulator lives on every device between syncs
        grads += (coef.mixed_accum if mixed else coef.pure_accum) * P * (1 - 1 / n)
    transient = 0.0
    if not cfg.paged_optimizer:
        transient = (coef.mixed_transient if mixed else coef.pure_transient) * P / n
    c = coef.c_ckpt if cfg.act_ckpt else coef.c_act
    act_bytes = coef.mixed_act_bytes if mixed else coef.pure_act_bytes
    shape = cfg.model
    activations = cfg.micro_batch * shape.context_length * shape.d_model * shape.n_layers * c * act_bytes
    total = weights + master + opt + grads + activations + transient
    return MemoryBreakdown(weights, master, opt, grads, activations, transient, total, total <= hw.per_gpu_memory)


def time_estimate(cfg: RunConfigPoint, hw: HardwareSpec, coef: Coefficients = DEFAULT_COEFFICIENTS, base: float = 1.0) -> float:
    """Relative time per training sample; only meaningful for ranking."""
    if not memory_estimate(cfg, hw, coef).feasible:
        raise Infeasible(f"{cfg.precision} {cfg.flags()} does not fit on {hw.gpu_count} device(s)")
    t = base
    t *= 1 + coef.r_ckpt * cfg.act_ckpt
    t *= 1 + coef.r_sync * (cfg.accum_sync == "sync")
    t *= 1 + coef.r_paged * cfg.paged_optimizer
    t *= 1 + coef.r_master * (cfg.precision == "mixed")
    t *= 1 + coef.r_full * (cfg.sharding == "full")
    t *= 1 + coef.r_microbatch / cfg.micro_batch
    t *= 1 + hw.interconnect_penalty * (hw.gpu_count > 1)
    return t


def config_space(precision: str, model: ModelShape = MISTRAL_7B) -> list[RunConfigPoint]:
    """Every point of the search space, most memory-frugal settings first in each coordinate."""
    return [
        RunConfigPoint(precision, mb, ck, sh, sy, pg, model)
        for mb, ck, sh, sy, pg in itertools.product(MICRO_BATCHES, (True, False), SHARDINGS, SYNCS, (True, False))
    ]


def _at_most_as_frugal(a: RunConfigPoint, b: RunConfigPoint) -> bool:
    # True when b needs at least as much memory as a in every coordinate
    return (
        b.micro_batch >= a.micro_batch
        and (a.act_ckpt or not b.act_ckpt)
        and SHARDINGS.index(b.sharding) >= SHARDINGS.index(a.sharding)
        and SYNCS.index(b.accum_sync) >= SYNCS.index(a.accum_sync)
        and (a.paged_optimizer or not b.paged_optimizer)
    )


@dataclass
class PlanResult:
    ranked: list[tuple[RunConfigPoint, MemoryBreakdown, float]]
    evaluated: int
    pruned: int
    infeasible: list[RunConfigPoint] = field(default_factory=list)

    @property
    def best(self):
        return self.ranked[0][0] if self.ranked else None

    def to_json(self) -> str:
        rows = [
            {"config": c.to_dict(), "flags": list(c.flags()), "memory": m.to_dict(), "relative_time": t}
            for c, m, t in self.ranked
        ]
        return json.dumps(rows, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["rank", "precision", "micro_batch", "act_ckpt", "sharding", "accum_sync", "paged", "total_gib", "relative_time"])
        for i, (c, m, t) in enumerate(self.ranked, 1):
            w.writerow([i, c.precision, *c.flags(), round(m.total / GIB, 3), round(t, 6)])
        return buf.getvalue()


def best_config(precision: str, hw: HardwareSpec, model: ModelShape = MISTRAL_7B, coef: Coefficients = DEFAULT_COEFFICIENTS) -> PlanResult:
    """Rank feasible points by time, skipping points a cheaper infeasible point already rules out.

    The skip is exact because memory is monotone in every coordinate.
    """
    space = config_space(precision, model)
    order = {c: i for i, c in enumerate(space)}
    dead: list[RunConfigPoint] = []
    ranked = []
    pruned = 0
    for c in space:
        if any(_at_most_as_frugal(d, c) for d in dead):
            pruned += 1
            continue
        mem = memory_estimate(c, hw, coef)
        if not mem.feasible:
            dead.append(c)
            continue
        ranked.append((c, mem, time_estimate(c, hw, coef)))
    ranked.sort(key=lambda r: (r[2], order[r[0]]))
    return PlanResult(ranked, len(space) - pruned, pruned, dead)


def exhaustive_best(precision: str, hw: HardwareSpec, model: ModelShape = MISTRAL_7B, coef: Coefficients = DEFAULT_COEFFICIENTS):
    space = config_space(precision, model)
    feas = [(i, c) for i, c in enumerate(space) if memory_estimate(c, hw, coef).feasible]
    if not feas:
        return None
    return min(feas, key=lambda ic: (time_estimate(ic[1], hw, coef), ic[0]))[1]


def with_coefficients(coef: Coefficients = DEFAULT_COEFFICIENTS, **overrides) -> Coefficients:
    return replace(coef, **overrides)
