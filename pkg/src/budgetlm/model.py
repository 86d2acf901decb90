"""A tiny decoder-only language model with hand-written reverse-mode gradients.

Architecture: token embedding, ``n_layers`` x [RMSNorm, single-head causal
attention, residual, RMSNorm, SiLU MLP, residual], final RMSNorm, untied
unembedding. No positional encoding: the causal mask is the only order signal.

Every primitive op (matmul, add, activation) rounds its output to the
policy's forward format. Dot products accumulate in the float64 carrier, as
hardware bf16 matmuls accumulate wide. With ``high_precision_islands`` the
RMSNorm variance and both softmaxes run unrounded and only their outputs are
rounded.
"""

from __future__ import annotations

import itertools
from collections import OrderedDict
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .numerics import FloatFormat, quantize
from .packing import PackedBlock, build_attention_mask
from .precision import PrecisionPolicy, PURE_BF16

__all__ = [
    "LayerKind",
    "ModelConfig",
    "Parameter",
    "ParameterSet",
    "Tape",
    "StaleTapeError",
    "init_model",
    "rmsnorm",
    "rmsnorm_backward",
    "forward_loss",
    "backward",
    "block_nll",
]


class LayerKind(str, Enum):
    RMSNORM = "RMSNorm"
    EMBEDDING = "Embedding"
    LINEAR = "Linear"
    UNEMBEDDING = "Unembedding"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    d_ff: int
    context_length: int
    n_heads: int = 1
    rmsnorm_eps: float = 1e-5

    def __post_init__(self):
        for key in ("vocab_size", "d_model", "n_layers", "d_ff", "context_length"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")
        if self.n_heads != 1:
            raise ValueError("only single-head attention is implemented")
        if self.d_ff < self.d_model:
            raise ValueError("d_ff must be >= d_model")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Parameter:
    name: str
    layer_kind: LayerKind
    values: np.ndarray
    init_snapshot: np.ndarray | None = None


class ParameterSet(OrderedDict):
    """Ordered ``name -> Parameter`` map plus the config and a mutation counter."""

    def __init__(self, cfg: ModelConfig, policy: PrecisionPolicy, items=()):
        super().__init__(items)
        self.cfg = cfg
        self.policy = policy
        self.version = 0

    def values_of(self, name: str) -> np.ndarray:
        return self[name].values

    def snapshot(self) -> None:
        for p in self.values():
            p.init_snapshot = p.values.copy()

    def copy(self) -> "ParameterSet":
        out = ParameterSet(self.cfg, self.policy)
        for name, p in self.items():
            snap = None if p.init_snapshot is None else p.init_snapshot.copy()
            out[name] = Parameter(p.name, p.layer_kind, p.values.copy(), snap)
        return out

    def bump(self) -> None:
        self.version += 1

    def kinds(self) -> dict[str, LayerKind]:
        return {n: p.layer_kind for n, p in self.items()}


def param_layout(cfg: ModelConfig):
    """Yield ``(name, kind, shape)`` in canonical order."""
    d, ff, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    yield "embed", LayerKind.EMBEDDING, (V, d)
    for i in range(cfg.n_layers):
        yield f"layers.{i}.attn_norm", LayerKind.RMSNORM, (d,)
        for w in ("wq", "wk", "wv", "wo"):
            yield f"layers.{i}.{w}", LayerKind.LINEAR, (d, d)
        yield f"layers.{i}.mlp_norm", LayerKind.RMSNORM, (d,)
        yield f"layers.{i}.w_up", LayerKind.LINEAR, (d, ff)
        yield f"layers.{i}.w_down", LayerKind.LINEAR, (ff, d)
    yield "final_norm", LayerKind.RMSNORM, (d,)
    yield "unembed", LayerKind.UNEMBEDDING, (d, V)


def init_model(cfg: ModelConfig, seed: int, policy: PrecisionPolicy = PURE_BF16, std: float = 0.02) -> ParameterSet:
    """Normal(0, std) matrices rounded to the weight format; RMSNorm gains exactly 1."""
    rng = np.random.default_rng(seed)
    params = ParameterSet(cfg, policy)
    for name, kind, shape in param_layout(cfg):
        if kind is LayerKind.RMSNORM:
            values = np.ones(shape)
        else:
            values = quantize(rng.normal(0.0, std, size=shape), policy.weights_fmt)
        params[name] = Parameter(name, kind, values)
    return params


def _rounder(fmt: FloatFormat):
    if fmt.is_carrier:
        return lambda a: a
    return lambda a: quantize(a, fmt)


def rmsnorm(x, gain, eps: float = 1e-5, policy: PrecisionPolicy = PURE_BF16, *, return_cache: bool = False):
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("rmsnorm of an empty vector")
    if gain.shape != x.shape[-1:]:
        raise ValueError(f"gain shape {gain.shape} does not match input {x.shape}")
    q = _rounder(policy.forward_fmt)
    if policy.high_precision_islands:
        inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    else:
        ms = q(np.mean(q(x * x), axis=-1, keepdims=True))
        inv = q(1.0 / q(np.sqrt(q(ms + eps))))
    n = q(x * inv)
    y = q(n * gain)
    if return_cache:
        return y, (n, inv)
    return y


def rmsnorm_backward(dy, gain, cache, policy: PrecisionPolicy = PURE_BF16):
    """Return ``(dx, dgain)`` given the upstream gradient and the forward cache."""
    n, inv = cache
    q = _rounder(policy.forward_fmt)
    dy = np.asarray(dy, dtype=np.float64)
    dgain = (dy * n).reshape(-1, n.shape[-1]).sum(axis=0)
    dn = q(dy * gain)
    dot = np.mean(dn * n, axis=-1, keepdims=True)
    dx = q(inv * (dn - n * dot))
    return dx, dgain


def _softmax(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_rounded(s: np.ndarray, q) -> np.ndarray:
    z = q(s - s.max(axis=-1, keepdims=True))
    e = q(np.exp(z))
    return q(e / q(e.sum(axis=-1, keepdims=True)))


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


class StaleTapeError(RuntimeError):
    """Raised when backward is called after the parameters changed."""


_tape_ids = itertools.count()


@dataclass
class Tape:
    params: ParameterSet
    version: int
    policy: PrecisionPolicy
    ids: np.ndarray
    targets: np.ndarray
    caches: list
    final: tuple
    tape_id: int
    used: bool = False


def _check_block(params: ParameterSet, block: PackedBlock) -> None:
    ids = block.token_ids
    if ids.size and (ids.min() < 0 or ids.max() >= params.cfg.vocab_size):
        raise ValueError(f"token ids outside [0, {params.cfg.vocab_size})")


def forward_loss(params: ParameterSet, block: PackedBlock, policy: PrecisionPolicy | None = None):
    """Summed next-token NLL of one block.

    Returns ``(nll_sum, token_count, tape)``; targets that would cross a
    document span (or fall on padding) are excluded.
    """
    policy = policy or params.policy
    _check_block(params, block)
    q = _rounder(policy.forward_fmt)
    islands = policy.high_precision_islands
    cfg = params.cfg
    eps = cfg.rmsnorm_eps
    W = lambda name: params[name].values  # noqa: E731
    ids = block.token_ids
    targets = block.targets()
    allowed = build_attention_mask(block)
    scale = 1.0 / np.sqrt(cfg.d_model)

    x = W("embed")[ids]
    caches = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h, nc1 = rmsnorm(x, W(pre + "attn_norm"), eps, policy, return_cache=True)
        qh = q(h @ W(pre + "wq"))
        kh = q(h @ W(pre + "wk"))
        vh = q(h @ W(pre + "wv"))
        s = q((qh @ kh.T) * scale)
        s = np.where(allowed, s, -np.inf)
        p = q(_softmax(s)) if islands else _softmax_rounded(s, q)
        a = q(p @ vh)
        o = q(a @ W(pre + "wo"))
        x_mid = q(x + o)
        h2, nc2 = rmsnorm(x_mid, W(pre + "mlp_norm"), eps, policy, return_cache=True)
        u = q(h2 @ W(pre + "w_up"))
        act = q(u * _sigmoid(u))
        f = q(act @ W(pre + "w_down"))
        x_out = q(x_mid + f)
        caches.append((h, nc1, qh, kh, vh, p, a, h2, nc2, u, act))
        x = x_out
    hf, ncf = rmsnorm(x, W("final_norm"), eps, policy, return_cache=True)
    logits = q(hf @ W("unembed"))

    valid = targets >= 0
    rows = np.flatnonzero(valid)
    if islands:
        m = logits.max(axis=-1, keepdims=True)
        lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[:, 0]
        nll = lse[rows] - logits[rows, targets[rows]]
    else:
        m = logits.max(axis=-1, keepdims=True)
        z = q(np.exp(q(logits - m)).sum(axis=-1, keepdims=True))
        lse = q(m + q(np.log(z)))[:, 0]
        nll = q(lse[rows] - logits[rows, targets[rows]])
    nll_sum = float(np.sum(nll))
    tape = Tape(params, params.version, policy, ids, targets, caches, (hf, ncf, logits), next(_tape_ids))
    return nll_sum, int(rows.size), tape


def block_nll(params: ParameterSet, block: PackedBlock, policy: PrecisionPolicy | None = None) -> np.ndarray:
    """Per-position NLL (NaN where a position has no target)."""
    nll_sum, _, tape = forward_loss(params, block, policy)
    logits = tape.final[2]
    out = np.full(len(tape.targets), np.nan)
    rows = np.flatnonzero(tape.targets >= 0)
    m = logits.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[:, 0]
    out[rows] = lse[rows] - logits[rows, tape.targets[rows]]
    return out


def backward(tape: Tape, policy: PrecisionPolicy | None = None, scale: float = 1.0) -> dict[str, np.ndarray]:
    """Gradients of ``scale * nll_sum`` for every parameter, rounded to the grads format."""
    params = tape.params
    if tape.used or params.version != tape.version:
        raise StaleTapeError("tape is stale: parameters changed or backward already ran")
    tape.used = True
    policy = policy or tape.policy
    q = _rounder(policy.forward_fmt)
    cfg = params.cfg
    W = lambda name: params[name].values  # noqa: E731
    grads = {name: None for name in params}
    hf, ncf, logits = tape.final
    targets = tape.targets
    rows = np.flatnonzero(targets >= 0)

    dlogits = np.zeros_like(logits)
    if rows.size:
        probs = _softmax(logits[rows])
        probs[np.arange(rows.size), targets[rows]] -= 1.0
        dlogits[rows] = probs * scale
    dlogits = q(dlogits)
    grads["unembed"] = hf.T @ dlogits
    dhf = q(dlogits @ W("unembed").T)
    dx, grads["final_norm"] = rmsnorm_backward(dhf, W("final_norm"), ncf, policy)

    inv_sqrt_d = 1.0 / np.sqrt(cfg.d_model)
    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i}."
        h, nc1, qh, kh, vh, p, a, h2, nc2, u, act = tape.caches[i]
        # MLP branch
        grads[pre + "w_down"] = act.T @ dx
        dact = q(dx @ W(pre + "w_down").T)
        sig = _sigmoid(u)
        du = q(dact * sig * (1.0 + u * (1.0 - sig)))
        grads[pre + "w_up"] = h2.T @ du
        dh2 = q(du @ W(pre + "w_up").T)
        dxm, grads[pre + "mlp_norm"] = rmsnorm_backward(dh2, W(pre + "mlp_norm"), nc2, policy)
        dx_mid = q(dx + dxm)
        # attention branch
        grads[pre + "wo"] = a.T @ dx_mid
        da = q(dx_mid @ W(pre + "wo").T)
        dp = q(da @ vh.T)
        dv = q(p.T @ da)
        ds = q(p * (dp - np.sum(dp * p, axis=-1, keepdims=True)))
        dq = q((ds @ kh) * inv_sqrt_d)
        dk = q((ds.T @ qh) * inv_sqrt_d)
        grads[pre + "wq"] = h.T @ dq
        grads[pre + "wk"] = h.T @ dk
        grads[pre + "wv"] = h.T @ dv
        dh = q(dq @ W(pre + "wq").T + dk @ W(pre + "wk").T + dv @ W(pre + "wv").T)
        dxa, grads[pre + "attn_norm"] = rmsnorm_backward(dh, W(pre + "attn_norm"), nc1, policy)
        dx = q(dx_mid + dxa)

    dE = np.zeros_like(W("embed"))
    np.add.at(dE, tape.ids, dx)
    grads["embed"] = dE
    g = _rounder(policy.grads_fmt)
    return {name: g(grads[name]) for name in params}
