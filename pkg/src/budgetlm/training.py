"""Mini-batch training loop pieces shared by experiments and tests."""

from __future__ import annotations

import numpy as np

from .model import ParameterSet, backward, forward_loss
from .numerics import quantize
from .optim import AdamWConfig, NumericalAbort, OptimizerState, adamw_step
from .packing import PackedBlock
from .precision import PrecisionPolicy

__all__ = ["batch_gradients", "train_step", "iterate_batches", "evaluate_blocks"]


def batch_gradients(params: ParameterSet, batch: list[PackedBlock], policy: PrecisionPolicy):
    """Mean-token NLL and its gradients over a list of blocks.

    Blocks are reduced in list order, so the result does not depend on how
    (or whether) the per-block work was parallelized.
    """
    n_tokens = sum(int((b.targets() >= 0).sum()) for b in batch)
    if n_tokens == 0:
        return 0.0, 0, {n: np.zeros_like(p.values) for n, p in params.items()}
    total = 0.0
    acc = None
    for block in batch:
        nll, _, tape = forward_loss(params, block, policy)
        total += nll
        g = backward(tape, policy, scale=1.0 / n_tokens)
        if acc is None:
            acc = g
        else:
            for k in acc:
                acc[k] = acc[k] + g[k]
    if len(batch) > 1 and not policy.grads_fmt.is_carrier:
        acc = {k: quantize(v, policy.grads_fmt) for k, v in acc.items()}
    return total / n_tokens, n_tokens, acc


def train_step(
    params: ParameterSet,
    state: OptimizerState,
    batch: list[PackedBlock],
    adam: AdamWConfig,
    policy: PrecisionPolicy,
    lr: float,
    only=None,
) -> dict:
    loss, n_tokens, grads = batch_gradients(params, batch, policy)
    if not np.isfinite(loss):
        raise NumericalAbort(f"non-finite loss at step {state.step + 1}")
    names = list(params) if only is None else list(only)
    grad_norm = float(np.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names)))
    adamw_step(params, grads, state, adam, policy, lr, only=only)
    return {"step": state.step, "lr": lr, "loss": loss, "grad_norm": grad_norm, "tokens": n_tokens}


def iterate_batches(blocks: list[PackedBlock], batch_size: int, seed: int):
    """Endless stream of batches; reshuffles the block order every epoch."""
    if not blocks:
        raise ValueError("no training blocks")
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(blocks))
        for i in range(0, len(order) - batch_size + 1 if len(order) >= batch_size else 1, batch_size):
            yield [blocks[j] for j in order[i : i + batch_size]]


def evaluate_blocks(params: ParameterSet, blocks: list[PackedBlock], policy: PrecisionPolicy | None = None):
    """Summed NLL and target count over blocks, forward only."""
    total, count = 0.0, 0
    for b in blocks:
        nll, n, _ = forward_loss(params, b, policy)
        total += nll
        count += n
    return total, count
