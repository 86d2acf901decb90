"""Tokenizer-independent loss and per-layer-kind weight statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import LayerKind, ParameterSet, forward_loss
from .packing import PackedBlock, PackingMode
from .precision import PrecisionPolicy
from .tokenizer import TokenizerModel, count_words

__all__ = [
    "EvalReport",
    "GroupStats",
    "WeightReport",
    "word_normalized_nll",
    "weight_histogram",
    "param_change",
    "group_of",
]

GROUPS = ("RMSNorm", "other")


def group_of(kind: LayerKind) -> str:
    return "RMSNorm" if LayerKind(kind) is LayerKind.RMSNORM else "other"


@dataclass
class EvalReport:
    nll_sum: float
    token_count: int
    word_count: int
    nll_per_token: float
    nll_per_word: float
    chunk_ids: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = ["nll_sum", "token_count", "word_count", "nll_per_token", "nll_per_word"]
        w = csv.writer(buf)
        w.writerow(keys)
        w.writerow([getattr(self, k) for k in keys])
        return buf.getvalue()


def _chunk_blocks(ids: list[int], context_length: int, bos_id: int, pad_id: int) -> list[PackedBlock]:
    # every window starts with BOS so each token of the chunk is predicted exactly once
    step = context_length - 1
    blocks = []
    for s in range(0, len(ids), step):
        piece = [bos_id] + ids[s : s + step]
        n = len(piece)
        buf = np.full(context_length, pad_id, dtype=np.int64)
        buf[:n] = piece
        blocks.append(PackedBlock(buf, [(0, n)], PackingMode.BOS_MASKED, n, pad_id, [0]))
    return blocks


def word_normalized_nll(
    params: ParameterSet,
    tokenizer: TokenizerModel,
    chunks,
    policy: PrecisionPolicy | None = None,
    chunk_ids=None,
) -> EvalReport:
    """Summed NLL over text chunks, normalized both by tokens and by whitespace-split words."""
    chunks = list(chunks)
    if not chunks:
        raise ValueError("no chunks to evaluate")
    if len(tokenizer) != params.cfg.vocab_size:
        raise ValueError("tokenizer and model vocabulary sizes differ")
    total, tokens, words = 0.0, 0, 0
    ctx = params.cfg.context_length
    for text in chunks:
        ids = tokenizer.encode(text)
        if not ids or count_words(text) == 0:
            raise ValueError("empty chunk")
        for block in _chunk_blocks(ids, ctx, tokenizer.bos_id, tokenizer.pad_id):
            nll, n, _ = forward_loss(params, block, policy)
            total += nll
            tokens += n
        words += count_words(text)
    ids_out = list(chunk_ids) if chunk_ids is not None else list(range(len(chunks)))
    return EvalReport(total, tokens, words, total / tokens, total / words, ids_out)


@dataclass
class GroupStats:
    param_count: int
    mean_abs: float
    histogram: list[int]
    mean_abs_change: float | None = None


@dataclass
class WeightReport:
    bin_edges: list[float]
    groups: dict[str, GroupStats]

    def to_dict(self) -> dict:
        return {"bin_edges": self.bin_edges, "groups": {k: asdict(v) for k, v in self.groups.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        """One row per (group, bin); bin 0 is underflow and the last bin is overflow."""
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["group", "bin", "lower", "upper", "count", "mean_abs", "mean_abs_change"])
        edges = [0.0] + self.bin_edges + [float("inf")]
        for name, g in self.groups.items():
            for i, c in enumerate(g.histogram):
                w.writerow([name, i, edges[i], edges[i + 1], c, g.mean_abs, g.mean_abs_change])
        return buf.getvalue()


def _grouped(params: ParameterSet, values_of):
    out = {g: [] for g in GROUPS}
    for name, p in params.items():
        out[group_of(p.layer_kind)].append(np.abs(np.ravel(values_of(name, p))))
    return {g: (np.concatenate(v) if v else np.zeros(0)) for g, v in out.items()}


def weight_histogram(params: ParameterSet, bins: int = 64, lo: float = 1e-6, hi: float = 10.0, current=None) -> WeightReport:
    """|w| histogram per group over ``bins`` log-spaced bins, plus underflow and overflow buckets."""
    edges = np.logspace(np.log10(lo), np.log10(hi), bins + 1)
    vals = _grouped(params, lambda n, p: p.values if current is None else current[n])
    groups = {}
    for g, a in vals.items():
        idx = np.searchsorted(edges, a, side="right")
        hist = np.bincount(idx, minlength=bins + 2)
        groups[g] = GroupStats(int(a.size), float(a.mean()) if a.size else 0.0, [int(c) for c in hist])
    return WeightReport([float(e) for e in edges], groups)


def param_change(params: ParameterSet, snapshots=None, bins: int = 64, current=None) -> WeightReport:
    """Weight histogram plus mean |w_final - w_init| per group.

    ``current`` overrides the stored values (e.g. an fp32 master copy).
    """
    def init_of(name, p):
        if snapshots is not None:
            if name not in snapshots:
                raise KeyError(f"no snapshot for {name}")
            return snapshots[name]
        if p.init_snapshot is None:
            raise KeyError(f"no snapshot for {name}")
        return p.init_snapshot

    report = weight_histogram(params, bins, current=current)
    deltas = _grouped(params, lambda n, p: (p.values if current is None else current[n]) - init_of(n, p))
    for g, a in deltas.items():
        report.groups[g].mean_abs_change = float(a.mean()) if a.size else 0.0
    return report
