"""Document packing into fixed-length blocks and the matching attention masks."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = ["PackingMode", "PackedBlock", "pack_documents", "build_attention_mask"]


class PackingMode(str, Enum):
    EOS_CONCAT = "eos_concat"
    BOS_MASKED = "bos_masked"


@dataclass
class PackedBlock:
    """One fixed-length training block.

    ``document_spans`` are half-open ``(start, end)`` ranges covering the
    ``length`` real tokens; positions from ``length`` on are padding.
    """

    token_ids: np.ndarray
    document_spans: list[tuple[int, int]]
    packing_mode: PackingMode
    length: int
    pad_id: int = 0
    span_doc_index: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        pos = 0
        for start, end in self.document_spans:
            if start != pos or end <= start:
                raise ValueError(f"spans must be ordered, disjoint and contiguous: {self.document_spans}")
            pos = end
        if pos != self.length or self.length > len(self.token_ids):
            raise ValueError("spans must cover exactly the non-pad prefix")

    @property
    def context_length(self) -> int:
        return len(self.token_ids)

    def segment_ids(self) -> np.ndarray:
        """Span index per position; each padding position gets its own id."""
        seg = np.empty(self.context_length, dtype=np.int64)
        for i, (start, end) in enumerate(self.document_spans):
            seg[start:end] = i
        n = len(self.document_spans)
        seg[self.length:] = n + np.arange(self.context_length - self.length)
        return seg

    def targets(self) -> np.ndarray:
        """Next-token target per position, -1 where there is none inside the same span."""
        seg = self.segment_ids()
        tgt = np.full(self.context_length, -1, dtype=np.int64)
        if self.length > 1:
            same = seg[: self.length - 1] == seg[1 : self.length]
            tgt[: self.length - 1] = np.where(same, self.token_ids[1 : self.length], -1)
        return tgt


def pack_documents(
    docs,
    mode: PackingMode | str,
    context_length: int,
    *,
    bos_id: int = 1,
    eos_id: int = 2,
    pad_id: int = 0,
) -> list[PackedBlock]:
    """Greedily concatenate token documents into blocks of ``context_length``.

    ``EOS_CONCAT`` puts an EOS id between consecutive documents and treats a
    block as one causal stream. ``BOS_MASKED`` prepends BOS to every document
    and records the true document boundaries so attention can be masked.
    Documents that straddle a block boundary continue in the next block.
    """
    mode = PackingMode(mode)
    if context_length < 2:
        raise ValueError("context_length must be at least 2")
    tokens: list[int] = []
    owner: list[int] = []
    for i, doc in enumerate(docs):
        doc = [int(t) for t in doc]
        if not doc:
            raise ValueError(f"document {i} is empty")
        if mode is PackingMode.EOS_CONCAT:
            if i > 0:
                tokens.append(eos_id)
                owner.append(0)
            tokens.extend(doc)
            owner.extend([0] * len(doc))
        else:
            tokens.append(bos_id)
            tokens.extend(doc)
            owner.extend([i] * (len(doc) + 1))

    blocks = []
    for start in range(0, len(tokens), context_length):
        chunk = tokens[start : start + context_length]
        who = owner[start : start + context_length]
        n = len(chunk)
        ids = np.full(context_length, pad_id, dtype=np.int64)
        ids[:n] = chunk
        spans, doc_index = [], []
        s = 0
        for j in range(1, n + 1):
            if j == n or who[j] != who[s]:
                spans.append((s, j))
                doc_index.append(who[s])
                s = j
        blocks.append(PackedBlock(ids, spans, mode, n, pad_id, doc_index))
    return blocks


def build_attention_mask(block: PackedBlock) -> np.ndarray:
    """Boolean ``(T, T)`` matrix; entry ``(i, j)`` is True when query ``i`` may see key ``j``.

    Causal everywhere. In BOS-masked blocks attention also stays inside one
    document span. Padding keys are never visible to real tokens; a padding
    query sees only itself so its softmax row stays well defined.
    """
    T = block.context_length
    causal = np.tril(np.ones((T, T), dtype=bool))
    real = np.arange(T) < block.length
    if block.packing_mode is PackingMode.BOS_MASKED:
        seg = block.segment_ids()
        mask = causal & (seg[:, None] == seg[None, :])
    else:
        mask = causal & real[None, :]
    pad_rows = ~real
    mask[pad_rows] = False
    mask[pad_rows, pad_rows] = True
    return mask
