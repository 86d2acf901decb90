"""Re-initialising embedding matrices after a tokenizer swap."""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.extmath import randomized_svd
from sklearn.utils.validation import check_is_fitted

from .model import LayerKind, ParameterSet
from .numerics import quantize
from .optim import AdamWConfig, init_optimizer_state
from .packing import PackedBlock
from .precision import PrecisionPolicy
from .training import iterate_batches, train_step
from .validation import check_embedding_matrix

__all__ = [
    "NormalFixed",
    "FittedNormal",
    "RandomAssign",
    "OverlapHeuristic",
    "FocusLike",
    "AuxEmbeddings",
    "InitResult",
    "init_embeddings",
    "train_aux_embeddings",
    "PPMIEmbedding",
    "EmbeddingInitializer",
    "swap_embeddings",
    "embedding_warmup",
    "EMBEDDING_PARAMS",
]

EMBEDDING_PARAMS = ("embed", "unembed")


@dataclass(frozen=True)
class NormalFixed:
    std: float = 0.02


@dataclass(frozen=True)
class FittedNormal:
    pass


@dataclass(frozen=True)
class RandomAssign:
    std: float = 0.02


@dataclass(frozen=True)
class OverlapHeuristic:
    pass


@dataclass(frozen=True)
class FocusLike:
    top_k: int = 10
    temperature: float = 0.1


METHODS = {
    "normal": NormalFixed,
    "fitted_normal": FittedNormal,
    "random_assign": RandomAssign,
    "overlap": OverlapHeuristic,
    "focus": FocusLike,
}


def method_from_name(name: str):
    try:
        return METHODS[name]()
    except KeyError:
        raise ValueError(f"unknown init method {name!r}; choose from {sorted(METHODS)}") from None


@dataclass
class AuxEmbeddings:
    """Unit-length vectors for the new-vocabulary tokens seen in the auxiliary corpus."""

    vectors: dict[str, np.ndarray]
    window: int
    dim: int

    def __contains__(self, token):
        return token in self.vectors

    def matrix(self, tokens) -> np.ndarray:
        return np.stack([self.vectors[t] for t in tokens]) if tokens else np.zeros((0, self.dim))


@dataclass
class InitResult:
    matrix: np.ndarray
    method: object
    n_overlap: int
    fell_back: bool = False
    copied: list[str] = field(default_factory=list)


def _fitted(rng, old_E, n):
    return rng.normal(old_E.mean(), old_E.std(), size=(n, old_E.shape[1]))


def init_embeddings(method, old_vocab, old_E, new_vocab, seed: int = 0, aux: AuxEmbeddings | None = None) -> InitResult:
    """Build a ``len(new_vocab) x d`` matrix from ``old_E`` (rows indexed like ``old_vocab``)."""
    old_vocab = list(old_vocab)
    new_vocab = list(new_vocab)
    old_E = check_embedding_matrix(old_E, len(old_vocab))
    rng = np.random.default_rng(seed)
    n, d = len(new_vocab), old_E.shape[1]
    old_index = {t: i for i, t in enumerate(old_vocab)}
    overlap = [(j, old_index[t]) for j, t in enumerate(new_vocab) if t in old_index]

    if isinstance(method, NormalFixed):
        return InitResult(rng.normal(0.0, method.std, size=(n, d)), method, len(overlap))
    if isinstance(method, FittedNormal):
        return InitResult(_fitted(rng, old_E, n), method, len(overlap))
    if isinstance(method, RandomAssign):
        perm = rng.permutation(old_E.shape[0])
        out = np.empty((n, d))
        k = min(n, len(perm))
        out[:k] = old_E[perm[:k]]
        if n > k:
            out[k:] = rng.normal(0.0, method.std, size=(n - k, d))
        return InitResult(out, method, len(overlap))
    if isinstance(method, (OverlapHeuristic, FocusLike)):
        if isinstance(method, FocusLike) and aux is None:
            raise ValueError("FocusLike needs auxiliary embeddings")
        out = _fitted(rng, old_E, n)
        for j, i in overlap:
            out[j] = old_E[i]
        copied = [new_vocab[j] for j, _ in overlap]
        if isinstance(method, OverlapHeuristic):
            return InitResult(out, method, len(overlap), copied=copied)
        anchors = [(j, i) for j, i in overlap if new_vocab[j] in aux]
        if not anchors:
            warnings.warn("no overlapping tokens with auxiliary vectors; falling back to the overlap heuristic", stacklevel=2)
            return InitResult(out, method, len(overlap), fell_back=True, copied=copied)
        anchor_vecs = aux.matrix([new_vocab[j] for j, _ in anchors])
        anchor_rows = old_E[[i for _, i in anchors]]
        overlap_set = {j for j, _ in overlap}
        k = min(method.top_k, len(anchors))
        for j, tok in enumerate(new_vocab):
            if j in overlap_set or tok not in aux:
                continue
            sims = anchor_vecs @ aux.vectors[tok]
            top = np.argsort(-sims, kind="stable")[:k]
            w = np.exp((sims[top] - sims[top].max()) / method.temperature)
            out[j] = (w / w.sum()) @ anchor_rows[top]
        return InitResult(out, method, len(overlap), copied=copied)
    raise TypeError(f"unknown init method {method!r}")


def train_aux_embeddings(sequences, window: int = 2, dim: int = 64, seed: int = 0) -> AuxEmbeddings:
    """PPMI co-occurrence vectors over token sequences (strings or ids), SVD-reduced and unit-normalized.

    Co-occurrence is symmetric within ``window`` positions on either side.
    When ``dim`` covers the whole context vocabulary the PPMI rows are kept
    as they are; otherwise a seeded randomized SVD keeps ``dim`` components.
    """
    sequences = [list(s) for s in sequences]
    if not any(sequences):
        raise ValueError("empty corpus")
    tokens = sorted({t for s in sequences for t in s}, key=lambda t: (str(type(t)), t))
    index = {t: i for i, t in enumerate(tokens)}
    n = len(tokens)
    pairs: Counter = Counter()
    for s in sequences:
        ids = [index[t] for t in s]
        for off in range(1, window + 1):
            for a, b in zip(ids, ids[off:]):
                pairs[a, b] += 1
                pairs[b, a] += 1
    C = np.zeros((n, n))
    for (a, b), c in pairs.items():
        C[a, b] = c
    total = C.sum()
    row = C.sum(axis=1, keepdims=True)
    col = C.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(C * total / (row * col))
    ppmi = np.where(np.isfinite(pmi) & (pmi > 0), pmi, 0.0)
    if dim >= n:
        vecs = ppmi
    else:
        U, S, _ = randomized_svd(ppmi, dim, random_state=seed)
        vecs = U * S
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    vecs = np.divide(vecs, norms, out=np.zeros_like(vecs), where=norms > 0)
    width = vecs.shape[1]
    return AuxEmbeddings({t: vecs[index[t]] for t in tokens}, window, width)


class PPMIEmbedding(TransformerMixin, BaseEstimator):
    """Estimator form of :func:`train_aux_embeddings`; ``transform`` maps tokens to vectors (zeros if unseen)."""

    def __init__(self, window=2, dim=64, seed=0):
        self.window = window
        self.dim = dim
        self.seed = seed

    def fit(self, X, y=None):
        self.aux_ = train_aux_embeddings(X, self.window, self.dim, self.seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "aux_")
        z = np.zeros(self.aux_.dim)
        return np.stack([self.aux_.vectors.get(t, z) for t in X])


class EmbeddingInitializer(BaseEstimator):
    """``fit`` on the old vocabulary and matrix, ``transform`` a new vocabulary into a matrix."""

    def __init__(self, method="focus", top_k=10, temperature=0.1, std=0.02, seed=0):
        self.method = method
        self.top_k = top_k
        self.temperature = temperature
        self.std = std
        self.seed = seed

    def _method(self):
        if self.method == "focus":
            return FocusLike(self.top_k, self.temperature)
        if self.method in ("normal", "random_assign"):
            return METHODS[self.method](self.std)
        return method_from_name(self.method)

    def fit(self, old_vocab, old_E):
        old_E = check_embedding_matrix(old_E, len(old_vocab))
        self.old_vocab_ = list(old_vocab)
        self.old_E_ = old_E
        return self

    def transform(self, new_vocab, aux=None):
        check_is_fitted(self, "old_E_")
        self.result_ = init_embeddings(self._method(), self.old_vocab_, self.old_E_, new_vocab, self.seed, aux)
        return self.result_.matrix


def swap_embeddings(params: ParameterSet, old_vocab, new_vocab, method, seed: int = 0, aux=None) -> ParameterSet:
    """New parameter set for ``new_vocab``; every non-embedding tensor is carried over unchanged.

    Input and output matrices are initialized independently with the same method.
    """
    from .model import ModelConfig, Parameter

    cfg = params.cfg
    new_cfg = ModelConfig(**{**cfg.to_dict(), "vocab_size": len(new_vocab)})
    out = ParameterSet(new_cfg, params.policy)
    fmt = params.policy.weights_fmt
    reports = {}
    for name, p in params.items():
        if name == "embed":
            res = init_embeddings(method, old_vocab, p.values, new_vocab, seed, aux)
            values = quantize(res.matrix, fmt)
        elif name == "unembed":
            res = init_embeddings(method, old_vocab, p.values.T, new_vocab, seed + 1, aux)
            values = quantize(res.matrix, fmt).T.copy()
        else:
            out[name] = Parameter(name, p.layer_kind, p.values.copy())
            continue
        reports[name] = res
        out[name] = Parameter(name, p.layer_kind, values)
    out.init_reports = reports
    return out


def embedding_warmup(
    params: ParameterSet,
    blocks: list[PackedBlock],
    steps: int = 100,
    policy: PrecisionPolicy | None = None,
    adam: AdamWConfig = AdamWConfig(),
    lr: float | None = None,
    batch_size: int = 4,
    seed: int = 0,
) -> ParameterSet:
    """Train only the embedding and unembedding matrices for ``steps`` steps, in place."""
    policy = policy or params.policy
    if steps <= 0:
        return params
    trainable = [n for n, p in params.items() if p.layer_kind in (LayerKind.EMBEDDING, LayerKind.UNEMBEDDING)]
    state = init_optimizer_state(params, policy)
    batches = iterate_batches(blocks, batch_size, seed)
    rate = adam.lr_peak if lr is None else lr
    for _ in range(steps):
        train_step(params, state, next(batches), adam, policy, rate, only=trainable)
    params.warmup_log = {"steps": steps, "trainable": trainable}
    return params
