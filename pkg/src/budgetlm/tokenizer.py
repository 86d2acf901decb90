"""Byte-fallback BPE with a sentencepiece-style word-boundary marker.

Text gets a leading dummy space; every single space that precedes a word
becomes the marker ``▁`` glued to that word. Any other whitespace character
is a pre-token of its own. Characters outside the trained alphabet (and the
literal ``▁`` character, which would be ambiguous) are spelled as UTF-8 byte
tokens, so ``decode(encode(text)) == text`` for every string.
"""

from __future__ import annotations

import heapq
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

__all__ = [
    "MARKER",
    "TrainerConfig",
    "TokenizerModel",
    "BPETokenizer",
    "train_bpe",
    "pretokenize",
    "count_words",
    "fertility",
]

MARKER = "▁"
PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
FORMAT_VERSION = 1

_PRETOKEN = re.compile(r"( ?)(\S+)|(\s)")


def _byte_piece(b: int) -> str:
    return f"<0x{b:02X}>"


BYTE_PIECES = tuple(_byte_piece(b) for b in range(256))


def _pieces(text: str) -> list[tuple[bool, str]]:
    # (starts with the boundary marker, literal body)
    out = []
    for m in _PRETOKEN.finditer(" " + text):
        space, word, ws = m.groups()
        if word is not None:
            out.append((bool(space), word))
        elif ws == " ":
            out.append((True, ""))
        else:
            out.append((False, ws))
    return out


def pretokenize(text: str) -> list[str]:
    """Split into pre-tokens; a word preceded by one space carries the marker."""
    return [(MARKER if marked else "") + body for marked, body in _pieces(text)]


def _spell(marked: bool, body: str, alphabet, byte_fallback: bool) -> list[str]:
    syms = [MARKER] if marked else []
    for ch in body:
        if ch in alphabet and ch != MARKER:
            syms.append(ch)
        elif byte_fallback:
            syms.extend(_byte_piece(b) for b in ch.encode("utf-8"))
        else:
            syms.append(UNK)
    return syms


def count_words(text: str) -> int:
    """Number of maximal runs of non-whitespace characters."""
    return len(text.split())


@dataclass(frozen=True)
class TrainerConfig:
    vocab_size: int = 32768
    character_coverage: float = 0.9995
    byte_fallback: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.character_coverage <= 1:
            raise ValueError("character_coverage must lie in (0, 1]")
        floor = len(SPECIALS) + (256 if self.byte_fallback else 0)
        if self.vocab_size < floor:
            raise ValueError(f"vocab_size must be at least {floor}")


@dataclass
class TokenizerModel:
    vocab: list[str]
    merges: list[tuple[str, str]]
    byte_fallback: bool = True
    _index: dict = field(init=False, repr=False)
    _ranks: dict = field(init=False, repr=False)
    _cache: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.merges = [tuple(p) for p in self.merges]
        self._index = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self._index) != len(self.vocab):
            raise ValueError("duplicate vocabulary entries")
        for s in SPECIALS:
            if s not in self._index:
                raise ValueError(f"missing special token {s}")
        if self.byte_fallback and any(b not in self._index for b in BYTE_PIECES):
            raise ValueError("byte fallback needs all 256 byte tokens")
        for left, right in self.merges:
            if left + right not in self._index:
                raise ValueError(f"merge output {left + right!r} missing from vocab")
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache = {}

    def __len__(self):
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    def token_to_id(self, token: str) -> int | None:
        return self._index.get(token)

    def alphabet(self) -> set[str]:
        return {t for t in self.vocab if len(t) == 1}

    def _encode_word(self, word: tuple[bool, str]) -> list[int]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        syms = _spell(word[0], word[1], self._index, self.byte_fallback)
        ranks = self._ranks
        while len(syms) > 1:
            best, best_rank = None, None
            for pair in zip(syms, syms[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            syms = _merge_pair(syms, best)
        ids = [self._index[s] for s in syms]
        if len(self._cache) < 200_000:
            self._cache[word] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        if not text:
            return []
        ids = []
        for word in _pieces(text):
            ids.extend(self._encode_word(word))
        return ids

    def decode(self, ids) -> str:
        buf = bytearray()
        n = len(self.vocab)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise ValueError(f"token id {i} outside [0, {n})")
            tok = self.vocab[i]
            if tok in SPECIALS:
                if tok == UNK:
                    buf.extend("�".encode())
                continue
            if len(tok) == 6 and tok.startswith("<0x") and tok.endswith(">"):
                buf.append(int(tok[3:5], 16))
            else:
                buf.extend(tok.replace(MARKER, " ").encode("utf-8"))
        text = buf.decode("utf-8", errors="replace")
        return text[1:] if text.startswith(" ") else text

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "type": "bpe",
            "word_boundary_marker": MARKER,
            "byte_fallback": self.byte_fallback,
            "specials": {"pad": PAD, "bos": BOS, "eos": EOS, "unk": UNK},
            "vocab": list(self.vocab),
            "merges": [list(p) for p in self.merges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerModel":
        if d.get("version") != FORMAT_VERSION or d.get("type") != "bpe":
            raise ValueError("unsupported tokenizer file")
        return cls(list(d["vocab"]), [tuple(p) for p in d["merges"]], bool(d["byte_fallback"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _merge_pair(syms: list[str], pair: tuple[str, str]) -> list[str]:
    left, right = pair
    out = []
    i = 0
    n = len(syms)
    while i < n:
        if i < n - 1 and syms[i] == left and syms[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def _select_alphabet(char_counts: Counter, coverage: float) -> list[str]:
    ranked = sorted(char_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    total = sum(char_counts.values())
    keep, running = [], 0
    for ch, c in ranked:
        if running >= coverage * total:
            break
        keep.append(ch)
        running += c
    return keep


def train_bpe(corpus, cfg: TrainerConfig = TrainerConfig()) -> TokenizerModel:
    """Learn merges greedily by pair frequency; equal counts go to the lexicographically smallest pair."""
    if isinstance(corpus, str):
        corpus = [corpus]
    word_counts: Counter = Counter()
    for text in corpus:
        word_counts.update(_pieces(text))
    if not word_counts:
        raise ValueError("empty corpus")

    char_counts: Counter = Counter()
    for (marked, body), c in word_counts.items():
        if marked:
            char_counts[MARKER] += c
        for ch in body:
            if ch != MARKER:
                char_counts[ch] += c
    alphabet = _select_alphabet(char_counts, cfg.character_coverage)
    if MARKER in char_counts and MARKER not in alphabet:
        alphabet.append(MARKER)

    vocab = list(SPECIALS) + (list(BYTE_PIECES) if cfg.byte_fallback else [])
    vocab += alphabet
    if len(vocab) > cfg.vocab_size:
        raise ValueError(f"vocab_size {cfg.vocab_size} is smaller than the {len(vocab)} required base symbols")
    alpha = set(alphabet)
    mergeable = set(alpha)

    words, counts = [], []
    for (marked, body), c in sorted(word_counts.items()):
        words.append(_spell(marked, body, alpha, cfg.byte_fallback))
        counts.append(c)

    pair_counts: defaultdict = defaultdict(int)
    where: defaultdict = defaultdict(set)
    for wi, syms in enumerate(words):
        for pair in zip(syms, syms[1:]):
            if pair[0] in mergeable and pair[1] in mergeable:
                pair_counts[pair] += counts[wi]
                where[pair].add(wi)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges = []
    seen = set(vocab)
    while len(vocab) < cfg.vocab_size and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg or neg == 0:
            continue
        new = pair[0] + pair[1]
        merges.append(pair)
        if new not in seen:
            vocab.append(new)
            seen.add(new)
        mergeable.add(new)
        touched = set()
        for wi in list(where[pair]):
            old = words[wi]
            c = counts[wi]
            for p in zip(old, old[1:]):
                if p in pair_counts and wi in where[p]:
                    pair_counts[p] -= c
                    touched.add(p)
            for p in set(zip(old, old[1:])):
                where[p].discard(wi)
            new_syms = _merge_pair(old, pair)
            words[wi] = new_syms
            for p in zip(new_syms, new_syms[1:]):
                if p[0] in mergeable and p[1] in mergeable:
                    pair_counts[p] += c
                    where[p].add(wi)
                    touched.add(p)
        pair_counts.pop(pair, None)
        where.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                pair_counts.pop(p, None)
    return TokenizerModel(vocab, merges, cfg.byte_fallback)


def fertility(model: TokenizerModel, text: str) -> float:
    """Tokens per whitespace-split word."""
    words = count_words(text)
    if words == 0:
        raise ValueError("text has no words")
    return len(model.encode(text)) / words


class BPETokenizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on an iterable of strings, ``transform`` to id lists."""

    def __init__(self, vocab_size=32768, character_coverage=0.9995, byte_fallback=True, seed=0):
        self.vocab_size = vocab_size
        self.character_coverage = character_coverage
        self.byte_fallback = byte_fallback
        self.seed = seed

    def fit(self, X, y=None):
        cfg = TrainerConfig(self.vocab_size, self.character_coverage, self.byte_fallback, self.seed)
        self.model_ = train_bpe(list(X), cfg)
        self.n_tokens_ = len(self.model_)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return [self.model_.encode(t) for t in X]

    def inverse_transform(self, X):
        check_is_fitted(self, "model_")
        return [self.model_.decode(ids) for ids in X]

    def fertility(self, text: str) -> float:
        check_is_fitted(self, "model_")
        return fertility(self.model_, text)
