"""Desk-scale synthetic "languages" for experiments and tests.

A language is a class-level Markov grammar over a lexicon. Two languages
built from the same grammar seed share sentence structure; ``shared_frac``
controls how many words keep their spelling, the rest are respelled from a
different letter inventory. That gives tokenizer swaps a realistic overlap
between the old and new vocabularies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Language", "make_language", "sample_documents"]

SOURCE_LETTERS = ("bcdfghklmnprst", "aeiou")
TARGET_LETTERS = ("bdfgjkmnprtvwz", "aeiouy")


@dataclass
class Language:
    words: list[list[str]]
    transitions: np.ndarray
    start: np.ndarray
    word_probs: list[np.ndarray]
    end_prob: float = 0.12

    def sentence(self, rng: np.random.Generator, max_len: int = 18) -> str:
        cls = rng.choice(len(self.words), p=self.start)
        out = []
        for _ in range(max_len):
            ws = self.words[cls]
            out.append(ws[rng.choice(len(ws), p=self.word_probs[cls])])
            if len(out) >= 3 and rng.random() < self.end_prob:
                break
            cls = rng.choice(len(self.words), p=self.transitions[cls])
        return " ".join(out)


def _spell(rng, letters, syllables):
    cons, vow = letters
    return "".join(rng.choice(list(cons)) + rng.choice(list(vow)) for _ in range(syllables))


def _lexicon(rng, n_classes, words_per_class, letters, taken):
    words = []
    for _ in range(n_classes):
        cls = []
        while len(cls) < words_per_class:
            w = _spell(rng, letters, int(rng.integers(1, 4)))
            if w not in taken:
                taken.add(w)
                cls.append(w)
        words.append(cls)
    return words


def make_language(
    grammar_seed: int = 0,
    spelling_seed: int | None = None,
    n_classes: int = 12,
    words_per_class: int = 24,
    shared_frac: float = 1.0,
    letters=SOURCE_LETTERS,
    branching: int = 3,
) -> Language:
    """Build a language; ``shared_frac < 1`` respells that complement of words with ``TARGET_LETTERS``."""
    g = np.random.default_rng(grammar_seed)
    transitions = np.zeros((n_classes, n_classes))
    for c in range(n_classes):
        nxt = g.choice(n_classes, size=branching, replace=False)
        transitions[c, nxt] = g.dirichlet(np.ones(branching))
    start = g.dirichlet(np.ones(n_classes))
    ranks = np.arange(1, words_per_class + 1)
    zipf = 1.0 / ranks
    word_probs = [zipf[g.permutation(words_per_class)] / zipf.sum() for _ in range(n_classes)]
    taken: set[str] = set()
    base = _lexicon(g, n_classes, words_per_class, letters, taken)
    if shared_frac < 1.0:
        s = np.random.default_rng(spelling_seed if spelling_seed is not None else grammar_seed + 1000)
        for cls in base:
            for i in range(len(cls)):
                if s.random() >= shared_frac:
                    while True:
                        w = _spell(s, TARGET_LETTERS, int(s.integers(2, 4)))
                        if w not in taken:
                            taken.add(w)
                            cls[i] = w
                            break
    return Language(base, transitions, start, word_probs)


def sample_documents(lang: Language, n_docs: int, seed: int, sentences=(2, 6)) -> list[str]:
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        k = int(rng.integers(sentences[0], sentences[1] + 1))
        docs.append(" ".join(lang.sentence(rng) + "." for _ in range(k)))
    return docs
