import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetlm.evaluation import param_change, weight_histogram, word_normalized_nll
from budgetlm.model import LayerKind, ModelConfig, Parameter, ParameterSet, init_model
from budgetlm.precision import PURE_BF16, WIDE_PURE
from budgetlm.synthetic import make_language, sample_documents
from budgetlm.tokenizer import TrainerConfig, count_words, fertility, train_bpe


class TwoPerWord:
    """Every word costs two tokens out of a 128-entry vocabulary."""

    bos_id = 0
    pad_id = 1

    def __len__(self):
        return 128

    def encode(self, text):
        return [5 + (i % 100) for i in range(2 * len(text.split()))]


def uniform_model(vocab_size, ctx=8, policy=WIDE_PURE):
    p = init_model(ModelConfig(vocab_size, 4, 1, 8, ctx), 0, policy)
    p["unembed"].values[:] = 0.0
    return p


CHUNKS = sample_documents(make_language(0), 12, 1)


@pytest.fixture(scope="module")
def toks():
    a = train_bpe(CHUNKS, TrainerConfig(vocab_size=300))
    b = train_bpe(CHUNKS, TrainerConfig(vocab_size=420))
    return a, b


class TestWordNLL:
    def test_uniform_hand_value(self):
        r = word_normalized_nll(uniform_model(128), TwoPerWord(), ["one two three four five"])
        assert r.token_count == 10 and r.word_count == 5
        assert abs(r.nll_per_word - 10 * math.log(128) / 5) < 1e-9
        assert abs(r.nll_per_token - math.log(128)) < 1e-9

    def test_long_chunk_spans_windows(self):
        # 40 tokens through a context of 8: every token still counted once
        r = word_normalized_nll(uniform_model(128), TwoPerWord(), [" ".join(["w"] * 20)])
        assert r.token_count == 40
        assert abs(r.nll_sum - 40 * math.log(128)) < 1e-9

    def test_ratio_is_fertility(self, toks):
        tok = toks[0]
        params = init_model(ModelConfig(len(tok), 8, 1, 16, 32), 1, WIDE_PURE)
        r = word_normalized_nll(params, tok, CHUNKS[:4])
        joined = " ".join(CHUNKS[:4])
        assert abs(r.nll_per_word / r.nll_per_token - fertility(tok, joined)) < 1e-9

    def test_word_count_same_across_tokenizers(self, toks):
        a, b = toks
        ra = word_normalized_nll(uniform_model(len(a)), a, CHUNKS[:3])
        rb = word_normalized_nll(uniform_model(len(b)), b, CHUNKS[:3])
        assert ra.word_count == rb.word_count == sum(count_words(c) for c in CHUNKS[:3])
        assert ra.token_count != rb.token_count

    def test_errors(self, toks):
        with pytest.raises(ValueError):
            word_normalized_nll(uniform_model(128), TwoPerWord(), [])
        with pytest.raises(ValueError):
            word_normalized_nll(uniform_model(128), TwoPerWord(), ["   "])
        with pytest.raises(ValueError):
            word_normalized_nll(uniform_model(64), TwoPerWord(), ["a b"])

    def test_report_outputs(self):
        r = word_normalized_nll(uniform_model(128), TwoPerWord(), ["a b", "c"], chunk_ids=[7, 9])
        assert json.loads(r.to_json())["chunk_ids"] == [7, 9]
        rows = list(csv.reader(io.StringIO(r.to_csv())))
        assert rows[0][0] == "nll_sum" and float(rows[1][3]) == pytest.approx(r.nll_per_token)


def two_param_set():
    cfg = ModelConfig(2, 1, 1, 1, 2)
    p = ParameterSet(cfg, WIDE_PURE)
    p["g"] = Parameter("g", LayerKind.RMSNORM, np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    p["w"] = Parameter("w", LayerKind.LINEAR, np.array([1.5, 2.0]), np.array([1.0, 2.0]))
    return p


class TestWeights:
    def test_change_hand_example(self):
        r = param_change(two_param_set())
        assert r.groups["other"].mean_abs_change == pytest.approx(0.25, abs=1e-12)
        assert r.groups["RMSNorm"].mean_abs_change == 0.0

    def test_untrained_zero_change(self):
        p = init_model(ModelConfig(16, 8, 2, 16, 8), 0, PURE_BF16)
        p.snapshot()
        r = param_change(p)
        assert all(g.mean_abs_change == 0.0 for g in r.groups.values())

    def test_fresh_init_means(self):
        p = init_model(ModelConfig(200, 32, 2, 64, 8), 0, PURE_BF16)
        r = weight_histogram(p)
        assert r.groups["RMSNorm"].mean_abs == 1.0
        # E|N(0, 0.02)| = 0.02 * sqrt(2 / pi)
        assert r.groups["other"].mean_abs == pytest.approx(0.02 * math.sqrt(2 / math.pi), rel=0.03)

    @settings(max_examples=30)
    @given(st.integers(1, 80), st.integers(0, 10_000))
    def test_histogram_mass(self, bins, seed):
        p = init_model(ModelConfig(12, 4, 1, 8, 4), seed, PURE_BF16)
        r = weight_histogram(p, bins=bins)
        for g in r.groups.values():
            assert len(g.histogram) == bins + 2
            assert sum(g.histogram) == g.param_count
        assert r.groups["RMSNorm"].param_count == 12
        assert len(r.bin_edges) == bins + 1

    def test_buckets(self):
        p = two_param_set()
        p["w"].values = np.array([0.0, 100.0])
        r = weight_histogram(p, bins=4)
        assert r.groups["other"].histogram[0] == 1 and r.groups["other"].histogram[-1] == 1

    def test_missing_snapshot(self):
        p = init_model(ModelConfig(12, 4, 1, 8, 4), 0)
        with pytest.raises(KeyError):
            param_change(p)
        with pytest.raises(KeyError):
            param_change(p, snapshots={"embed": p["embed"].values})

    def test_current_override(self):
        p = two_param_set()
        cur = {"g": np.array([1.0, 2.0]), "w": np.array([1.0, 3.0])}
        r = param_change(p, current=cur)
        assert r.groups["other"].mean_abs_change == pytest.approx(0.5)

    def test_outputs(self):
        r = param_change(two_param_set(), bins=3)
        d = json.loads(r.to_json())
        assert set(d["groups"]) == {"RMSNorm", "other"}
        rows = list(csv.reader(io.StringIO(r.to_csv())))
        assert len(rows) == 1 + 2 * 5
