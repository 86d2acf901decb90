import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from budgetlm.model import LayerKind, ModelConfig, Parameter, ParameterSet, init_model
from budgetlm.numerics import BF16, FP32, Stochastic, exact_vanish_threshold, finite_values, quantize
from budgetlm.optim import AdamWConfig, NumericalAbort, adamw_step, init_optimizer_state
from budgetlm.packing import pack_documents
from budgetlm.precision import MIXED_BF16, PURE_BF16, WIDE_MIXED, WIDE_PURE
from budgetlm.schedules import ScheduleSpec, _phases, cosine_floor, infinite, lr_at, phase_boundaries
from budgetlm.training import iterate_batches, train_step

BF16_NORMAL = finite_values(BF16, nonnegative=True)
BF16_NORMAL = BF16_NORMAL[(BF16_NORMAL >= BF16.min_normal) & (BF16_NORMAL < 1e30)]


def one_param(value, policy):
    cfg = ModelConfig(4, 1, 1, 1, 2)
    ps = ParameterSet(cfg, policy)
    ps["w"] = Parameter("w", LayerKind.LINEAR, np.array([value], dtype=float))
    return ps


class TestAdamW:
    def test_config_defaults(self):
        c = AdamWConfig()
        assert (c.lr_peak, c.betas, c.weight_decay, c.eps) == (4e-5, (0.9, 0.95), 0.05, 1e-8)
        with pytest.raises(ValueError):
            AdamWConfig(betas=(1.0, 0.9))

    def test_mixed_example(self):
        p = one_param(1.0, MIXED_BF16)
        s = init_optimizer_state(p, MIXED_BF16)
        adamw_step(p, {"w": np.array([1.0])}, s, AdamWConfig(), MIXED_BF16, 4e-5)
        want = 1 - 4e-5 * (1 / (1 + 1e-8) + 0.05)
        # an fp32 master can only hold the correctly rounded value (spacing near 1 is 6e-8)
        assert s.master["w"][0] == quantize(want, FP32)
        pw = one_param(1.0, WIDE_MIXED)
        sw = init_optimizer_state(pw, WIDE_MIXED)
        adamw_step(pw, {"w": np.array([1.0])}, sw, AdamWConfig(), WIDE_MIXED, 4e-5)
        assert abs(sw.master["w"][0] - want) < 1e-9
        # 0.999958 sits within half a bf16 spacing (2**-9) of 1.0
        assert p["w"].values[0] == 1.0
        assert s.step == 1

    def test_pure_example_vanishes(self):
        p = one_param(1.0, PURE_BF16)
        s = init_optimizer_state(p, PURE_BF16)
        adamw_step(p, {"w": np.array([1.0])}, s, AdamWConfig(), PURE_BF16, 4e-5)
        assert p["w"].values[0] == 1.0
        assert 4.2e-5 < exact_vanish_threshold(1.0, BF16)

    def test_mixed_accumulates_what_pure_drops(self):
        pp, pm = one_param(1.0, PURE_BF16), one_param(1.0, MIXED_BF16)
        sp, sm = init_optimizer_state(pp, PURE_BF16), init_optimizer_state(pm, MIXED_BF16)
        cfg = AdamWConfig(weight_decay=0.0)
        for _ in range(200):
            adamw_step(pp, {"w": np.array([1.0])}, sp, cfg, PURE_BF16, 4e-5)
            adamw_step(pm, {"w": np.array([1.0])}, sm, cfg, MIXED_BF16, 4e-5)
        assert pp["w"].values[0] == 1.0
        assert pm["w"].values[0] < 1.0

    def test_zero_grad_only_decay(self):
        p = init_model(ModelConfig(11, 4, 1, 8, 8), 0, WIDE_PURE)
        before = {n: q.values.copy() for n, q in p.items()}
        s = init_optimizer_state(p, WIDE_PURE)
        adamw_step(p, {n: np.zeros_like(q.values) for n, q in p.items()}, s, AdamWConfig(), WIDE_PURE, 1e-3)
        for n in p:
            assert np.allclose(p[n].values, before[n] - 1e-3 * 0.05 * before[n], rtol=0, atol=1e-15)

    @pytest.mark.parametrize("policy", [PURE_BF16, MIXED_BF16])
    def test_zero_grad_no_decay_bit_identical(self, policy):
        p = init_model(ModelConfig(11, 4, 1, 8, 8), 0, policy)
        before = {n: q.values.copy() for n, q in p.items()}
        s = init_optimizer_state(p, policy)
        adamw_step(p, {n: np.zeros_like(q.values) for n, q in p.items()}, s, AdamWConfig(weight_decay=0.0), policy, 1e-3)
        assert all(np.array_equal(p[n].values, before[n]) for n in p)

    def test_nan_gradient_aborts(self):
        p = one_param(1.0, PURE_BF16)
        s = init_optimizer_state(p, PURE_BF16)
        with pytest.raises(NumericalAbort):
            adamw_step(p, {"w": np.array([np.nan])}, s, AdamWConfig(), PURE_BF16, 1e-3)
        assert s.step == 0 and p["w"].values[0] == 1.0

    def test_state_formats(self):
        rng = np.random.default_rng(0)
        for policy in (PURE_BF16, MIXED_BF16):
            p = init_model(ModelConfig(11, 4, 1, 8, 8), 0, policy)
            s = init_optimizer_state(p, policy)
            assert (s.master is not None) == policy.master_weights
            for _ in range(3):
                adamw_step(p, {n: rng.normal(size=q.values.shape) for n, q in p.items()}, s, AdamWConfig(), policy, 1e-3)
            fmt = policy.optimizer_state_fmt
            for n in p:
                assert np.array_equal(quantize(s.m[n], fmt), s.m[n])
                assert np.array_equal(quantize(s.v[n], fmt), s.v[n])
                assert np.array_equal(quantize(p[n].values, BF16), p[n].values)

    def test_policy_state_mismatch(self):
        p = one_param(1.0, PURE_BF16)
        s = init_optimizer_state(p, PURE_BF16)
        with pytest.raises(ValueError):
            adamw_step(p, {"w": np.array([1.0])}, s, AdamWConfig(), MIXED_BF16, 1e-3)

    def test_only_subset(self):
        p = init_model(ModelConfig(11, 4, 1, 8, 8), 0, WIDE_PURE)
        before = {n: q.values.copy() for n, q in p.items()}
        s = init_optimizer_state(p, WIDE_PURE)
        adamw_step(p, {n: np.ones_like(q.values) for n, q in p.items()}, s, AdamWConfig(), WIDE_PURE, 1e-3, only=["embed"])
        assert not np.array_equal(p["embed"].values, before["embed"])
        assert all(np.array_equal(p[n].values, before[n]) for n in p if n != "embed")

    def test_wide_limit_pure_equals_mixed(self):
        cfg = ModelConfig(15, 8, 1, 16, 8)
        rng = np.random.default_rng(0)
        docs = [rng.integers(3, 15, size=6) for _ in range(8)]
        blocks = pack_documents(docs, "bos_masked", 8)
        runs = []
        for policy in (WIDE_PURE, WIDE_MIXED):
            p = init_model(cfg, 1, policy)
            s = init_optimizer_state(p, policy)
            it = iterate_batches(blocks, 2, 0)
            for _ in range(5):
                train_step(p, s, next(it), AdamWConfig(), policy, 1e-2)
            runs.append(p)
        assert all(np.array_equal(runs[0][n].values, runs[1][n].values) for n in runs[0])

    @given(st.sampled_from(list(BF16_NORMAL[::50])), st.lists(st.floats(-0.999, 0.999), min_size=1, max_size=50))
    def test_vanishing_update_theorem(self, w, fracs):
        t = exact_vanish_threshold(w, BF16, two_sided=True)
        cur = w
        for f in fracs:
            cur = quantize(cur - f * t, BF16)
        assert cur == w

    def test_vanishing_through_adamw(self):
        rng = np.random.default_rng(0)
        p = one_param(1.0, PURE_BF16)
        s = init_optimizer_state(p, PURE_BF16)
        for _ in range(50):
            adamw_step(p, {"w": rng.normal(size=1)}, s, AdamWConfig(weight_decay=0.0), PURE_BF16, 1e-6)
        assert p["w"].values[0] == 1.0

    def test_stochastic_rounding_unfreezes(self):
        cfg = ModelConfig(32, 16, 1, 32, 16)
        rng = np.random.default_rng(0)
        blocks = pack_documents([rng.integers(3, 32, size=12) for _ in range(16)], "bos_masked", 16)
        deltas = {}
        for name, rounding in (("nearest", AdamWConfig().rounding), ("stochastic", Stochastic(1))):
            p = init_model(cfg, 0, PURE_BF16)
            p.snapshot()
            s = init_optimizer_state(p, PURE_BF16)
            it = iterate_batches(blocks, 2, 0)
            for _ in range(30):
                train_step(p, s, next(it), AdamWConfig(rounding=rounding), PURE_BF16, 4e-5)
            deltas[name] = np.mean(
                np.concatenate([np.abs(q.values - q.init_snapshot) for q in p.values() if q.layer_kind is LayerKind.RMSNORM])
            )
        assert deltas["nearest"] == 0.0
        assert deltas["stochastic"] > 10 * deltas["nearest"]
        assert deltas["stochastic"] > 0


class TestSchedules:
    def test_cosine_anchors(self):
        s = cosine_floor(7680, 76, 4e-5, 2e-6)
        assert lr_at(s, 76) == 4e-5
        assert lr_at(s, 7680) == 2e-6
        assert lr_at(s, 1) == 4e-5 / 76

    def test_cosine_midpoint(self):
        s = cosine_floor(276, 76, 4e-5, 2e-6)
        assert lr_at(s, 176) == pytest.approx((4e-5 + 2e-6) / 2, rel=1e-12)

    def test_infinite_anchors(self):
        s = infinite(1000)
        assert phase_boundaries(s) == [10, 610, 860, 1000]
        assert [lr_at(s, k) for k in (10, 610, 860, 1000)] == [3e-5, 1.65e-5, 1.65e-5, 2e-6]
        assert lr_at(s, 700) == 1.65e-5
        assert lr_at(s, 930) == pytest.approx((1.65e-5 + 2e-6) / 2, rel=1e-12)

    def test_out_of_range(self):
        s = infinite(1000)
        with pytest.raises(ValueError):
            lr_at(s, 1001)
        with pytest.raises(ValueError):
            lr_at(s, -1)

    def test_rejects_bad_fractions(self):
        with pytest.raises(ValueError):
            ScheduleSpec("infinite", 100, 0.5, 1e-3, 1e-4, 0.5, 0.5, 1e-5)
        with pytest.raises(ValueError):
            ScheduleSpec("infinite", 100, 0.01, 1e-3, 1e-4, 0.25, 0.14)

    def test_dict_round_trip(self):
        s = infinite(500)
        assert ScheduleSpec.from_dict(s.to_dict()) == s

    @given(st.integers(20, 20000), st.sampled_from(["cosine", "infinite"]))
    def test_continuity(self, total, kind):
        s = cosine_floor(total, max(1, total // 100)) if kind == "cosine" else infinite(total)
        phases = _phases(s)
        for (_, end, f), (start, _, g) in zip(phases, phases[1:]):
            assert end == start
            assert abs(f(end) - g(start)) <= 1e-12 * max(abs(f(end)), 1e-300)
        assert phases[-1][1] == total

    @given(st.integers(20, 5000))
    def test_monotone_and_bounded(self, total):
        s = infinite(total)
        lrs = [lr_at(s, k) for k in range(total + 1)]
        warm = phase_boundaries(s)[0]
        assert all(a <= b for a, b in zip(lrs[: warm + 1], lrs[1 : warm + 1]))
        assert all(a >= b - 1e-18 for a, b in zip(lrs[warm:], lrs[warm + 1 :]))
        assert max(lrs) == 3e-5 and lrs[-1] == 2e-6

    def test_phase_fractions(self):
        s = infinite(1000)
        assert s.warmup_frac + 0.60 + s.constant_frac + s.anneal_frac == pytest.approx(1.0)
        assert s.anneal_frac == pytest.approx(0.14)
