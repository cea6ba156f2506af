import math
import random

import numpy as np
import pytest

from resilsim.cluster import MicroBatch
from resilsim.workload import (
    CHUNK_BW,
    CHUNK_F,
    CostModel,
    fit_cost_model,
    pack_sequences,
    predict_chunk_time,
    quad_load,
)


def mb(lengths, budget=None):
    budget = budget or sum(lengths)
    return MicroBatch(id=0, doc_lengths=tuple(lengths), token_budget=budget)


class TestPacking:
    def test_exact_fit_single_doc(self):
        out = pack_sequences([4096], 4096)
        assert len(out) == 1
        assert out[0].doc_lengths == (4096,)

    def test_four_1k_docs_pack_into_one(self):
        out = pack_sequences([1024] * 4, 4096)
        assert len(out) == 1
        assert sorted(out[0].doc_lengths) == [1024] * 4

    def test_first_fit_decreasing_hand_run(self):
        # FFD on [3000, 2000, 1000] with budget 4096: bin0 takes 3000 then
        # 1000, 2000 opens bin1; both bins padded up to the exact budget.
        out = pack_sequences([3000, 2000, 1000], 4096)
        assert [b.doc_lengths for b in out] == [(3000, 1000, 96), (2000, 2096)]

    def test_doc_longer_than_budget_is_error(self):
        with pytest.raises(ValueError):
            pack_sequences([5000], 4096)

    def test_fuzzed_bins_always_sum_to_budget(self):
        rng = random.Random(3)
        for _ in range(100):
            budget = rng.choice([1024, 4096, 8192])
            docs = [rng.randint(1, budget) for _ in range(rng.randint(1, 40))]
            for b in pack_sequences(docs, budget):
                assert sum(b.doc_lengths) == budget
                assert all(l > 0 for l in b.doc_lengths)


class TestQuadLoad:
    def test_single_square(self):
        assert quad_load(mb([4096])) == 16_777_216

    def test_packed_quarter_of_contiguous(self):
        packed = quad_load(mb([1024] * 4))
        assert packed == 4_194_304
        assert quad_load(mb([4096])) == 4 * packed

    def test_arithmetic(self):
        assert quad_load(mb([3000, 1000], budget=4096)) == 10_000_000


class TestPredict:
    def test_plug_in(self):
        model = CostModel(alpha=0.0, beta=1e-12)
        t = predict_chunk_time(mb([4096]), CHUNK_F, model, 1, 1.0)
        assert t == pytest.approx(16.777216e-6)

    def test_speed_halving_doubles_time(self):
        model = CostModel(alpha=0.0, beta=1e-12)
        t1 = predict_chunk_time(mb([4096]), CHUNK_F, model, 1, 1.0)
        t2 = predict_chunk_time(mb([4096]), CHUNK_F, model, 1, 0.5)
        assert t2 == pytest.approx(2 * t1)

    def test_packed_exactly_four_times_cheaper_when_alpha_zero(self):
        model = CostModel(alpha=0.0, beta=1e-12)
        t_packed = predict_chunk_time(mb([1024] * 4), CHUNK_F, model, 1, 1.0)
        t_full = predict_chunk_time(mb([4096]), CHUNK_F, model, 1, 1.0)
        assert t_full == pytest.approx(4 * t_packed)

    def test_zero_speed_is_hard_error(self):
        model = CostModel(alpha=1e-6, beta=0.0)
        with pytest.raises(ValueError):
            predict_chunk_time(mb([4096]), CHUNK_F, model, 1, 0.0)

    def test_merged_backward_ratio_is_b_plus_w(self):
        model = CostModel(alpha=1e-6, beta=0.0,
                          chunk_ratios={"F": 1.0, "B": 1.0, "W": 1.0})
        f = predict_chunk_time(mb([4096]), CHUNK_F, model, 1, 1.0)
        bw = predict_chunk_time(mb([4096]), CHUNK_BW, model, 1, 1.0)
        assert bw == pytest.approx(2 * f)

    def test_homogeneity_degree_minus_one_fuzz(self):
        rng = random.Random(5)
        model = CostModel(alpha=2e-6, beta=3e-10)
        for _ in range(100):
            docs = [rng.randint(1, 4096) for _ in range(rng.randint(1, 8))]
            m = mb(docs)
            p = rng.uniform(0.05, 1.0)
            scale = rng.uniform(1.1, 4.0)
            t1 = predict_chunk_time(m, CHUNK_F, model, 3, p)
            t2 = predict_chunk_time(m, CHUNK_F, model, 3, p * scale)
            assert t1 / t2 == pytest.approx(scale, rel=1e-9)

    def test_monotone_in_quad_load_for_fixed_budget(self):
        model = CostModel(alpha=2e-6, beta=3e-10)
        batches = [
            mb([512] * 8, budget=4096),
            mb([1024] * 4, budget=4096),
            mb([2048, 2048], budget=4096),
            mb([4096], budget=4096),
        ]
        times = [predict_chunk_time(b, CHUNK_F, model, 1, 1.0) for b in batches]
        assert times == sorted(times)


class TestFit:
    def synth(self, alpha, beta, seed=0, n=64, noise=0.0):
        rng = np.random.default_rng(seed)
        samples = []
        for i in range(n):
            k = int(rng.integers(1, 9))
            cuts = sorted(rng.choice(np.arange(1, 4096), size=k - 1, replace=False)) if k > 1 else []
            lengths = np.diff([0, *cuts, 4096]).astype(int)
            b = MicroBatch(id=i, doc_lengths=tuple(int(x) for x in lengths), token_budget=4096)
            t = alpha * 4096 + beta * quad_load(b)
            if noise:
                t *= 1.0 + rng.uniform(-noise, noise)
            samples.append((b, t))
        return samples

    def test_noiseless_recovery(self):
        samples = self.synth(2e-6, 3e-12)
        model, mape = fit_cost_model(samples)
        assert model.alpha == pytest.approx(2e-6, rel=1e-6)
        assert model.beta == pytest.approx(3e-12, rel=1e-6)
        assert mape < 1e-9

    def test_one_percent_noise_mape_below_two_percent(self):
        # Monte-Carlo over seeds: in-sample MAPE tracks mean |noise|.
        for seed in range(5):
            samples = self.synth(2e-6, 3e-12, seed=seed, noise=0.01)
            _, mape = fit_cost_model(samples)
            assert mape <= 0.02

    def test_two_exact_samples_interpolate(self):
        a = MicroBatch(id=0, doc_lengths=(4096,), token_budget=4096)
        b = MicroBatch(id=1, doc_lengths=(1024,) * 4, token_budget=4096)
        alpha, beta = 1.5e-6, 2.5e-12
        samples = [
            (a, alpha * 4096 + beta * quad_load(a)),
            (b, alpha * 4096 + beta * quad_load(b)),
        ]
        model, mape = fit_cost_model(samples)
        assert model.alpha == pytest.approx(alpha, rel=1e-9)
        assert model.beta == pytest.approx(beta, rel=1e-9)
        assert mape == pytest.approx(0.0, abs=1e-12)

    def test_identical_quad_loads_unidentifiable(self):
        a = MicroBatch(id=0, doc_lengths=(4096,), token_budget=4096)
        samples = [(a, 1.0), (a, 1.0), (a, 1.0)]
        with pytest.raises(ValueError, match="nidentifiable"):
            fit_cost_model(samples)


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(alpha=0.0, beta=0.0)
    with pytest.raises(ValueError):
        CostModel(alpha=-1.0, beta=1.0)
    with pytest.raises(ValueError):
        CostModel(alpha=1.0, beta=0.0, chunk_ratios={"F": 0.0, "B": 1.0, "W": 1.0})
