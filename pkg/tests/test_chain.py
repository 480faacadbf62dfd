"""Cumulative-logit chain construction and its round trips."""

import numpy as np
import pytest

from hmmdropout import (
    UnboundedLogitError,
    ValidationError,
    build_chain_law,
    chain_law_logits,
    cumulative_logits,
    invert_global_logit,
)
from hmmdropout.chain import (
    pack_decreasing,
    pack_eta0,
    pack_eta1,
    unpack_decreasing,
    unpack_eta0,
    unpack_eta1,
)

from oracles import random_params


class TestInvertGlobalLogit:
    def test_single_threshold_at_zero(self):
        assert np.allclose(invert_global_logit([0.0], 0.0), [0.5, 0.5])

    def test_symmetric_three_state_row(self):
        # survivor values 2/3 and 1/3 leave equal thirds
        p = invert_global_logit([np.log(2.0), -np.log(2.0)], 0.0)
        assert np.allclose(p, [1.0 / 3.0] * 3, atol=1e-12)

    def test_large_shift_concentrates_on_top_state(self):
        p = invert_global_logit([np.log(2.0), -np.log(2.0)], 60.0)
        assert np.allclose(p, [0.0, 0.0, 1.0], atol=1e-12)

    def test_rejects_non_decreasing_thresholds(self):
        with pytest.raises(ValidationError):
            invert_global_logit([0.0, 0.0], 0.0)

    def test_single_state(self):
        assert np.allclose(invert_global_logit([], 12.3), [1.0])


class TestChainLawLogits:
    def test_even_split_gives_zero(self):
        law = build_chain_law([0.0], [], [[0.0], [0.0]], [])
        assert np.allclose(chain_law_logits(law, 0), [0.0])

    def test_thirds_give_log_two(self):
        p = np.array([1.0, 1.0, 1.0]) / 3.0
        assert np.allclose(cumulative_logits(p), [np.log(2.0), -np.log(2.0)])

    def test_degenerate_row_signals_unbounded(self):
        with pytest.raises(UnboundedLogitError):
            cumulative_logits(np.array([1.0, 0.0]))


class TestBuildChainLaw:
    def test_single_upper_class_has_no_shift(self):
        law = build_chain_law([0.3], [], [[-0.2], [0.4]], [])
        assert law.delta.shape == (1, 2)
        assert np.allclose(law.delta.sum(axis=1), 1.0)

    def test_shift_is_constant_across_thresholds(self):
        # cumulative logits of class 2 minus class 1 recover psi at every g
        rng = np.random.default_rng(5)
        for _ in range(20):
            params = random_params(4, 1, 2, 0, 0, rng)
            law = params.chain_law()
            shift = (chain_law_logits(law, 1) - chain_law_logits(law, 0))
            assert np.allclose(shift, params.eta0_psi[0], atol=1e-9)
            for row in range(4):
                shift_q = (chain_law_logits(law, 1, row) - chain_law_logits(law, 0, row))
                assert np.allclose(shift_q, params.eta1_psi[0], atol=1e-9)

    def test_single_state_law_is_trivial(self):
        law = build_chain_law([], [0.7], np.zeros((1, 0)), [0.7])
        assert np.allclose(law.delta, 1.0)
        assert np.allclose(law.Q, 1.0)

    def test_rows_are_simplexes_over_random_sweep(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            G = int(rng.integers(2, 6))
            H = int(rng.integers(1, 4))
            params = random_params(G, 1, H, 0, 0, rng)
            law = params.chain_law()
            assert np.all(law.delta >= 0.0) and np.all(law.delta <= 1.0)
            assert np.all(np.abs(law.delta.sum(axis=1) - 1.0) < 1e-12)
            assert np.all(np.abs(law.Q.sum(axis=2) - 1.0) < 1e-12)

    def test_round_trip_recovers_thresholds_and_shifts(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            G = int(rng.integers(2, 5))
            H = int(rng.integers(1, 4))
            params = random_params(G, 1, H, 0, 0, rng)
            law = params.chain_law()
            alpha0 = chain_law_logits(law, 0)
            assert np.allclose(alpha0, params.eta0_alpha, atol=1e-10)
            for h in range(1, H):
                psi = chain_law_logits(law, h) - alpha0
                assert np.allclose(psi, params.eta0_psi[h - 1], atol=1e-9)

    def test_increasing_shift_is_stochastically_increasing(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            G = int(rng.integers(2, 6))
            alphas = np.sort(rng.normal(0, 1, G - 1))[::-1] - 0.3 * np.arange(G - 1)
            lo, hi = sorted(rng.normal(0.0, 1.0, 2))
            p_lo = invert_global_logit(alphas, lo)
            p_hi = invert_global_logit(alphas, hi + 1e-6)
            surv_lo = p_lo[::-1].cumsum()[::-1]
            surv_hi = p_hi[::-1].cumsum()[::-1]
            assert np.all(surv_hi[1:] >= surv_lo[1:] - 1e-15)


class TestFreeForm:
    def test_pack_unpack_decreasing_round_trip(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            size = int(rng.integers(0, 6))
            vec = np.sort(rng.normal(0, 2, size))[::-1] - 0.2 * np.arange(size)
            assert np.allclose(unpack_decreasing(pack_decreasing(vec)), vec, atol=1e-12)

    def test_eta_block_lengths(self):
        rng = np.random.default_rng(10)
        for G in (1, 2, 4):
            for H in (1, 2, 3):
                params = random_params(G, 1, H, 0, 0, rng)
                v0 = pack_eta0(params.eta0_alpha, params.eta0_psi)
                v1 = pack_eta1(params.eta1_alpha, params.eta1_psi)
                assert v0.size == (G - 1) + (H - 1)
                assert v1.size == G * (G - 1) + (H - 1)
                a0, p0 = unpack_eta0(v0, G, H)
                a1, p1 = unpack_eta1(v1, G, H)
                assert np.allclose(a0, params.eta0_alpha)
                assert np.allclose(p0, params.eta0_psi)
                assert np.allclose(a1, params.eta1_alpha)
                assert np.allclose(p1, params.eta1_psi)
