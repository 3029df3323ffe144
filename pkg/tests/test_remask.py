from __future__ import annotations

import math

import pytest
from hypothesis import given, strategies as st

from rdd import TokenBuffer, UsageError, apply_remask, remask_probability, remask_stream
from rdd.remask import apply_random_remask

MASK = 9


def committed(total, prompt, conf):
    b = TokenBuffer.fresh([1] * prompt, total, MASK)
    for i in range(prompt, total):
        b.commit(i, 2, conf)
    return b


class TestRemaskProbability:
    def test_certain_tokens_never_remasked(self):
        for lam in (0.5, 1.0, 2.0, 7.3):
            assert remask_probability(1.0, lam) == 0.0

    def test_lambda_one_is_complement(self):
        assert abs(remask_probability(0.5, 1.0) - 0.5) <= 1e-12

    def test_square_law(self):
        assert abs(remask_probability(0.8, 2.0) - (1 - 0.8 ** 2)) <= 1e-12
        assert abs(remask_probability(0.8, 2.0) - 0.36) <= 1e-12

    def test_trap_scenario_contrast(self):
        # decoy committed at 0.62 vs truthful neighbours at 0.95
        assert abs(remask_probability(0.62, 1.0) - 0.38) <= 1e-12
        assert abs(remask_probability(0.95, 1.0) - 0.05) <= 1e-12

    def test_rejects_nonpositive_confidence(self):
        with pytest.raises(UsageError):
            remask_probability(0.0, 1.0)
        with pytest.raises(UsageError):
            remask_probability(-0.3, 1.0)
        with pytest.raises(UsageError):
            remask_probability(0.5, 0.0)

    @given(
        lo=st.floats(0.01, 0.98),
        delta=st.floats(0.01, 0.5),
        lam=st.floats(0.1, 8.0),
    )
    def test_strictly_monotone_in_uncertainty(self, lo, delta, lam):
        hi = min(1.0, lo + delta)
        assert remask_probability(lo, lam) > remask_probability(hi, lam)


class TestApplyRemask:
    def test_full_confidence_region_untouched(self):
        b = committed(96, 32, 1.0)
        hits = apply_remask(b, (32, 64), 1.0, remask_stream(0))
        assert hits == []
        assert all(not b.is_masked(i) for i in range(96))

    def test_monte_carlo_frequency(self):
        # binomial concentration: 10k draws at p_conf 0.7, lambda 1
        b = committed(10_032, 32, 0.7)
        hits = apply_remask(b, (32, 10_032), 1.0, remask_stream(11))
        frac = len(hits) / 10_000
        assert abs(frac - 0.30) < 0.02

    def test_region_bounds_respected(self):
        b = committed(128, 32, 0.2)
        hits = apply_remask(b, (64, 96), 1.0, remask_stream(3))
        assert hits and all(64 <= i < 96 for i in hits)
        assert all(not b.is_masked(i) for i in range(32, 64))
        assert all(not b.is_masked(i) for i in range(96, 128))

    def test_prompt_overlap_rejected(self):
        b = committed(96, 32, 0.5)
        with pytest.raises(UsageError):
            apply_remask(b, (16, 64), 1.0, remask_stream(0))

    def test_deterministic_given_seed(self):
        b1 = committed(96, 32, 0.4)
        b2 = committed(96, 32, 0.4)
        h1 = apply_remask(b1, (32, 96), 1.0, remask_stream(9))
        h2 = apply_remask(b2, (32, 96), 1.0, remask_stream(9))
        assert h1 == h2
        assert b1.tokens == b2.tokens

    def test_masked_holes_skipped_without_consuming_draws(self):
        # oracle: replay the stream by hand over the committed subset
        b = committed(72, 32, 0.5)
        b.remask_position(40)
        b.remask_position(41)
        hits = apply_remask(b, (32, 72), 1.0, remask_stream(21))
        committed_positions = [i for i in range(32, 72) if i not in (40, 41)]
        u = remask_stream(21).random(len(committed_positions))
        expected = [i for i, x in zip(committed_positions, u) if x < 0.5]
        assert hits == expected

    def test_remasked_positions_lose_confidence(self):
        b = committed(96, 32, 0.05)
        hits = apply_remask(b, (32, 96), 1.0, remask_stream(1))
        assert hits
        for i in hits:
            assert b.is_masked(i)
            assert b.commit_confidence[i] is None


class TestRandomRemaskBaseline:
    def test_fixed_count(self):
        b = committed(96, 32, 0.99)
        hits = apply_random_remask(b, (32, 64), 0.25, 32, remask_stream(2))
        assert len(hits) == math.ceil(0.25 * 32)

    def test_zero_ratio_is_noop(self):
        b = committed(96, 32, 0.2)
        assert apply_random_remask(b, (32, 64), 0.0, 32, remask_stream(2)) == []

    def test_ratio_validated(self):
        b = committed(96, 32, 0.5)
        with pytest.raises(UsageError):
            apply_random_remask(b, (32, 64), 1.5, 32, remask_stream(0))
