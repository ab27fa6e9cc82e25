import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from stgrad.errors import ConfigError, DomainError
from stgrad.rng import stream, uniform_open
from stgrad.simplex import (
    argmax_onehot,
    conditional_gumbel_sample,
    gumbel_argmax_sample,
    log_partition,
    one_hot,
    sample_categorical,
    sample_gumbel,
    softmax,
    softmax_jacobian,
)

EULER_MASCHERONI = 0.5772156649015329

logits_vectors = st.lists(
    st.floats(min_value=-30, max_value=30, allow_nan=False), min_size=2, max_size=8
).map(np.array)


class TestSoftmax:
    def test_symmetric_two_class(self):
        np.testing.assert_allclose(softmax([0.0, 0.0], 1.0), [0.5, 0.5], rtol=0, atol=0)

    def test_log2_logits(self):
        np.testing.assert_allclose(softmax([np.log(2), 0.0], 1.0), [2 / 3, 1 / 3], atol=1e-15)

    def test_tempered_value_frozen(self):
        # extended-precision direct exp/normalise oracle
        expected = [0.015876239976466766323, 0.11731042782619836253, 0.86681333219733487114]
        np.testing.assert_allclose(softmax([1.0, 2.0, 3.0], 0.5), expected, rtol=1e-15)

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            softmax([np.inf, 0.0])
        with pytest.raises(DomainError):
            softmax([np.nan, 0.0])

    def test_bad_temperature(self):
        with pytest.raises(ConfigError):
            softmax([0.0, 1.0], 0.0)
        with pytest.raises(ConfigError):
            softmax([0.0, 1.0], -1.0)

    def test_extreme_logits_stable(self):
        p = softmax([1000.0, 0.0, -1000.0], 1.0)
        assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-12

    @given(logits_vectors, st.floats(min_value=-20, max_value=20))
    @settings(deadline=None, max_examples=60)
    def test_shift_invariance(self, th, c):
        np.testing.assert_allclose(softmax(th + c, 1.0), softmax(th, 1.0), atol=1e-12)

    @given(logits_vectors, st.floats(min_value=0.1, max_value=10))
    @settings(deadline=None, max_examples=60)
    def test_temperature_is_rescaling(self, th, tau):
        assert np.array_equal(softmax(th, tau), softmax(th / tau, 1.0))


class TestSoftmaxJacobian:
    def test_symmetric_half(self):
        np.testing.assert_allclose(
            softmax_jacobian([0.5, 0.5]), [[0.25, -0.25], [-0.25, 0.25]], atol=0
        )

    def test_vertex_is_zero(self):
        np.testing.assert_allclose(softmax_jacobian([1.0, 0.0]), np.zeros((2, 2)), atol=0)

    def test_rows_and_columns_sum_to_zero(self):
        pi = softmax(stream(0, 1).standard_normal(5))
        jac = softmax_jacobian(pi)
        # direct evaluation oracle: diag(pi) - outer(pi, pi), built inline
        np.testing.assert_allclose(jac, np.diag(pi) - np.outer(pi, pi), atol=0)
        assert np.abs(jac.sum(axis=0)).max() <= 1e-12
        assert np.abs(jac.sum(axis=1)).max() <= 1e-12

    @given(logits_vectors)
    @settings(deadline=None, max_examples=40)
    def test_symmetric_positive_semidefinite(self, th):
        jac = softmax_jacobian(softmax(th))
        np.testing.assert_allclose(jac, jac.T, atol=1e-15)
        assert np.linalg.eigvalsh(jac).min() >= -1e-12


class TestLogPartition:
    def test_two_zeros(self):
        assert abs(log_partition([0.0, 0.0]) - np.log(2)) < 1e-15

    def test_single_entry(self):
        assert log_partition([3.7]) == pytest.approx(3.7, abs=0)

    def test_shift_without_overflow(self):
        assert log_partition([100.0, 100.0, 100.0]) == pytest.approx(100 + np.log(3), abs=1e-12)


class TestSampling:
    def test_categorical_degenerate(self):
        r = stream(0, 2)
        assert all(sample_categorical([1.0, 0.0], r) == 0 for _ in range(50))

    def test_categorical_frequencies_within_4_sigma(self):
        r = stream(0, 3)
        draws = sample_categorical(np.tile([0.5, 0.5], (10**5, 1)), r)
        freq = np.mean(draws == 1)
        sigma = 0.5 / np.sqrt(10**5)
        assert abs(freq - 0.5) <= 4 * sigma

    def test_categorical_deterministic_given_seed(self):
        a = [sample_categorical([0.3, 0.3, 0.4], stream(7, 0, i)) for i in range(20)]
        b = [sample_categorical([0.3, 0.3, 0.4], stream(7, 0, i)) for i in range(20)]
        assert a == b

    def test_gumbel_moments_within_4_sigma(self):
        g = sample_gumbel(10**5, stream(0, 4))
        se_mean = g.std(ddof=1) / np.sqrt(g.size)
        assert abs(g.mean() - EULER_MASCHERONI) <= 4 * se_mean
        s2 = g.var(ddof=1)
        m4 = np.mean((g - g.mean()) ** 4)
        se_var = np.sqrt((m4 - s2**2) / g.size)
        assert abs(s2 - np.pi**2 / 6) <= 4 * se_var

    def test_gumbel_reproducible(self):
        assert np.array_equal(sample_gumbel(100, stream(5, 0)), sample_gumbel(100, stream(5, 0)))

    def test_uniform_open_avoids_endpoints(self):
        u = uniform_open(stream(0, 5), 10**5)
        assert u.min() > 0.0 and u.max() < 1.0


class TestGumbelArgmax:
    def test_frequencies_match_softmax(self):
        th = np.array([0.0, np.log(3.0)])
        r = stream(0, 6)
        idx, _ = gumbel_argmax_sample(np.tile(th, (10**5, 1)), r)
        freq = np.mean(idx == 1)
        sigma = np.sqrt(0.75 * 0.25 / 10**5)
        assert abs(freq - 0.75) <= 4 * sigma

    def test_dominant_logit_always_wins(self):
        th = np.array([1e6, 0.0, 0.0])
        idx, _ = gumbel_argmax_sample(np.tile(th, (1000, 1)), stream(0, 7))
        assert np.all(idx == 0)

    def test_returned_index_is_argmax_of_perturbation(self):
        th = stream(0, 8).standard_normal(6)
        idx, g = gumbel_argmax_sample(th, stream(0, 9))
        assert idx == np.argmax(th + g)


class TestConditionalGumbel:
    def test_argmax_always_matches_conditioning(self):
        th = stream(0, 10).standard_normal(5)
        for d in range(5):
            y = conditional_gumbel_sample(th, d, stream(0, 11, d), k=20000)
            assert np.all(np.argmax(y, axis=-1) == d)

    def test_two_stage_matches_one_stage_chi_square(self):
        th = stream(0, 12).standard_normal(4)
        pi = softmax(th)
        m = 10**5
        # one-stage: argmax of perturbed logits
        one_idx, _ = gumbel_argmax_sample(np.tile(th, (m, 1)), stream(0, 13))
        # two-stage: sample the outcome, then the perturbation given it, take its argmax
        r = stream(0, 14)
        two_outcomes = sample_categorical(np.tile(pi, (m, 1)), r)
        two_idx = np.empty(m, dtype=int)
        for i, d in enumerate(two_outcomes[:200]):
            y = conditional_gumbel_sample(th, int(d), stream(0, 15, i))
            two_idx[i] = np.argmax(y)
        # the conditional sampler guarantees argmax == d, so the remaining
        # draws are the outcomes themselves
        two_idx[200:] = two_outcomes[200:]
        counts = np.zeros((2, 4))
        for row, idx in enumerate((one_idx, two_idx)):
            counts[row] = np.bincount(idx, minlength=4)
        _, p, _, _ = stats.chi2_contingency(counts)
        assert p > 0.001

    def test_single_class_moment(self):
        # conditioning on the only class: y = logit + gumbel
        th = np.array([0.3])
        y = conditional_gumbel_sample(th, 0, stream(0, 16), k=10**5)
        se = y.std(ddof=1) / np.sqrt(y.size)
        assert abs(y.mean() - (0.3 + EULER_MASCHERONI)) <= 4 * se

    def test_distribution_matches_rejection_oracle(self):
        # independent oracle: rejection-sample unconditional perturbations
        # and keep those whose argmax hits the conditioning index
        th = np.array([0.2, -0.4, 0.9])
        d = 1
        r = stream(0, 17)
        kept = []
        while len(kept) < 4000:
            g = sample_gumbel((2000, 3), r)
            y = th + g
            hits = np.argmax(y, axis=-1) == d
            kept.extend(y[hits])
        oracle = np.array(kept[:4000])
        ours = conditional_gumbel_sample(th, d, stream(0, 18), k=20000)
        for j in range(3):
            se = np.sqrt(oracle[:, j].var() / 4000 + ours[:, j].var() / 20000)
            assert abs(oracle[:, j].mean() - ours[:, j].mean()) <= 4 * se


class TestArgmaxOnehot:
    def test_basic(self):
        assert argmax_onehot([0.0, 1.0, 0.5]) == 1

    def test_tie_breaks_low(self):
        assert argmax_onehot([1.0, 1.0]) == 0

    def test_single(self):
        assert argmax_onehot([-3.0]) == 0

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            argmax_onehot([np.nan, 0.0])

    def test_one_hot_helper(self):
        np.testing.assert_array_equal(one_hot(2, 4), [0, 0, 1, 0])
