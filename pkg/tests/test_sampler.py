import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import chisquare

from patchsynth.errors import ConfigurationError, NumericalError
from patchsynth.sampler import (
    PosteriorParams,
    draw_index,
    inverse_cdf,
    normalize_log_weights,
    posterior_weights,
    posterior_weights_from_distances,
    stream,
)

logw = arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50))


def test_single_candidate_gets_all_mass():
    np.testing.assert_array_equal(posterior_weights_from_distances([3.0], [7.0], PosteriorParams(h=0.1, rho=2)), [1.0])


def test_equal_distances_split_evenly():
    np.testing.assert_array_equal(posterior_weights_from_distances([2.0, 2.0], [0, 0], PosteriorParams(h=1)), [0.5, 0.5])


def test_unit_gap_gives_logistic_split():
    w = posterior_weights_from_distances([0.0, 1.0], [0.0, 0.0], PosteriorParams(h=1.0))
    np.testing.assert_allclose(w, [0.7310585786300049, 0.2689414213699951], rtol=0, atol=1e-15)


def test_hr_term_uses_half_rho():
    w = posterior_weights_from_distances([0.0, 0.0], [0.0, 2.0], PosteriorParams(h=1.0, rho=1.0))
    np.testing.assert_allclose(w, [0.7310585786300049, 0.2689414213699951], atol=1e-15)


def test_posterior_from_vectors():
    lr = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    hr = np.zeros((3, 4))
    w = posterior_weights(lr, hr, [0.0, 0.0], np.zeros(4), PosteriorParams(h=1.0))
    expect = np.exp([0.0, -1.0, -9.0])
    np.testing.assert_allclose(w, expect / expect.sum(), atol=1e-15)


def test_cold_limit_is_nearest_neighbour():
    w = posterior_weights_from_distances([0.3, 0.1, 0.2], [0, 0, 0], PosteriorParams(h=1e-12))
    np.testing.assert_array_equal(w, [0.0, 1.0, 0.0])


def test_hot_limit_is_uniform():
    w = posterior_weights_from_distances([0.3, 10.0, 0.2, 5.0], [0] * 4, PosteriorParams(h=1e12))
    np.testing.assert_allclose(w, 0.25, atol=1e-10)


@given(logw, st.sampled_from([-700.0, -1.5, 0.0, 3.25, 700.0]))
def test_softmax_is_shift_invariant(v, c):
    np.testing.assert_allclose(normalize_log_weights(v + c), normalize_log_weights(v), atol=1e-12)


@given(logw)
def test_weights_form_a_distribution(v):
    w = normalize_log_weights(v)
    assert np.all(w >= 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


@given(arrays(np.float64, 6, elements=st.floats(0, 40)), st.floats(0.05, 20))
def test_closer_lr_means_more_weight(d, h):
    w = posterior_weights_from_distances(d, np.zeros(6), PosteriorParams(h=h))
    order = np.argsort(d, kind="stable")
    assert np.all(np.diff(w[order]) <= 1e-15)


def test_all_minus_infinity_is_an_error():
    with pytest.raises(NumericalError):
        normalize_log_weights([-np.inf, -np.inf])


@pytest.mark.parametrize("kw", [dict(h=0.0), dict(h=1.0, rho=-1.0), dict(h=1.0, k=0)])
def test_bad_parameters(kw):
    with pytest.raises(ConfigurationError):
        PosteriorParams(**kw)


def test_inverse_cdf_boundaries():
    w = np.array([0.25, 0.25, 0.5])
    assert list(inverse_cdf(w, np.array([0.0, 0.2499, 0.25, 0.5, 0.9999]))) == [0, 0, 1, 2, 2]


def test_sample_frequencies_follow_the_posterior():
    d = np.linspace(0.0, 1.4, 8)
    w = posterior_weights_from_distances(d, np.zeros(8), PosteriorParams(h=0.5))
    n = 100_000
    u = stream(99, 1).random(n)
    counts = np.bincount(inverse_cdf(np.broadcast_to(w, (n, 8)), u), minlength=8)
    assert chisquare(counts, w * n).pvalue > 1e-3


def test_streams_are_deterministic_and_keyed():
    assert stream(42, 0, 1, 2, 3).random() == stream(42, 0, 1, 2, 3).random()
    assert stream(42, 0, 1, 2, 3).random() != stream(42, 0, 1, 3, 2).random()
    assert stream(42, 1).random() != stream(43, 1).random()
    w = np.full(5, 0.2)
    assert draw_index(w, stream(1, 2)) == draw_index(w, stream(1, 2))
