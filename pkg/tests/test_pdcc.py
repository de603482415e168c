import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from guidevae.pdcc import (
    PatternDictionary,
    compose_covariance,
    construct_from_spd,
    normalize_dictionary,
    overparameterized,
    pdcc_logdet_woodbury,
    pdcc_logpdf,
    pdcc_logpdf_grad,
    pdcc_logpdf_woodbury,
    pdcc_sample,
    spectrum,
)

from conftest import random_dictionary, random_spd

sizes = st.tuples(st.integers(1, 8), st.integers(0, 16), st.integers(0, 2**31 - 1))


def _instance(T, V, seed):
    rng = np.random.default_rng(seed)
    U = random_dictionary(rng, T, V)
    s = rng.uniform(0, 2, V)
    xi = 10 ** rng.uniform(-3, 0)
    return rng, U, s, xi


def test_scalar_case_matches_univariate_normal():
    # T=1, V=1: variance s^2 + xi
    x, mu, s, xi = 1.3, 0.2, 0.7, 0.1
    expected = -0.5 * np.log(2 * np.pi * (s**2 + xi)) - 0.5 * (x - mu) ** 2 / (s**2 + xi)
    got = pdcc_logpdf([x], [mu], np.ones((1, 1)), [s], xi)
    assert got == pytest.approx(expected, rel=1e-14)


def test_no_patterns_is_isotropic():
    rng = np.random.default_rng(0)
    x, mu = rng.standard_normal(5), rng.standard_normal(5)
    got = pdcc_logpdf(x, mu, np.zeros((5, 0)), np.zeros(0), 0.3)
    expected = multivariate_normal(mu, 0.3 * np.eye(5)).logpdf(x)
    assert got == pytest.approx(expected, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(sizes)
def test_logpdf_matches_dense_oracle(args):
    T, V, seed = args
    rng, U, s, xi = _instance(T, V, seed)
    x, mu = rng.standard_normal(T), rng.standard_normal(T)
    oracle = multivariate_normal(mu, U @ np.diag(s**2) @ U.T + xi * np.eye(T)).logpdf(x)
    assert pdcc_logpdf(x, mu, U, s, xi) == pytest.approx(oracle, rel=1e-9, abs=1e-9)
    assert pdcc_logpdf_woodbury(x, mu, U, s, xi) == pytest.approx(oracle, rel=1e-8, abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(sizes)
def test_woodbury_logdet(args):
    T, V, seed = args
    _, U, s, xi = _instance(T, V, seed)
    sign, dense = np.linalg.slogdet(compose_covariance(U, s, xi))
    assert sign == 1
    assert pdcc_logdet_woodbury(U, s, xi) == pytest.approx(dense, rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(sizes)
def test_spectrum_floor(args):
    T, V, seed = args
    _, U, s, xi = _instance(T, V, seed)
    eig = spectrum(compose_covariance(U, s, xi))
    assert eig[-1] >= xi - 1e-9
    assert np.all(np.diff(eig) <= 0)


def test_spectrum_rejects_asymmetric():
    with pytest.raises(ValueError):
        spectrum(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_zero_aux_std_reduces_to_base_variance():
    rng = np.random.default_rng(2)
    U = random_dictionary(rng, 4, 6)
    np.testing.assert_array_equal(compose_covariance(U, np.zeros(6), 0.2), 0.2 * np.eye(4))


def test_rejects_negative_or_mismatched_scales():
    U = random_dictionary(np.random.default_rng(0), 3, 2)
    with pytest.raises(ValueError):
        compose_covariance(U, np.array([1.0, -0.1]), 0.1)
    with pytest.raises(ValueError):
        compose_covariance(U, np.ones(3), 0.1)
    with pytest.raises(ValueError):
        pdcc_logpdf(np.array([np.nan, 0, 0]), np.zeros(3), U, np.ones(2), 0.1)


def test_normalize_dictionary():
    raw = np.array([[3.0, 0.0], [4.0, -2.0]])
    np.testing.assert_allclose(normalize_dictionary(raw), [[0.6, 0.0], [0.8, -1.0]])
    with pytest.raises(ValueError, match="zero column"):
        normalize_dictionary(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_pattern_dictionary_checks_and_roundtrip(tmp_path):
    U = random_dictionary(np.random.default_rng(5), 4, 3)
    with pytest.raises(ValueError):
        PatternDictionary(2 * U, 0.1)
    with pytest.raises(ValueError):
        PatternDictionary(U, 0.0)
    d = PatternDictionary(U, 0.01, 1e-4)
    d.save(tmp_path)
    back = PatternDictionary.load(tmp_path)
    np.testing.assert_array_equal(back.U, U)
    assert (back.xi, back.eps) == (0.01, 1e-4)
    l1 = np.abs(d.sorted_by_l1()).sum(0)
    assert np.all(np.diff(l1) >= 0)


def test_overparameterized_threshold():
    # full-size setting: T=24, V=100 is far above the 300 Cholesky entries
    assert overparameterized(24, 100)
    assert not overparameterized(24, 10)
    assert not overparameterized(3, 1)
    assert overparameterized(3, 2)


def test_sample_covariance_matches_composition():
    rng = np.random.default_rng(11)
    U = random_dictionary(rng, 3, 5)
    s, xi, mu = rng.uniform(0.2, 1.0, 5), 0.05, np.array([1.0, -1.0, 0.5])
    draws = pdcc_sample(mu, U, s, xi, rng, size=200_000)
    np.testing.assert_allclose(draws.mean(0), mu, atol=0.01)
    np.testing.assert_allclose(np.cov(draws.T), compose_covariance(U, s, xi), atol=0.02)
    assert pdcc_sample(mu, U, s, xi, rng).shape == (3,)


# -- construction from an arbitrary SPD matrix --------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_construct_from_spd_roundtrip(T, extra, seed):
    rng = np.random.default_rng(seed)
    M = random_spd(rng, T)
    xi = 0.5 * np.linalg.eigvalsh(M)[0]
    U, s = construct_from_spd(M, xi, T + extra)
    assert U.shape == (T, T + extra)
    np.testing.assert_allclose(np.linalg.norm(U, axis=0), 1.0, atol=1e-12)
    assert np.all(s >= 0)
    assert np.linalg.norm(compose_covariance(U, s, xi) - M) <= 1e-8 * max(1.0, np.linalg.norm(M))


def test_construct_with_rotation_is_also_exact():
    rng = np.random.default_rng(3)
    M = random_spd(rng, 4)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    xi = 0.3 * np.linalg.eigvalsh(M)[0]
    U, s = construct_from_spd(M, xi, 6, rotation=Q)
    np.testing.assert_allclose(compose_covariance(U, s, xi), M, atol=1e-10)


def test_construct_preconditions():
    M = np.diag([2.0, 1.0])
    with pytest.raises(ValueError, match="smallest eigenvalue"):
        construct_from_spd(M, 1.0, 3)
    with pytest.raises(ValueError, match="smallest eigenvalue"):
        construct_from_spd(M, 1.5, 3)
    with pytest.raises(ValueError, match="at least"):
        construct_from_spd(M, 0.5, 1)
    with pytest.raises(ValueError, match="orthogonal"):
        construct_from_spd(M, 0.5, 2, rotation=2 * np.eye(2))


# -- gradients ----------------------------------------------------------------


def _fd(f, p, h=1e-6):
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        up, down = p.copy(), p.copy()
        up[idx] += h
        down[idx] -= h
        g[idx] = (f(up) - f(down)) / (2 * h)
    return g


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_gradients_match_finite_differences(T, V, seed):
    rng = np.random.default_rng(seed)
    U = random_dictionary(rng, T, V)
    s = rng.uniform(0.3, 1.5, V)
    xi = rng.uniform(0.05, 0.5)
    x, mu = rng.standard_normal(T), rng.standard_normal(T)
    g = pdcc_logpdf_grad(x, mu, U, s, xi)
    np.testing.assert_allclose(g.mu, _fd(lambda m: pdcc_logpdf(x, m, U, s, xi), mu), rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(g.aux_std, _fd(lambda a: pdcc_logpdf(x, mu, U, a, xi), s), rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(g.U, _fd(lambda W: pdcc_logpdf(x, mu, W, s, xi), U), rtol=1e-4, atol=1e-6)
