import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perk.errors import ConfigError, DataError
from perk.priors import (
    BROAD_T1,
    BROAD_T2,
    ClippedKde,
    LogUniform,
    PriorSpec,
    Uniform,
    distribution_from_dict,
    fit_kde,
    m0_support_from_data,
    paper_default_priors,
)


def _ks_uniform(u):
    u = np.sort(u)
    n = u.size
    grid = np.arange(1, n + 1) / n
    return max(np.max(grid - u), np.max(u - (grid - 1 / n)))


def test_uniform_mean(rng):
    assert 0.49 <= Uniform(0, 1).sample(100_000, rng).mean() <= 0.51


def test_loguniform_log_is_uniform(rng):
    x = LogUniform(400, 2000).sample(100_000, rng)
    u = (np.log(x) - np.log(400)) / (np.log(2000) - np.log(400))
    assert _ks_uniform(u) < 0.01


def test_loguniform_matches_exp_of_uniform():
    a = LogUniform(40, 200).sample(100_000, np.random.default_rng(1))
    b = np.exp(np.random.default_rng(2).uniform(np.log(40), np.log(200), 100_000))
    grid = np.geomspace(40, 200, 400)
    fa = np.searchsorted(np.sort(a), grid) / a.size
    fb = np.searchsorted(np.sort(b), grid) / b.size
    assert np.max(np.abs(fa - fb)) < 0.01


def test_kde_clipped(rng):
    kde = fit_kde(rng.normal(1.0, 0.5, 2000), (0.5, 2.0))
    s = kde.sample(50_000, rng)
    assert s.min() >= 0.5 and s.max() <= 2.0


def test_kde_point_mass():
    with pytest.warns(UserWarning):
        kde = fit_kde(np.ones(50), (0.5, 2.0))
    assert kde.bandwidth == 0
    np.testing.assert_array_equal(kde.sample(10, np.random.default_rng(0)), np.ones(10))


def test_kde_resampled_mean(rng):
    kde = fit_kde(rng.uniform(0.8, 1.2, 10_000), (0.5, 2.0))
    assert abs(kde.sample(100_000, rng).mean() - 1.0) < 0.01


def test_kde_silverman_bandwidth():
    x = np.array([0.8, 0.9, 1.0, 1.1, 1.2])
    assert fit_kde(x).bandwidth == pytest.approx(1.06 * np.std(x, ddof=1) * 5 ** -0.2)


def test_kde_empty():
    with pytest.raises(DataError):
        fit_kde([])


def test_sample_count_checked(rng):
    with pytest.raises(DataError):
        Uniform(0, 1).sample(0, rng)


def test_m0_support():
    u = m0_support_from_data([0.2, 1.0, 0.5])
    assert u.lo == 2.2e-16 and u.hi == pytest.approx(6.67)
    assert m0_support_from_data([0.15]).hi == pytest.approx(1.0005)
    with pytest.raises(DataError):
        m0_support_from_data([])
    with pytest.raises(DataError):
        m0_support_from_data([0.0, 0.0])


def test_paper_default_priors():
    p = paper_default_priors([0.1, 0.2], np.full(10, 1.0) + np.linspace(-0.1, 0.1, 10))
    assert p.t1.support == (400.0, 2000.0) and p.t2.support == (40.0, 200.0)
    assert p.kappa.support == (0.5, 2.0)
    b = paper_default_priors([0.1, 0.2], np.linspace(0.9, 1.1, 10), broad=True)
    assert b.t1.support == pytest.approx((10**1.5, 10**3.5)) and b.t2.support == pytest.approx((10**0.5, 10**3.5))
    assert BROAD_T1 == b.t1.support and BROAD_T2 == b.t2.support


def test_constant_kappa_map_point_mass():
    with pytest.warns(UserWarning):
        p = paper_default_priors([0.3], np.ones((4, 4)))
    x, k = p.sample(100, np.random.default_rng(0))
    np.testing.assert_array_equal(k, 1.0)
    assert x.shape == (3, 100)


def test_prior_dict_roundtrip(rng):
    p = paper_default_priors([0.1, 0.5], rng.uniform(0.8, 1.2, 20))
    q = PriorSpec.from_dict(p.to_dict())
    a, ka = p.sample(50, np.random.default_rng(4))
    b, kb = q.sample(50, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ka, kb)


def test_prior_dict_errors():
    with pytest.raises(ConfigError, match="priors.t1"):
        PriorSpec.from_dict({"m0": {"kind": "uniform", "lo": 0, "hi": 1}, "t1": {"kind": "nope"},
                             "t2": {"kind": "uniform", "lo": 1, "hi": 2}, "kappa": {"kind": "uniform", "lo": 1, "hi": 2}})
    with pytest.raises(ConfigError, match="missing key 'hi'"):
        distribution_from_dict({"kind": "uniform", "lo": 0})


def test_invalid_distributions():
    with pytest.raises(DataError):
        Uniform(1, 1)
    with pytest.raises(DataError):
        LogUniform(0, 1)
    with pytest.raises(DataError):
        ClippedKde(np.array([1.0]), -1.0, 0.5, 2.0)


dists = st.one_of(
    st.tuples(st.floats(-100, 100), st.floats(1e-3, 100)).map(lambda t: Uniform(t[0], t[0] + t[1])),
    st.tuples(st.floats(1e-3, 100), st.floats(1.01, 1e3)).map(lambda t: LogUniform(t[0], t[0] * t[1])),
    st.tuples(st.floats(0.6, 1.9), st.floats(1e-3, 0.5)).map(lambda t: ClippedKde(np.array([t[0]]), t[1], 0.5, 2.0)),
)


@settings(max_examples=100)
@given(dists, st.integers(1, 500), st.integers(0, 2**32 - 1))
def test_samples_stay_in_support(d, n, seed):
    s = d.sample(n, np.random.default_rng(seed))
    lo, hi = d.support
    assert s.shape == (n,)
    assert np.all((s >= lo) & (s <= hi))
