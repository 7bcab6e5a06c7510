import datetime as dt
import math
import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from epistate import filtering
from epistate.core import (Country, ModelParams, NumericalError, PolicyCalendar,
                           PolicyMultipliers, date_range)
from epistate.dynamics import beta_cov
from epistate.filtering import (BlockOperator, GaussianBelief, LinearTransition, bf_smooth,
                                initial_belief, kalman_filter, predict, predict_with,
                                rts_smooth, run_filter, update)
from epistate.mobility import EffectiveMobility, MobilitySpec

from cases import sird_linearization
from oracles import dense_smoother

P = ModelParams()
START = dt.date(2020, 2, 12)


def quiet(fn, *args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fn(*args, **kw)


def random_linear(n, m, t, rng):
    f = np.eye(n) + 0.1 * rng.standard_normal((n, n))
    a = rng.standard_normal((n, n))
    q = 0.1 * a @ a.T + 0.01 * np.eye(n)
    b = rng.standard_normal((n, n))
    p0 = b @ b.T + np.eye(n)
    m0 = rng.standard_normal(n)
    obs = np.arange(m)
    x = rng.multivariate_normal(m0, p0)
    ys = []
    for _ in range(t):
        ys.append(x[obs] + 0.3 * rng.standard_normal(m))
        x = rng.multivariate_normal(f @ x, q)
    return f, q, obs, m0, p0, np.array(ys)


# -- single steps ---------------------------------------------------------------

def test_update_matches_scalar_kalman(rng):
    a = rng.standard_normal((5, 5))
    prior = GaussianBelief(rng.uniform(0, 1e3, 5), a @ a.T * 50)
    obs, sd = prior.mean[0] + 3.7, 0.7
    post, ll = update(prior, [obs], sd)
    # scalar oracle, one observed coordinate
    p, x = prior.cov, prior.mean
    s = p[0, 0] + sd * sd
    innov = obs - x[0]
    mean = [x[j] + p[j, 0] / s * innov for j in range(5)]
    cov = [[p[i, j] - p[i, 0] * p[0, j] / s for j in range(5)] for i in range(5)]
    ref_ll = -0.5 * (math.log(2 * math.pi * s) + innov * innov / s)
    np.testing.assert_allclose(post.mean, mean, rtol=1e-12)
    np.testing.assert_allclose(post.cov, cov, rtol=1e-12, atol=1e-12 * np.abs(p).max())
    assert ll == pytest.approx(ref_ll, rel=1e-12)


def test_exact_observation_leaves_mean():
    prior = GaussianBelief(np.arange(10.0), np.eye(10) * 4)
    post, ll = update(prior, prior.mean[:2], 0.5)
    np.testing.assert_array_equal(post.mean, prior.mean)
    assert ll == pytest.approx(-math.log(2 * math.pi * 4.25), rel=1e-12)


def test_uninformative_observation():
    prior = GaussianBelief(np.arange(10.0), np.eye(10) * 4 + 1)
    post, _ = update(prior, prior.mean[:2] + 100, 1e9)
    np.testing.assert_allclose(post.mean, prior.mean, atol=1e-12)
    np.testing.assert_allclose(post.cov, prior.cov, atol=1e-12)


def test_missing_observations_are_dropped():
    prior = GaussianBelief(np.arange(10.0), np.eye(10) * 4)
    post, ll = update(prior, [np.nan, 3.0], 0.5)
    ref, ref_ll = update(prior, [3.0], 0.5, obs_index=[1])
    np.testing.assert_array_equal(post.mean, ref.mean)
    assert ll == ref_ll
    same, zero = update(prior, [np.nan, np.nan], 0.5)
    assert zero == 0.0 and same is prior


def test_singular_innovation_raises():
    prior = GaussianBelief(np.zeros(5), np.zeros((5, 5)))
    with pytest.raises(NumericalError):
        update(prior, [1.0], 0.0)


def test_zero_noise_linear_prediction(rng):
    f = rng.standard_normal((4, 4))
    tr = LinearTransition(f, np.zeros((4, 4)), [0], 2)
    a = rng.standard_normal((4, 4))
    b = GaussianBelief(rng.standard_normal(4), a @ a.T)
    pred, jac = predict_with(b, tr, 1)
    np.testing.assert_allclose(pred.cov, f @ b.cov @ f.T, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(pred.mean, f @ b.mean)


def test_prediction_without_infected():
    pops = np.array([1e6, 2e6])
    x = np.concatenate([[3, 4], pops - [3, 4], [0, 0], [0, 0], [.16, .2]])
    cov = np.zeros((10, 10))
    pred = predict(GaussianBelief(x, cov), PolicyMultipliers.ones(2), EffectiveMobility.closed(2), P, pops)
    assert not pred.cov[:8].any()
    np.testing.assert_allclose(pred.cov[8:, 8:], beta_cov(x[8:], P))


def test_prediction_national_death_increase(small_dataset):
    ds = small_dataset
    x = ds.path[60]
    pred = predict(GaussianBelief(x, np.zeros((len(x), len(x)))), PolicyMultipliers.ones(5),
                   EffectiveMobility.closed(5), P, ds.country.populations)
    n = 5
    assert pred.mean[:n].sum() - x[:n].sum() == pytest.approx(P.delta * x[2 * n:3 * n].sum(), rel=1e-12)


def test_nonfinite_prediction_names_date():
    tr = LinearTransition(np.array([[np.inf]]), np.zeros((1, 1)), [0], 2)
    with pytest.raises(NumericalError, match="2020-02-13"):
        kalman_filter(tr, [[0.0], [0.0]], GaussianBelief(np.ones(1), np.eye(1)), 1.0,
                      dates=[START, START + dt.timedelta(1)])


# -- linear oracle ----------------------------------------------------------------

def test_linear_filter_and_smoothers_match_dense_conditioning(rng):
    f, q, obs, m0, p0, ys = random_linear(4, 2, 15, rng)
    c = np.eye(4)[obs]
    fout = kalman_filter(LinearTransition(f, q, obs, len(ys)), ys, GaussianBelief(m0, p0), 0.3)
    fm, fp, sm, sp, ll = dense_smoother(f, q, c, 0.09 * np.eye(2), m0, p0, ys)
    np.testing.assert_allclose(fout.means(), fm, atol=1e-8 * np.abs(fm).max())
    np.testing.assert_allclose(fout.covs(), fp, atol=1e-8 * np.abs(fp).max())
    assert fout.loglik == pytest.approx(ll, rel=1e-10)
    for sm_out in (rts_smooth(fout), bf_smooth(fout)):
        np.testing.assert_allclose(sm_out.means, sm, atol=1e-8 * np.abs(sm).max())
        np.testing.assert_allclose(sm_out.covs, sp, atol=1e-8 * np.abs(sp).max())


def test_linearized_epidemic_matches_dense_conditioning(rng):
    f, q, c, init, ys = sird_linearization(2, rng)
    n = 2
    tr = LinearTransition(f, q, np.arange(n), len(ys), c=c)
    fout = kalman_filter(tr, ys, init, 0.5)
    # shift out the constant so the oracle sees a homogeneous system
    shift = [init.mean]
    for _ in range(1, len(ys)):
        shift.append(f @ shift[-1] + c)
    shift = np.array(shift)
    fm, fp, sm, sp, ll = dense_smoother(f, q, np.eye(5 * n)[:n], 0.25 * np.eye(n),
                                        np.zeros(5 * n), init.cov, ys - shift[:, :n])
    scale = np.abs(fout.means()).max()
    np.testing.assert_allclose(fout.means(), fm + shift, atol=1e-8 * scale)
    assert fout.loglik == pytest.approx(ll, rel=1e-8)
    rts = quiet(rts_smooth, fout)
    bf = bf_smooth(fout)
    for out in (rts, bf):
        np.testing.assert_allclose(out.means, sm + shift, atol=1e-8 * scale)
        np.testing.assert_allclose(out.covs, sp, atol=1e-8 * np.abs(sp).max())


@given(st.integers(1, 5), st.integers(0, 2**31))
def test_smoothing_never_inflates_variance(n, seed):
    rng = np.random.default_rng(seed)
    f, q, obs, m0, p0, ys = random_linear(n, max(1, n // 2), 12, rng)
    fout = kalman_filter(LinearTransition(f, q, obs, len(ys)), ys, GaussianBelief(m0, p0), 0.3)
    filt = np.diagonal(fout.covs(), axis1=1, axis2=2)
    scale = filt.max()
    for out in (rts_smooth(fout), bf_smooth(fout)):
        sm = np.diagonal(out.covs, axis1=1, axis2=2)
        assert (sm <= filt + 1e-8 * scale).all()
        np.testing.assert_array_equal(out.means[-1], fout.steps[-1].filtered.mean)


@given(st.integers(1, 12).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, 2**31))))
def test_block_operator_matches_dense(case):
    n, seed = case
    rng = np.random.default_rng(seed)
    j = rng.standard_normal((5 * n, 5 * n))
    sl = lambda k: slice(k * n, (k + 1) * n)  # noqa: E731
    j[sl(0), sl(3)] = 0
    j[sl(1), sl(1)] = np.diag(rng.standard_normal(n))
    m = rng.standard_normal((5 * n, 5 * n))
    op = BlockOperator(j, n)
    np.testing.assert_allclose(op @ m, j @ m, atol=1e-12 * 25 * n)
    np.testing.assert_allclose(op.T @ m, j.T @ m, atol=1e-12 * 25 * n)
    np.testing.assert_allclose(op.sandwich(m), j @ m @ j.T, atol=1e-10 * 25 * n)


# -- epidemic model ---------------------------------------------------------------

@pytest.fixture(scope="module")
def fitted(small_dataset):
    ds = small_dataset
    fout = run_filter(ds.panel, ds.calendar, ds.mobility, ds.country, ds.params)
    return ds, fout


def test_rts_and_bf_agree_on_epidemic(fitted):
    ds, fout = fitted
    with pytest.warns(RuntimeWarning, match="regularized"):
        rts = rts_smooth(fout)
    bf = bf_smooth(fout)
    # relative to each component's magnitude over the trajectory
    scale = np.abs(rts.means).max(axis=0)
    assert (np.abs(rts.means - bf.means) / scale).max() < 1e-6
    np.testing.assert_array_equal(bf.means[-1], fout.steps[-1].filtered.mean)


def test_smoothed_deaths_reproduce_observations(fitted):
    ds, fout = fitted
    sm = bf_smooth(fout, covariances=False)
    n = ds.country.n
    assert np.abs(sm.means[:, :n] - ds.panel.adjusted).max() <= 3 * P.meas_sd


def test_filter_tracks_true_infected(fitted):
    ds, fout = fitted
    n = ds.country.n
    m = fout.means()[:, 2 * n:3 * n]
    sd = np.sqrt(np.diagonal(fout.covs(), axis1=1, axis2=2)[:, 2 * n:3 * n])
    truth = ds.path[:, 2 * n:3 * n]
    burn = 14
    inside = np.abs(m - truth)[burn:] <= 1.96 * sd[burn:]
    assert inside.mean() >= 0.9


def test_zero_deaths_keep_infected_near_zero():
    country = Country(("AA", "AB"), np.array([1e6, 2e6]))
    dates = date_range(START, START + dt.timedelta(59))
    obs = np.zeros((60, 2))
    init = initial_belief(country, P, dates[0], infected=1.0, infected_sd=1.0)
    fout = run_filter(obs, PolicyCalendar(()), MobilitySpec.closed(2), country, P, init=init, dates=dates)
    assert np.abs(fout.means()[:, 4:6]).max() < 10


def test_loglik_increments_invariant_to_state_order(small_dataset):
    ds = small_dataset
    order = [3, 0, 4, 1, 2]
    codes = [ds.country.state_codes[j] for j in order]
    a = run_filter(ds.panel, ds.calendar, ds.mobility, ds.country, ds.params)
    b = run_filter(ds.panel.reordered(codes), ds.calendar, ds.mobility.permuted(order),
                   ds.country.permuted(order), ds.params)
    np.testing.assert_allclose(a.increments, b.increments, rtol=1e-8, atol=1e-8)


def test_closed_country_likelihood_is_sum_of_single_states(closed_dataset):
    # transmission shocks are correlated across states unless rho = 0
    ds = closed_dataset
    params = ds.params.replace(rho=0.0)
    whole = run_filter(ds.panel, ds.calendar, ds.mobility, ds.country, params)
    total = 0.0
    for j, code in enumerate(ds.country.state_codes):
        one = Country((code,), ds.country.populations[[j]])
        cal = PolicyCalendar(tuple(e for e in ds.calendar.entries if e.state == code))
        part = run_filter(ds.panel.reordered([code]), cal, MobilitySpec.closed(1), one, params)
        total += part.loglik
        np.testing.assert_allclose(whole.means()[:, j::3], part.means(), rtol=1e-10, atol=1e-10)
    assert whole.loglik == pytest.approx(total, rel=1e-10)


def test_bf_factorizes_only_observation_sized_matrices(fitted, monkeypatch):
    ds, fout = fitted
    n = ds.country.n
    seen = []

    def record(name, fn):
        def wrapped(a, *args, **kw):
            arr = a[0] if isinstance(a, tuple) else a
            seen.append((name, np.shape(arr)))
            return fn(a, *args, **kw)
        return wrapped

    for name in ("cho_factor", "cho_solve", "solve", "inv", "pinv", "lu_factor", "cholesky"):
        if hasattr(scipy.linalg, name):
            monkeypatch.setattr(filtering.scipy.linalg, name, record(name, getattr(scipy.linalg, name)))
    for name in ("solve", "inv", "pinv", "cholesky"):
        monkeypatch.setattr(filtering.np.linalg, name, record("np." + name, getattr(np.linalg, name)))
    bf_smooth(fout)
    assert seen, "expected observation-sized solves"
    assert max(max(s) for _, s in seen) <= n
