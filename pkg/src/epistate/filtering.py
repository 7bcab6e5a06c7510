"""Extended Kalman filter on daily cumulative deaths, with RTS and
Bryson-Frazier fixed-interval smoothers.

The recursions are written against a small transition interface so the same
code runs the epidemic model, the augmented counterfactual system and linear
test systems::

    transition.n_steps            # number of dates
    transition.mean(x, k)         # E[x_k | x_{k-1} = x]
    transition.cov(x, k)          # Var[x_k | x_{k-1} = x]
    transition.jac(x, k)          # d mean / d x
    transition.obs_index          # state components that are measured

Observations for date ``k`` are a vector over ``obs_index``; NaN entries are
treated as missing and their rows are dropped from the measurement matrix.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .core import (Country, Date, LatentState, ModelParams, NumericalError, PolicyCalendar,
                   PolicyMultipliers, multiplier_path)
from .dynamics import conditional_cov, conditional_mean, jacobian, repair_psd
from .mobility import EffectiveMobility, MobilitySpec

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray
    date: Date | None = None

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))


@dataclass
class FilterStep:
    """Everything one predict/update cycle produced (kept for the smoothers)."""

    date: Date | None
    predicted: GaussianBelief
    filtered: GaussianBelief
    jac: np.ndarray | None            # transition Jacobian into this date
    rows: np.ndarray                  # observed state indices used
    innovation: np.ndarray
    innov_chol: tuple | None          # cho_factor of the innovation covariance
    gain: np.ndarray
    loglik: float


@dataclass
class FilterOutput:
    steps: list[FilterStep] = field(default_factory=list)
    block: int | None = None          # Jacobian block size, if structured

    @property
    def dates(self) -> list:
        return [s.date for s in self.steps]

    @property
    def loglik(self) -> float:
        return float(sum(s.loglik for s in self.steps))

    @property
    def increments(self) -> np.ndarray:
        return np.array([s.loglik for s in self.steps])

    def means(self, kind: str = "filtered") -> np.ndarray:
        return np.array([getattr(s, kind).mean for s in self.steps])

    def covs(self, kind: str = "filtered") -> np.ndarray:
        return np.array([getattr(s, kind).cov for s in self.steps])


@dataclass
class SmootherOutput:
    dates: list
    means: np.ndarray     # (T, n)
    covs: np.ndarray | None   # (T, n, n)

    def belief(self, k: int) -> GaussianBelief:
        return GaussianBelief(self.means[k], self.covs[k], self.dates[k])


# -- transitions -------------------------------------------------------------

class SirdTransition:
    """Epidemic model transition over a fixed list of dates.

    Step ``k`` (into ``dates[k]``) uses the policies in force on ``dates[k-1]``.
    """

    def __init__(self, country: Country, mobility: MobilitySpec, calendar: PolicyCalendar,
                 params: ModelParams, dates: Sequence[Date]):
        self.country = country
        self.params = params
        self.dates = list(dates)
        self.thetas = multiplier_path(calendar, params, country, self.dates)
        self.mobs = [EffectiveMobility.build(mobility, th, params) for th in self.thetas]
        self.pops = country.populations
        n = country.n
        self.obs_index = np.arange(n)   # D block
        self.block = n

    @property
    def n_steps(self) -> int:
        return len(self.dates)

    def _at(self, k):
        return self.thetas[k - 1], self.mobs[k - 1], self.params, self.pops

    def mean(self, x, k):
        return conditional_mean(x, *self._at(k))

    def cov(self, x, k):
        return conditional_cov(x, *self._at(k))

    def jac(self, x, k):
        return jacobian(x, *self._at(k))


class LinearTransition:
    """``x_k = F x_{k-1} + c + w``, ``w ~ N(0, Q)``; for tests and reductions."""

    def __init__(self, f: np.ndarray, q: np.ndarray, obs_index, n_steps: int, c=None):
        self.f = np.asarray(f, float)
        self.q = np.asarray(q, float)
        self.c = np.zeros(len(self.f)) if c is None else np.asarray(c, float)
        self.obs_index = np.asarray(obs_index)
        self.n_steps = n_steps
        self.dates = [None] * n_steps

    def mean(self, x, k):
        return self.f @ x + self.c

    def cov(self, x, k):
        return self.q

    def jac(self, x, k):
        return self.f


# -- single steps ------------------------------------------------------------

def _check_finite(arrays, date, what):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite {what} on {date}")


class BlockOperator:
    """A square matrix seen as a grid of ``size x size`` blocks.

    Zero blocks are skipped and diagonal blocks act by row scaling, so
    products with the epidemic Jacobian (mostly identity-like blocks plus a
    few dense mobility blocks) cost far less than a dense matmul.
    """

    def __init__(self, dense: np.ndarray, size: int | None):
        self.dense = dense
        self.size = size
        self.parts = None
        n = len(dense)
        if size is None or n % size or n == size:
            return
        nb = n // size
        grid = dense.reshape(nb, size, nb, size).transpose(0, 2, 1, 3)
        mag = np.abs(grid).sum(axis=(2, 3))
        diag = np.einsum("abii->abi", grid)
        is_diag = mag == np.abs(diag).sum(axis=2)
        self.parts = [(r, c, diag[r, c].copy() if is_diag[r, c] else grid[r, c].copy(), bool(is_diag[r, c]))
                      for r, c in zip(*np.nonzero(mag))]

    @property
    def T(self) -> "BlockOperator":
        op = BlockOperator.__new__(BlockOperator)
        op.dense, op.size = self.dense.T, self.size
        op.parts = None if self.parts is None else [
            (c, r, blk if is_diag else blk.T, is_diag) for r, c, blk, is_diag in self.parts]
        return op

    def __matmul__(self, m: np.ndarray) -> np.ndarray:
        if self.parts is None:
            return self.dense @ m
        b = self.size
        out = np.zeros((len(self.dense),) + m.shape[1:])
        for r, c, blk, is_diag in self.parts:
            src = m[c * b:(c + 1) * b]
            if is_diag:
                out[r * b:(r + 1) * b] += blk.reshape((-1,) + (1,) * (m.ndim - 1)) * src
            else:
                out[r * b:(r + 1) * b] += blk @ src
        return out

    def sandwich(self, m: np.ndarray) -> np.ndarray:
        """``A @ m @ A.T``."""
        return (self @ (self @ m).T).T


def predict_with(belief: GaussianBelief, transition, k: int, date=None) -> tuple[GaussianBelief, np.ndarray]:
    x = belief.mean
    mean = transition.mean(x, k)
    jac = transition.jac(x, k)
    cov = BlockOperator(jac, getattr(transition, "block", None)).sandwich(belief.cov) + transition.cov(x, k)
    _check_finite((mean, cov), date, "prediction")
    return GaussianBelief(mean, repair_psd(cov), date), jac


def predict(belief: GaussianBelief, theta: PolicyMultipliers, mob: EffectiveMobility,
            params: ModelParams, populations: np.ndarray, date=None) -> GaussianBelief:
    """One EKF time update of the epidemic state."""
    x = belief.mean
    mean = conditional_mean(x, theta, mob, params, populations)
    jac = jacobian(x, theta, mob, params, populations)
    cov = BlockOperator(jac, len(x) // 5).sandwich(belief.cov) + conditional_cov(x, theta, mob, params, populations)
    _check_finite((mean, cov), date, "prediction")
    return GaussianBelief(mean, repair_psd(cov), date)


def _update(belief: GaussianBelief, obs, obs_index, meas_sd: float):
    obs = np.asarray(obs, dtype=float)
    keep = ~np.isnan(obs)
    rows = np.asarray(obs_index)[keep]
    x, p = belief.mean, belief.cov
    if rows.size == 0:
        return belief, rows, np.zeros(0), None, np.zeros((len(x), 0)), 0.0
    y = obs[keep] - x[rows]
    ph = p[:, rows]                                  # P H'
    s = ph[rows] + meas_sd**2 * np.eye(rows.size)    # H P H' + R
    s = 0.5 * (s + s.T)
    try:
        chol = scipy.linalg.cho_factor(s, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"singular innovation covariance on {belief.date}") from exc
    gain = scipy.linalg.cho_solve(chol, ph.T).T      # P H' S^-1
    mean = x + gain @ y
    # Joseph form, expanded: (I-KH)P(I-KH)' + K R K' = P - K HP - (K HP)' + K S K'
    khp = gain @ ph.T
    cov = p - khp - khp.T + gain @ s @ gain.T
    cov = 0.5 * (cov + cov.T)
    logdet = 2.0 * np.log(np.diag(chol[0])).sum()
    alpha = scipy.linalg.cho_solve(chol, y)
    ll = -0.5 * (rows.size * _LOG_2PI + logdet + y @ alpha)
    _check_finite((mean, cov, [ll]), belief.date, "update")
    return GaussianBelief(mean, cov, belief.date), rows, y, chol, gain, float(ll)


def update(belief: GaussianBelief, d_obs, meas_sd: float, obs_index=None) -> tuple[GaussianBelief, float]:
    """Condition on observed cumulative deaths; returns (posterior, log-likelihood increment).

    By default the first ``N = len(mean) // 5`` components (the deaths block)
    are observed.
    """
    if obs_index is None:
        obs_index = np.arange(len(belief.mean) // 5)
    post, *_, ll = _update(belief, d_obs, obs_index, meas_sd)
    return post, ll


# -- full passes ---------------------------------------------------------------

def kalman_filter(transition, observations, init: GaussianBelief, meas_sd: float,
                  dates: Sequence | None = None) -> FilterOutput:
    """Alternate predict/update over all dates; ``init`` is the prior for date 0."""
    observations = np.asarray(observations, dtype=float)
    if len(observations) != transition.n_steps:
        raise ValueError("observations and transition have different lengths")
    dates = list(dates) if dates is not None else list(transition.dates)
    out = FilterOutput(block=getattr(transition, "block", None))
    belief = GaussianBelief(init.mean, init.cov, dates[0])
    for k in range(transition.n_steps):
        date = dates[k]
        if k == 0:
            pred, jac = belief, None
        else:
            try:
                pred, jac = predict_with(belief, transition, k, date)
            except (np.linalg.LinAlgError, FloatingPointError) as exc:
                raise NumericalError(f"prediction failed on {date}: {exc}") from exc
        post, rows, y, chol, gain, ll = _update(pred, observations[k], transition.obs_index, meas_sd)
        post = GaussianBelief(post.mean, post.cov, date)
        out.steps.append(FilterStep(date, pred, post, jac, rows, y, chol, gain, ll))
        belief = post
    return out


def initial_belief(country: Country, params: ModelParams, date=None, deaths=0.0,
                   infected: float = 100.0, infected_sd: float = 1000.0,
                   deaths_sd: float = 1.0) -> GaussianBelief:
    """Diffuse prior: ``S = p - I``, ``R = 0``, ``beta0 ~ N(beta_bar, beta_bar^2)``."""
    n = country.n
    mean = LatentState.initial(country, params, infected=infected, deaths=deaths).to_vector()
    cov = np.zeros((5 * n, 5 * n))
    ix = np.arange(n)
    var_i = infected_sd**2
    cov[ix, ix] = deaths_sd**2
    cov[n + ix, n + ix] = var_i
    cov[2 * n + ix, 2 * n + ix] = var_i
    cov[n + ix, 2 * n + ix] = -var_i
    cov[2 * n + ix, n + ix] = -var_i
    cov[4 * n + ix, 4 * n + ix] = params.beta_bar**2
    return GaussianBelief(mean, cov, date)


def run_filter(observations, calendar: PolicyCalendar, mobility: MobilitySpec, country: Country,
               params: ModelParams, init: GaussianBelief | None = None,
               dates: Sequence[Date] | None = None) -> FilterOutput:
    """EKF over a date-indexed panel of cumulative deaths.

    ``observations`` is either a :class:`~epistate.estimation.DeathPanel`
    (adjusted values are used) or a ``(T, N)`` array with ``dates`` given.
    """
    if hasattr(observations, "adjusted"):
        dates = observations.dates
        observations = observations.adjusted
    if dates is None:
        raise ValueError("dates are required with a bare observation array")
    obs = np.asarray(observations, dtype=float)
    transition = SirdTransition(country, mobility, calendar, params, dates)
    if init is None:
        first = np.nan_to_num(obs[0], nan=0.0)
        init = initial_belief(country, params, dates[0], deaths=first)
    return kalman_filter(transition, obs, init, params.meas_sd, dates)


# -- smoothers -------------------------------------------------------------------

def _spd_solve(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve ``a x = b`` for symmetric PSD ``a``; returns ``(x, regularized)``.

    The matrix is equilibrated by its diagonal first so that compartments
    measured in millions and transmission rates near 0.1 are on one scale.
    A singular ``a`` (e.g. from exact conservation of population) falls back
    to a pseudo-inverse of the equilibrated matrix.
    """
    d = np.sqrt(np.clip(np.diag(a), 0, None))
    live = d > 0
    scale = np.where(live, 1.0 / np.where(live, d, 1.0), 0.0)
    c = a * np.outer(scale, scale)
    c[~live, ~live] = 1.0
    rhs = scale[:, None] * b
    try:
        x = scipy.linalg.cho_solve(scipy.linalg.cho_factor(c, lower=True), rhs)
        regularized = False
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        x = np.linalg.pinv(c, rcond=1e-12, hermitian=True) @ rhs
        regularized = True
    return scale[:, None] * x, regularized


def rts_smooth(fout: FilterOutput) -> SmootherOutput:
    """Rauch-Tung-Striebel backward pass over stored filter output."""
    steps = fout.steps
    t = len(steps)
    means = np.empty((t, len(steps[0].filtered.mean)))
    covs = np.empty((t,) + steps[0].filtered.cov.shape)
    means[-1] = steps[-1].filtered.mean
    covs[-1] = steps[-1].filtered.cov
    singular = []
    for k in range(t - 2, -1, -1):
        pf = steps[k].filtered.cov
        pp = steps[k + 1].predicted.cov
        jac = steps[k + 1].jac
        # G = Pf J' Pp^-1, computed as (Pp^-1 J Pf)'
        sol, reg = _spd_solve(pp, BlockOperator(jac, fout.block) @ pf)
        gain = sol.T
        if reg:
            singular.append(steps[k + 1].date)
        means[k] = steps[k].filtered.mean + gain @ (means[k + 1] - steps[k + 1].predicted.mean)
        c = pf + gain @ (covs[k + 1] - pp) @ gain.T
        covs[k] = 0.5 * (c + c.T)
    if singular:
        warnings.warn(f"predicted covariance singular on {len(singular)} date(s) "
                      f"(first {singular[-1]}); used a regularized inverse",
                      RuntimeWarning, stacklevel=2)
    return SmootherOutput(fout.dates, means, covs)


def bf_smooth(fout: FilterOutput, covariances: bool = True) -> SmootherOutput:
    """Modified Bryson-Frazier backward pass.

    Only the innovation covariances (observation-sized) are ever factorized;
    their Cholesky factors are reused from the forward pass.  With
    ``covariances=False`` only smoothed means are computed (``covs`` is None).
    """
    steps = fout.steps
    t = len(steps)
    n = len(steps[0].filtered.mean)
    means = np.empty((t, n))
    covs = np.empty((t, n, n)) if covariances else None
    lam = np.zeros((n, n))   # adjoint information matrix
    vec = np.zeros(n)        # adjoint vector
    for k in range(t - 1, -1, -1):
        st = steps[k]
        pf = st.filtered.cov
        means[k] = st.filtered.mean - pf @ vec
        if covariances:
            c = pf - pf @ lam @ pf
            covs[k] = 0.5 * (c + c.T)
        if k == 0:
            break
        rows = st.rows
        if rows.size:
            # C = I - K H with H selecting ``rows``:
            # C' L C = L - H'K'L - L K H + H'K'L K H, all rank-|rows| corrections
            gain = st.gain
            lk = lam @ gain
            lam_t = lam.copy()
            lam_t[:, rows] -= lk
            lam_t[rows, :] -= lk.T
            lam_t[np.ix_(rows, rows)] += gain.T @ lk
            lam_t[np.ix_(rows, rows)] += scipy.linalg.cho_solve(st.innov_chol, np.eye(rows.size))
            vec_t = vec.copy()
            vec_t[rows] -= gain.T @ vec
            vec_t[rows] -= scipy.linalg.cho_solve(st.innov_chol, st.innovation)
        else:
            lam_t, vec_t = lam, vec
        lam = BlockOperator(st.jac, fout.block).T.sandwich(lam_t)
        lam = 0.5 * (lam + lam.T)
        vec = st.jac.T @ vec_t
    return SmootherOutput(fout.dates, means, covs)
