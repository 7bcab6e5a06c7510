"""One-step moments of the stacked ``[D, S, I, R, beta0]`` state.

The state vector has length ``5N`` and is laid out block-wise: all deaths,
then all susceptibles, infected, recovered and finally the transmission
rates.  ``conditional_mean``, ``conditional_cov`` and ``jacobian`` give the
Gaussian (quasi-likelihood) approximation used by the filter; ``micro_step``
draws the exact individual-level transition and serves as an oracle.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.linalg

from .core import Country, LatentState, ModelParams, PolicyMultipliers
from .mobility import EffectiveMobility, infection_product_cov

D, S, I, R, B = range(5)


def blocks(x: np.ndarray) -> list[np.ndarray]:
    return np.split(np.asarray(x, dtype=float), 5)


def _as_vector(x) -> np.ndarray:
    if isinstance(x, LatentState):
        return x.to_vector()
    return np.asarray(x, dtype=float)


def shock_correlation(n: int, rho: float) -> np.ndarray:
    """Unit diagonal, ``rho`` everywhere else."""
    sigma = np.full((n, n), float(rho))
    np.fill_diagonal(sigma, 1.0)
    return sigma


def clamp_state(x: np.ndarray) -> np.ndarray:
    """Project a state vector onto the admissible set.

    Negative transmission rates become zero.  Negative ``I`` or ``R`` entries
    are zeroed with the difference taken from ``S`` so per-state totals are
    unchanged; a resulting negative ``S`` is refilled from ``I`` then ``R``.
    ``D`` is never modified.
    """
    x = np.array(x, dtype=float)
    d, s, i, r, b = np.split(x, 5)  # views into x
    np.maximum(b, 0.0, out=b)
    for comp in (i, r):
        neg = comp < 0
        if neg.any():
            s[neg] += comp[neg]
            comp[neg] = 0.0
    short = s < 0
    if short.any():
        deficit = np.where(short, -s, 0.0)
        s[short] = 0.0
        for comp in (i, r):
            take = np.minimum(deficit, comp)
            comp -= take
            deficit -= take
    return x


def _infection_parts(s, i, beta0, theta: PolicyMultipliers, mob: EffectiveMobility, pops):
    coef = theta.transmission * beta0 / pops
    if mob.is_closed:
        return coef, i, s
    a = np.eye(len(s)) + mob.omega
    return coef, a @ i, a @ s


def new_infections_mean(s, i, beta0, theta, mob, pops) -> np.ndarray:
    coef, ai, as_ = _infection_parts(s, i, beta0, theta, mob, pops)
    return coef * ai * as_


def conditional_mean(x, theta: PolicyMultipliers, mob: EffectiveMobility, params: ModelParams,
                     populations: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Expected next state given the current one."""
    x = _as_vector(x)
    d, s, i, r, b = np.split(x, 5)
    g, dl, dt = params.gamma, params.delta, params.dt
    new = new_infections_mean(s, i, b, theta, mob, populations)
    out = np.concatenate([
        d + dl * i,
        s - new,
        (1 - dl - g) * i + new,
        r + g * i,
        b + params.kappa * (params.beta_bar - b) * dt,
    ])
    return clamp_state(out) if clamp else out


def theta_cov(s, i, beta0, theta: PolicyMultipliers, mob: EffectiveMobility,
              populations: np.ndarray) -> np.ndarray:
    """Conditional covariance of new infections (equivalently of next-day ``S``)."""
    coef, ai, as_ = _infection_parts(s, i, beta0, theta, mob, populations)
    out = np.diag(coef * ai * as_)
    if not mob.is_closed:
        prod = infection_product_cov(mob.w_com_t, mob.w_trav_t, s, i, mob.tau_com, mob.omega)
        out += np.outer(coef, coef) * prod
    return out


def beta_cov(beta0, params: ModelParams) -> np.ndarray:
    root = np.sqrt(np.maximum(beta0, 0.0))
    return params.sigma**2 * params.dt * shock_correlation(len(root), params.rho) * np.outer(root, root)


def conditional_cov(x, theta: PolicyMultipliers, mob: EffectiveMobility, params: ModelParams,
                    populations: np.ndarray) -> np.ndarray:
    """Conditional covariance of the next state, ``5N x 5N``."""
    x = clamp_state(_as_vector(x))
    _, s, i, _, b = np.split(x, 5)
    n = len(s)
    g, dl = params.gamma, params.delta
    th = theta_cov(s, i, b, theta, mob, populations)
    v = np.zeros((5 * n, 5 * n))

    def put(r_blk, c_blk, m):
        v[r_blk * n:(r_blk + 1) * n, c_blk * n:(c_blk + 1) * n] = m
        if r_blk != c_blk:
            v[c_blk * n:(c_blk + 1) * n, r_blk * n:(r_blk + 1) * n] = m.T

    di = np.diag(i)
    put(D, D, dl * (1 - dl) * di)
    put(D, I, -dl * (1 - dl - g) * di)
    put(D, R, -dl * g * di)
    put(S, S, th)
    put(S, I, -th)
    put(I, I, th + params.nu * di)
    put(I, R, -g * (1 - g - dl) * di)
    put(R, R, (g - g * g) * di)
    put(B, B, beta_cov(b, params))
    return v


def jacobian(x, theta: PolicyMultipliers, mob: EffectiveMobility, params: ModelParams,
             populations: np.ndarray) -> np.ndarray:
    """Derivative of :func:`conditional_mean` (unclamped) with respect to the state."""
    x = _as_vector(x)
    _, s, i, _, b = np.split(x, 5)
    n = len(s)
    g, dl = params.gamma, params.delta
    eye = np.eye(n)
    a = eye if mob.is_closed else eye + mob.omega
    coef, ai, as_ = _infection_parts(s, i, b, theta, mob, populations)

    j = np.zeros((5 * n, 5 * n))
    sl = [slice(k * n, (k + 1) * n) for k in range(5)]
    j[sl[D], sl[D]] = eye
    j[sl[D], sl[I]] = dl * eye
    j[sl[S], sl[S]] = eye
    j[sl[I], sl[I]] = (1 - dl - g) * eye
    j[sl[R], sl[I]] = g * eye
    j[sl[R], sl[R]] = eye
    j[sl[B], sl[B]] = (1 - params.kappa * params.dt) * eye

    d_ds = (coef * ai)[:, None] * a
    d_di = (coef * as_)[:, None] * a
    d_db = np.diag(theta.transmission / populations * ai * as_)
    for blk, sign in ((S, -1.0), (I, 1.0)):
        j[sl[blk], sl[S]] += sign * d_ds
        j[sl[blk], sl[I]] += sign * d_di
        j[sl[blk], sl[B]] += sign * d_db
    return j


def effective_r(beta0, theta_m, theta_s, s, country: Country | np.ndarray,
                params: ModelParams) -> np.ndarray:
    """Per-state effective reproduction number ``theta_m theta_s beta0 / (delta+gamma) * S/p``."""
    pops = country.populations if isinstance(country, Country) else np.asarray(country, float)
    return (np.asarray(theta_m) * np.asarray(theta_s) * np.asarray(beta0)
            / (params.delta + params.gamma) * np.asarray(s) / pops)


def repair_psd(p: np.ndarray, rel_tol: float = 1e-8) -> np.ndarray:
    """Symmetrize and, if clearly indefinite, shift the diagonal to floor eigenvalues at 0."""
    p = 0.5 * (p + p.T)
    tr = float(np.trace(p))
    floor = rel_tol * max(abs(tr), 1e-300)
    try:
        # Cholesky of the shifted matrix is a cheap certificate that
        # lambda_min >= -floor; eigvalsh only runs when it fails.
        scipy.linalg.cholesky(p + floor * np.eye(len(p)), lower=True, check_finite=False)
        return p
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        pass
    lam = scipy.linalg.eigvalsh(p, subset_by_index=[0, 0], check_finite=False)[0]
    if lam < -floor:
        p = p + (-lam) * np.eye(len(p))
    return p


def micro_step(x, theta: PolicyMultipliers, mob: EffectiveMobility, params: ModelParams,
               populations: np.ndarray, seed, size: int | None = None) -> np.ndarray:
    """Draw the exact individual-level transition.

    ``x`` must hold integer-valued compartments.  With ``size=None`` returns
    one ``5N`` state vector, otherwise an array ``(size, 5N)``.  ``seed`` may
    be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = _as_vector(x)
    d, s, i, r, b = np.split(x, 5)
    n = len(s)
    reps = 1 if size is None else int(size)
    si = np.rint(s).astype(np.int64)
    ii = np.rint(i).astype(np.int64)

    def net_flow(w, z, tau):
        if not w.any():
            return np.zeros((reps, n))
        f = rng.poisson(w[None, :, :] * z[None, :, None], size=(reps, n, n))
        return tau * (f.sum(axis=1) - f.sum(axis=2))

    s_star = si + net_flow(mob.w_com_t, si, mob.tau_com) + net_flow(mob.w_trav_t, si, 1.0)
    i_star = ii + net_flow(mob.w_com_t, ii, mob.tau_com) + net_flow(mob.w_trav_t, ii, 1.0)
    coef = theta.transmission * b / populations
    rate = np.maximum(coef * i_star * s_star, 0.0)
    new = np.minimum(rng.poisson(rate), si)
    deaths = rng.binomial(ii, params.delta, size=(reps, n))
    recov = rng.binomial(ii - deaths, params.gamma / (1 - params.delta))

    corr = np.linalg.cholesky(shock_correlation(n, params.rho))
    eps = rng.standard_normal((reps, n)) @ corr.T
    dt = params.dt
    beta_new = b + params.kappa * (params.beta_bar - b) * dt + params.sigma * np.sqrt(dt * np.maximum(b, 0)) * eps
    beta_new = np.maximum(beta_new, 0.0)

    out = np.concatenate([
        d + deaths,
        si - new,
        ii + new - deaths - recov,
        r + recov,
        beta_new,
    ], axis=1).astype(float)
    return out[0] if size is None else out


def simulate_path(x0, thetas: Sequence[PolicyMultipliers], mobs: Sequence[EffectiveMobility],
                  params: ModelParams, populations: np.ndarray, seed) -> np.ndarray:
    """Iterate :func:`micro_step`; returns ``(len(thetas) + 1, 5N)`` including ``x0``.

    Step ``k`` moves from row ``k`` to row ``k+1`` under ``thetas[k]``/``mobs[k]``.
    """
    rng = np.random.default_rng(seed)
    x = _as_vector(x0)
    path = [x]
    for th, mb in zip(thetas, mobs):
        x = micro_step(x, th, mb, params, populations, rng)
        path.append(x)
    return np.array(path)
