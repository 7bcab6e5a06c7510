"""Death panels, weekly seasonal adjustment and quasi-maximum-likelihood fitting
of the transmission-rate dynamics (``beta_bar``, ``sigma``, ``rho``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.optimize

from .core import ConfigError, Country, Date, ModelParams, NumericalError, PolicyCalendar
from .filtering import GaussianBelief, run_filter
from .mobility import MobilitySpec

log = logging.getLogger(__name__)

MIN_DAYS = 21
PENALTY = 1e12
FREE_PARAMS = ("beta_bar", "sigma", "rho")


@dataclass(frozen=True)
class DeathPanel:
    """Cumulative deaths, one row per date and one column per state."""

    dates: tuple[Date, ...]
    codes: tuple[str, ...]
    raw: np.ndarray
    adjusted: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "codes", tuple(self.codes))
        raw = np.asarray(self.raw, dtype=float)
        if raw.shape != (len(self.dates), len(self.codes)):
            raise ValueError(f"panel shape {raw.shape} does not match dates x states")
        object.__setattr__(self, "raw", raw)
        adj = raw.copy() if self.adjusted is None else np.asarray(self.adjusted, dtype=float)
        object.__setattr__(self, "adjusted", adj)

    def __len__(self) -> int:
        return len(self.dates)

    def truncated(self, horizon: Date) -> "DeathPanel":
        keep = [k for k, d in enumerate(self.dates) if d <= horizon]
        return DeathPanel(tuple(self.dates[k] for k in keep), self.codes,
                          self.raw[keep], self.adjusted[keep])

    def reordered(self, codes: Sequence[str]) -> "DeathPanel":
        ix = [self.codes.index(c) for c in codes]
        return DeathPanel(self.dates, tuple(codes), self.raw[:, ix], self.adjusted[:, ix])


def moving_average_trend(x: np.ndarray, window: int = 7) -> np.ndarray:
    """Centered moving average along axis 0, ends padded by replication."""
    half = window // 2
    padded = np.pad(x, [(half, half)] + [(0, 0)] * (x.ndim - 1), mode="edge")
    csum = np.cumsum(padded, axis=0)
    csum = np.concatenate([np.zeros((1,) + x.shape[1:]), csum], axis=0)
    return (csum[window:] - csum[:-window]) / window


def decompose(increments: np.ndarray, weekdays: Sequence[int]):
    """Split daily increments into ``(trend, seasonal, remainder)``.

    Seasonal is the day-of-week mean of the detrended series, centered so that
    the seven weekday effects sum to zero.
    """
    inc = np.asarray(increments, dtype=float)
    weekdays = np.asarray(weekdays)
    trend = moving_average_trend(inc)
    detrended = inc - trend
    effects = np.zeros((7,) + inc.shape[1:])
    for wd in range(7):
        sel = weekdays == wd
        if sel.any():
            effects[wd] = detrended[sel].mean(axis=0)
    effects -= effects.mean(axis=0)
    seasonal = effects[weekdays]
    return trend, seasonal, detrended - seasonal


def _stl_decompose(increments, weekdays):
    from statsmodels.tsa.seasonal import STL

    inc = np.asarray(increments, dtype=float)
    trend = np.empty_like(inc)
    seasonal = np.empty_like(inc)
    for j in range(inc.shape[1]):
        res = STL(inc[:, j], period=7, robust=True).fit()
        trend[:, j] = res.trend
        seasonal[:, j] = res.seasonal
    return trend, seasonal, inc - trend - seasonal


DECOMPOSERS: dict[str, Callable] = {"moving_average": decompose, "stl": _stl_decompose}


def seasonal_adjust(panel: DeathPanel, method: str = "moving_average") -> DeathPanel:
    """Remove weekly seasonality from daily increments and re-cumulate.

    Adjusted increments (trend + remainder) are floored at zero and rescaled so
    every state keeps its raw final cumulative total.
    """
    if len(panel) < MIN_DAYS:
        raise ConfigError(f"seasonal adjustment needs at least {MIN_DAYS} days, got {len(panel)}")
    try:
        decomposer = DECOMPOSERS[method]
    except KeyError:
        raise ConfigError(f"unknown decomposition {method!r}") from None
    raw = panel.raw
    inc = np.diff(raw, axis=0)
    weekdays = [d.weekday() for d in panel.dates[1:]]
    _, seasonal, _ = decomposer(inc, weekdays)
    adj = np.maximum(inc - seasonal, 0.0)
    target = raw[-1] - raw[0]
    total = adj.sum(axis=0)
    scale = np.divide(target, total, out=np.ones_like(total), where=total > 0)
    adj = adj * scale
    cum = np.vstack([raw[:1], raw[:1] + np.cumsum(adj, axis=0)])
    # exact end point despite floating-point accumulation
    cum[-1] = raw[-1]
    return DeathPanel(panel.dates, panel.codes, raw, cum)


# -- objective -------------------------------------------------------------------

@dataclass(frozen=True)
class Bounds:
    beta_bar: tuple[float, float] = (0.01, 1.0)
    sigma: tuple[float, float] = (1e-3, 1.0)
    rho: tuple[float, float] = (0.0, 0.99)

    def contains(self, beta_bar, sigma, rho) -> bool:
        return all(lo <= v <= hi for v, (lo, hi) in zip((beta_bar, sigma, rho), self.as_tuple()))

    def distance(self, beta_bar, sigma, rho) -> float:
        return float(sum(max(lo - v, 0.0) + max(v - hi, 0.0)
                         for v, (lo, hi) in zip((beta_bar, sigma, rho), self.as_tuple())))

    def as_tuple(self):
        return (self.beta_bar, self.sigma, self.rho)


_RHO_EPS = 1e-9


def to_unconstrained(beta_bar, sigma, rho) -> np.ndarray:
    """``(log beta_bar, log sigma, atanh(2 rho - 1))``."""
    r = min(max(rho, _RHO_EPS), 1 - _RHO_EPS)
    return np.array([math.log(beta_bar), math.log(sigma), math.atanh(2 * r - 1)])


def from_unconstrained(u) -> tuple[float, float, float]:
    return float(math.exp(u[0])), float(math.exp(u[1])), float(0.5 * (1 + math.tanh(u[2])))


def neg_quasi_loglik(free_params, fixed: ModelParams, panel: DeathPanel, calendar: PolicyCalendar,
                     mobility: MobilitySpec, country: Country,
                     init: GaussianBelief | None = None, bounds: Bounds | None = None) -> float:
    """Negative EKF log-likelihood at ``(beta_bar, sigma, rho)``.

    Filter failures map to ``PENALTY`` plus the distance to the feasible box, so
    a search retreats from them instead of crashing.
    """
    beta_bar, sigma, rho = (float(v) for v in free_params)
    bounds = bounds or Bounds()
    params = fixed.replace(beta_bar=beta_bar, sigma=sigma, rho=rho)
    if params.violations():
        return PENALTY + bounds.distance(beta_bar, sigma, rho) + 1.0
    try:
        ll = run_filter(panel, calendar, mobility, country, params, init=init).loglik
    except (NumericalError, np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        log.debug("filter failed at %s: %s", (beta_bar, sigma, rho), exc)
        return PENALTY + bounds.distance(beta_bar, sigma, rho)
    if not math.isfinite(ll):
        return PENALTY + bounds.distance(beta_bar, sigma, rho)
    return -ll


@dataclass
class FitResult:
    beta_bar: float
    sigma: float
    rho: float
    loglik: float
    kappa: float
    converged: bool
    n_evals: int
    message: str = ""
    at_bound: tuple[str, ...] = ()
    start_loglik: float = float("nan")

    def params(self, base: ModelParams) -> ModelParams:
        return base.replace(beta_bar=self.beta_bar, sigma=self.sigma, rho=self.rho)

    def as_row(self) -> dict:
        return {
            "beta_bar": self.beta_bar, "sigma": self.sigma, "rho": self.rho,
            "kappa": self.kappa, "loglik": self.loglik, "converged": self.converged,
            "n_evals": self.n_evals, "at_bound": ";".join(self.at_bound), "message": self.message,
        }


def fit(panel: DeathPanel, calendar: PolicyCalendar, mobility: MobilitySpec, country: Country,
        params_init: ModelParams, bounds: Bounds | None = None, init: GaussianBelief | None = None,
        max_evals: int = 500, tol: float = 1e-4, simplex_step: float = 0.3) -> FitResult:
    """Nelder-Mead search for ``(beta_bar, sigma, rho)`` with ``kappa`` held fixed.

    The search runs in ``(log beta_bar, log sigma, atanh(2 rho - 1))`` with
    the box mapped into those coordinates.
    """
    bounds = bounds or Bounds()
    start = (params_init.beta_bar, params_init.sigma, params_init.rho)
    # start inside the box so the search is well-defined
    start = tuple(min(max(v, lo), hi) for v, (lo, hi) in zip(start, bounds.as_tuple()))
    u_lo = to_unconstrained(*(b[0] for b in bounds.as_tuple()))
    u_hi = to_unconstrained(*(b[1] for b in bounds.as_tuple()))
    u0 = to_unconstrained(*start)

    n_evals = 0

    def objective(u):
        nonlocal n_evals
        n_evals += 1
        u = np.clip(u, u_lo, u_hi)
        return neg_quasi_loglik(from_unconstrained(u), params_init, panel, calendar, mobility,
                                country, init=init, bounds=bounds)

    f0 = objective(u0)
    simplex = [u0]
    for k in range(3):
        v = u0.copy()
        # step away from the nearer bound
        v[k] += simplex_step if u0[k] + simplex_step <= u_hi[k] else -simplex_step
        simplex.append(np.clip(v, u_lo, u_hi))
    res = scipy.optimize.minimize(
        objective, u0, method="Nelder-Mead",
        bounds=list(zip(u_lo, u_hi)),
        options={"xatol": tol, "fatol": tol, "maxfev": max_evals - 1,
                 "initial_simplex": np.array(simplex)},
    )
    u_best = np.clip(res.x, u_lo, u_hi)
    f_best = float(res.fun)
    if not f_best < f0:
        return FitResult(*start, loglik=-f0, kappa=params_init.kappa, converged=False,
                         n_evals=n_evals, message="no improvement over the starting point",
                         start_loglik=-f0)
    est = from_unconstrained(u_best)
    at_bound = tuple(name for name, v, (lo, hi) in zip(FREE_PARAMS, est, bounds.as_tuple())
                     if abs(v - lo) <= 1e-3 * max(abs(lo), 1e-3) or abs(v - hi) <= 1e-3 * max(abs(hi), 1e-3))
    return FitResult(*est, loglik=-f_best, kappa=params_init.kappa, converged=bool(res.success),
                     n_evals=n_evals, message=str(res.message), at_bound=at_bound, start_loglik=-f0)


# -- sensitivity -------------------------------------------------------------------

def impact_variant(params: ModelParams, name: str, strength: str) -> float:
    """Policy multiplier for a policy that is half or twice as impactful.

    Twice as impactful halves the multiplier; half as impactful halves the
    reduction ``1 - theta``.
    """
    theta = getattr(params, name)
    if strength == "twice":
        return theta / 2
    if strength == "half":
        return 1 - (1 - theta) / 2
    raise ValueError(f"strength must be 'half' or 'twice', not {strength!r}")


@dataclass
class SweepRow:
    overrides: dict
    fit: FitResult | None = None
    summaries: dict = field(default_factory=dict)
    error: str = ""

    def as_row(self) -> dict:
        row = {"override": ";".join(f"{k}={v}" for k, v in self.overrides.items())}
        if self.fit is not None:
            row.update(self.fit.as_row())
        for name, value in self.summaries.items():
            row[f"excess[{name}]"] = value
        row["error"] = self.error
        return row


def sensitivity_sweep(overrides, panel: DeathPanel, calendar: PolicyCalendar,
                      mobility: MobilitySpec, country: Country, params: ModelParams,
                      scenarios: Sequence = (), refit: bool = True,
                      fit_kwargs: dict | None = None) -> list[SweepRow]:
    """Re-fit and re-run counterfactuals under each parameter override.

    ``overrides`` is a sequence of ``(name, value)`` pairs or dicts.  A failing
    row records its error and the sweep moves on.
    """
    from .counterfactual import run_counterfactual  # circular at import time

    rows = []
    for ov in overrides:
        ov = dict([ov]) if isinstance(ov, tuple) else dict(ov)
        row = SweepRow(ov)
        try:
            bad = [k for k in ov if k in FREE_PARAMS]
            if bad:
                raise ConfigError(f"override of an estimated parameter: {bad}")
            p = params.replace(**ov)
            if p.violations():
                raise ConfigError("; ".join(p.violations()))
            if refit:
                row.fit = fit(panel, calendar, mobility, country, p, **(fit_kwargs or {}))
                p = row.fit.params(p)
            for sc in scenarios:
                res = run_counterfactual(panel, calendar, sc, mobility, country, p)
                row.summaries[sc.name] = res.national_excess
        except Exception as exc:  # noqa: BLE001 - recorded in the row
            row.error = f"{type(exc).__name__}: {exc}"
            log.warning("sweep row %s failed: %s", ov, row.error)
        rows.append(row)
    return rows
