"""Counterfactual death trajectories under alternative policy calendars.

The observed country and a fictitious twin run side by side in one filter.
Both halves share standardized shocks (correlation just below one), only the
observed half is measured, and a Bryson-Frazier pass smooths the pair.  The
twin therefore inherits the transmission rates inferred from observed deaths
while propagating its own policies.
"""
from __future__ import annotations

import datetime as _dt
import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.csgraph

from .core import (ALL_POLICIES, ConfigError, Country, Date, ModelParams, NumericalError,
                   PolicyCalendar, PolicyInterval, PolicyKind, to_date)
from .dynamics import repair_psd
from .estimation import DeathPanel
from .filtering import (GaussianBelief, SirdTransition, bf_smooth, initial_belief,
                        kalman_filter)
from .mobility import MobilitySpec

log = logging.getLogger(__name__)

SHOCK_CORRELATION = 1 - 1e-6
ALL_STATES = "ALL"

# Earliest adoption / latest release observed across states.
STRICT_WINDOWS = {
    PolicyKind.STAY_HOME: (_dt.date(2020, 3, 19), _dt.date(2020, 6, 9)),
    PolicyKind.TRAVEL_BAN: (_dt.date(2020, 3, 17), None),
    PolicyKind.MASK: (_dt.date(2020, 4, 17), None),
}


class ScenarioKind(str, enum.Enum):
    STRICT = "STRICT"
    LOOSE = "LOOSE"


@dataclass(frozen=True)
class Scenario:
    name: str
    calendar: PolicyCalendar
    scope: str = ALL_STATES
    description: str = ""

    def violations(self, country: Country) -> list[str]:
        out = self.calendar.violations(country)
        if self.scope != ALL_STATES and self.scope not in country.state_codes:
            out.append(f"scenario {self.name}: unknown scope {self.scope!r}")
        return out


def build_scenario(kind, policies: Iterable, scope: str, observed: PolicyCalendar,
                   country: Country, horizon, starts: dict | None = None,
                   name: str | None = None) -> Scenario:
    """Derive a fictitious calendar from the observed one.

    STRICT replaces the named policies with the common strict window in every
    in-scope state; LOOSE removes them.  ``starts`` overrides strict start
    dates per policy (e.g. an earlier travel ban).
    """
    kind = ScenarioKind(kind.upper() if isinstance(kind, str) else kind)
    policies = [p if isinstance(p, PolicyKind) else PolicyKind.parse(p) for p in policies]
    if not policies:
        raise ConfigError("scenario needs at least one policy")
    horizon = to_date(horizon)
    if scope == ALL_STATES:
        states = list(country.state_codes)
    else:
        country.index(scope)
        states = [scope]
    cal = observed.without(policies, states)
    if kind is ScenarioKind.STRICT:
        starts = {PolicyKind.parse(k) if isinstance(k, str) else k: to_date(v)
                  for k, v in (starts or {}).items()}
        extra = []
        for p in policies:
            start, end = STRICT_WINDOWS[p]
            start = starts.get(p, start)
            end = horizon if end is None else end
            if start > min(end, horizon):
                continue    # never in force before the horizon
            extra += [PolicyInterval(s, p, start, end) for s in states]
        cal = cal.plus(extra)
    if name is None:
        tag = "all" if set(policies) == set(ALL_POLICIES) else "+".join(p.value.lower() for p in policies)
        name = f"{kind.value.lower()}_{tag}" + ("" if scope == ALL_STATES else f"_{scope}")
    desc = f"{kind.value} {', '.join(p.value for p in policies)} in {scope}"
    return Scenario(name, cal, scope, desc)


def identity_scenario(observed: PolicyCalendar, scope: str = ALL_STATES) -> Scenario:
    return Scenario(f"identity_{scope}", observed, scope, "observed policies")


# -- augmented system ---------------------------------------------------------------

def psd_sqrt(v: np.ndarray) -> np.ndarray:
    """Symmetric square root after flooring eigenvalues at zero.

    Uncoupled groups of coordinates (connected components of the sparsity
    graph) are decomposed separately; the result is the same matrix.
    """
    n_comp, label = scipy.sparse.csgraph.connected_components(
        scipy.sparse.csr_array(v), directed=False)
    if n_comp == 1:
        return _eigh_sqrt(v)
    out = np.zeros_like(v)
    sizes = np.bincount(label)
    single = np.flatnonzero(sizes[label] == 1)
    out[single, single] = np.sqrt(np.clip(v[single, single], 0, None))
    for c in np.flatnonzero(sizes > 1):
        ix = np.flatnonzero(label == c)
        out[np.ix_(ix, ix)] = _eigh_sqrt(v[np.ix_(ix, ix)])
    return out


def _eigh_sqrt(v: np.ndarray) -> np.ndarray:
    if v.shape == (1, 1):
        return np.sqrt(np.clip(v, 0, None))
    lam, vec = scipy.linalg.eigh(v, check_finite=False)
    return (vec * np.sqrt(np.clip(lam, 0, None))) @ vec.T


class TwinTransition:
    """Stacked ``[X, X*]`` transition: block-diagonal mean and Jacobian, and a
    joint noise covariance whose cross block pairs matched shocks."""

    def __init__(self, observed: SirdTransition, fictitious: SirdTransition,
                 correlation: float = SHOCK_CORRELATION):
        self.obs = observed
        self.fict = fictitious
        self.correlation = correlation
        self.half = 5 * observed.country.n
        self.obs_index = observed.obs_index
        self.block = observed.country.n
        self.dates = observed.dates
        self.n_steps = observed.n_steps

    def _split(self, x):
        return x[:self.half], x[self.half:]

    def mean(self, x, k):
        a, b = self._split(x)
        return np.concatenate([self.obs.mean(a, k), self.fict.mean(b, k)])

    def jac(self, x, k):
        a, b = self._split(x)
        return scipy.linalg.block_diag(self.obs.jac(a, k), self.fict.jac(b, k))

    def _root(self, v, k):
        try:
            return psd_sqrt(v)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            try:
                return psd_sqrt(repair_psd(v))
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
                raise NumericalError(f"square root of the transition covariance failed on "
                                     f"{self.dates[k]}") from exc

    def cov(self, x, k):
        a, b = self._split(x)
        va = self.obs.cov(a, k)
        vb = self.fict.cov(b, k)
        if np.array_equal(va, vb):
            cross = self.correlation * va
        else:
            cross = self.correlation * self._root(va, k) @ self._root(vb, k).T
        h = self.half
        out = np.empty((2 * h, 2 * h))
        out[:h, :h] = va
        out[h:, h:] = vb
        out[:h, h:] = cross
        out[h:, :h] = cross.T
        return out


@dataclass
class CounterfactualResult:
    scenario: Scenario
    dates: list
    codes: tuple[str, ...]
    deaths: np.ndarray            # smoothed baseline D, (T, N)
    deaths_fict: np.ndarray       # smoothed counterfactual D*, (T, N)
    horizon: Date
    infected: np.ndarray | None = None
    infected_fict: np.ndarray | None = None

    @property
    def horizon_index(self) -> int:
        return self.dates.index(self.horizon)

    @property
    def excess(self) -> np.ndarray:
        k = self.horizon_index
        return self.deaths_fict[k] - self.deaths[k]

    @property
    def national_excess(self) -> float:
        return float(self.excess.sum())

    @property
    def baseline_at_horizon(self) -> np.ndarray:
        return self.deaths[self.horizon_index]


def run_counterfactual(panel: DeathPanel, observed: PolicyCalendar, scenario: Scenario,
                       mobility: MobilitySpec, country: Country, params: ModelParams,
                       init: GaussianBelief | None = None, horizon=None,
                       correlation: float = SHOCK_CORRELATION) -> CounterfactualResult:
    """Filter the twin system on observed deaths and smooth with Bryson-Frazier."""
    bad = scenario.violations(country)
    if bad:
        raise ConfigError(bad[0])
    horizon = panel.dates[-1] if horizon is None else to_date(horizon)
    if not panel.dates[0] <= horizon <= panel.dates[-1]:
        raise ConfigError(f"horizon {horizon} outside data range")
    panel = panel.truncated(horizon)
    dates = list(panel.dates)
    obs = panel.adjusted
    t_obs = SirdTransition(country, mobility, observed, params, dates)
    t_fict = SirdTransition(country, mobility, scenario.calendar, params, dates)
    twin = TwinTransition(t_obs, t_fict, correlation)
    if init is None:
        init = initial_belief(country, params, dates[0], deaths=np.nan_to_num(obs[0]))
    # the twin starts as an exact copy of the observed country
    m = np.concatenate([init.mean, init.mean])
    p = np.block([[init.cov, init.cov], [init.cov, init.cov]])
    fout = kalman_filter(twin, obs, GaussianBelief(m, p, dates[0]), params.meas_sd, dates)
    sm = bf_smooth(fout, covariances=False)
    n = country.n
    h = 5 * n
    return CounterfactualResult(
        scenario=scenario, dates=dates, codes=country.state_codes,
        deaths=sm.means[:, :n], deaths_fict=sm.means[:, h:h + n], horizon=horizon,
        infected=sm.means[:, 2 * n:3 * n], infected_fict=sm.means[:, h + 2 * n:h + 3 * n],
    )


def run_batch(scenarios: Sequence[Scenario], panel, observed, mobility, country, params,
              threads: int = 1, **kwargs) -> list:
    """Run independent scenarios; failures come back as exceptions in place."""

    def job(sc):
        try:
            return run_counterfactual(panel, observed, sc, mobility, country, params, **kwargs)
        except (NumericalError, ConfigError) as exc:
            return exc

    if threads <= 1:
        return [job(sc) for sc in scenarios]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, scenarios))


# -- reporting -------------------------------------------------------------------

def excess_report(results: Sequence[CounterfactualResult], country: Country) -> list[dict]:
    """Per-state and national excess deaths for each result.

    ``relative`` is excess over baseline deaths at the horizon, ``None`` where
    the baseline is zero.
    """
    if len({r.horizon for r in results}) > 1:
        raise ConfigError("results must share a horizon")
    rows = []
    for res in results:
        base = res.baseline_at_horizon
        exc = res.excess
        for code, b, e in zip(country.state_codes, base, exc):
            rows.append({"scenario": res.scenario.name, "state": code, "baseline": float(b),
                         "excess": float(e), "relative": float(e / b) if b > 0 else None})
        total_b = float(base.sum())
        total_e = float(exc.sum())
        rows.append({"scenario": res.scenario.name, "state": "US", "baseline": total_b,
                     "excess": total_e, "relative": total_e / total_b if total_b > 0 else None})
    return rows


def mask_date_sweep(start_dates: Sequence, panel: DeathPanel, observed: PolicyCalendar,
                    mobility: MobilitySpec, country: Country, params: ModelParams,
                    horizon=None, threads: int = 1) -> list[tuple[Date, float]]:
    """National excess deaths for a nationwide mask mandate starting on each date."""
    horizon = panel.dates[-1] if horizon is None else to_date(horizon)
    scenarios = [
        build_scenario("STRICT", [PolicyKind.MASK], ALL_STATES, observed, country, horizon,
                       starts={PolicyKind.MASK: to_date(d)}, name=f"mask_from_{to_date(d)}")
        for d in start_dates
    ]
    out = run_batch(scenarios, panel, observed, mobility, country, params, threads, horizon=horizon)
    return [(to_date(d), r.national_excess if isinstance(r, CounterfactualResult) else float("nan"))
            for d, r in zip(start_dates, out)]
