"""Domain types, configuration checks and policy multipliers.

Everything here is an immutable value.  Vectors are numpy arrays indexed in
the order of :attr:`Country.state_codes`.
"""
from __future__ import annotations

import dataclasses
import datetime as _dt
import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

Date = _dt.date


class ConfigError(ValueError):
    """Raised for malformed inputs (unknown states, bad intervals, bad files)."""


class NumericalError(RuntimeError):
    """Raised when a filter step produces non-finite or singular quantities."""


class PolicyKind(str, enum.Enum):
    MASK = "MASK"
    STAY_HOME = "STAY_HOME"
    TRAVEL_BAN = "TRAVEL_BAN"

    @classmethod
    def parse(cls, token: str) -> "PolicyKind":
        try:
            return cls(token.strip().upper())
        except ValueError:
            raise ConfigError(f"unknown policy token {token!r}") from None


ALL_POLICIES = (PolicyKind.MASK, PolicyKind.STAY_HOME, PolicyKind.TRAVEL_BAN)


def to_date(value) -> Date:
    if isinstance(value, _dt.datetime):
        return value.date()
    if isinstance(value, _dt.date):
        return value
    try:
        return _dt.date.fromisoformat(str(value).strip())
    except ValueError:
        raise ConfigError(f"not an ISO date: {value!r}") from None


def date_range(start: Date, end: Date) -> list[Date]:
    """Inclusive list of consecutive days."""
    n = (end - start).days
    return [start + _dt.timedelta(days=k) for k in range(n + 1)]


@dataclass(frozen=True)
class ModelParams:
    """Scalar model constants.  Defaults are the reference calibration."""

    gamma: float = 1.0 / 14.0
    delta: float = 0.0004
    kappa: float = 0.001
    beta_bar: float = 0.16
    sigma: float = 0.05
    rho: float = 0.49
    theta_m_low: float = 0.58
    theta_s_low: float = 0.64
    theta_t_low: float = 0.10
    tau_com: float = 0.36
    tau_trav: float = 4.0
    meas_sd: float = 0.001
    dt: float = 1.0

    def replace(self, **changes) -> "ModelParams":
        unknown = set(changes) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"unknown parameter(s): {sorted(unknown)}")
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    @property
    def nu(self) -> float:
        """Variance coefficient of deaths+recoveries per infected person."""
        g, d = self.gamma, self.delta
        return ((1 - d - g) ** 2 * d + g * (1 - d - g)) / (1 - d)

    def theta_low(self, kind: PolicyKind) -> float:
        return {
            PolicyKind.MASK: self.theta_m_low,
            PolicyKind.STAY_HOME: self.theta_s_low,
            PolicyKind.TRAVEL_BAN: self.theta_t_low,
        }[kind]

    def violations(self) -> list[str]:
        out = []

        def check(ok: bool, msg: str) -> None:
            if not ok:
                out.append(msg)

        check(0 < self.gamma < 1, "gamma out of (0,1)")
        check(0 < self.delta < 1, "delta out of (0,1)")
        check(self.gamma + self.delta < 1, "gamma + delta must be < 1")
        check(0 < self.kappa < 1, "kappa out of (0,1)")
        check(self.beta_bar > 0, "beta_bar must be > 0")
        check(self.sigma > 0, "sigma must be > 0")
        check(0 <= self.rho < 1, "rho out of [0,1)")
        for name in ("theta_m_low", "theta_s_low", "theta_t_low"):
            check(0 < getattr(self, name) < 1, f"{name} out of (0,1)")
        check(0 < self.tau_com <= 1, "tau_com out of (0,1]")
        check(self.tau_trav >= 1, "tau_trav must be >= 1")
        check(self.meas_sd > 0, "meas_sd must be > 0")
        check(self.dt > 0, "dt must be > 0")
        return out


@dataclass(frozen=True)
class Country:
    state_codes: tuple[str, ...]
    populations: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "state_codes", tuple(self.state_codes))
        pops = np.asarray(self.populations, dtype=float)
        pops.setflags(write=False)
        object.__setattr__(self, "populations", pops)

    @property
    def n(self) -> int:
        return len(self.state_codes)

    def index(self, code: str) -> int:
        try:
            return self.state_codes.index(code)
        except ValueError:
            raise ConfigError(f"unknown state code {code!r}") from None

    def violations(self) -> list[str]:
        out = []
        if self.n < 1:
            out.append("country has no states")
        if len(set(self.state_codes)) != self.n:
            out.append("duplicate state codes")
        if self.populations.shape != (self.n,):
            out.append("populations length does not match state codes")
            return out
        for code, p in zip(self.state_codes, self.populations):
            if not (np.isfinite(p) and p > 0):
                out.append(f"population of {code} must be > 0 (got {p})")
        return out

    def permuted(self, order: Sequence[int]) -> "Country":
        return Country(tuple(self.state_codes[k] for k in order), self.populations[list(order)])


@dataclass(frozen=True, order=True)
class PolicyInterval:
    state: str
    kind: PolicyKind
    start: Date
    end: Date

    def covers(self, day: Date) -> bool:
        return self.start <= day <= self.end


def _merge(entries: Iterable[PolicyInterval]) -> tuple[PolicyInterval, ...]:
    groups: dict[tuple[str, PolicyKind], list[PolicyInterval]] = {}
    for e in entries:
        if e.end < e.start:
            raise ConfigError(f"{e.state} {e.kind.value}: end {e.end} before start {e.start}")
        groups.setdefault((e.state, e.kind), []).append(e)
    merged = []
    for (state, kind), items in groups.items():
        items.sort(key=lambda e: e.start)
        cur_start, cur_end = items[0].start, items[0].end
        for e in items[1:]:
            # adjacent days merge too: activity is a per-day indicator
            if e.start <= cur_end + _dt.timedelta(days=1):
                cur_end = max(cur_end, e.end)
            else:
                merged.append(PolicyInterval(state, kind, cur_start, cur_end))
                cur_start, cur_end = e.start, e.end
        merged.append(PolicyInterval(state, kind, cur_start, cur_end))
    return tuple(sorted(merged))


@dataclass(frozen=True)
class PolicyCalendar:
    """Dated per-state policy intervals; end dates are inclusive."""

    entries: tuple[PolicyInterval, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", _merge(self.entries))

    @classmethod
    def from_rows(cls, rows: Iterable[tuple]) -> "PolicyCalendar":
        return cls(tuple(
            PolicyInterval(str(s), k if isinstance(k, PolicyKind) else PolicyKind.parse(k),
                           to_date(a), to_date(b))
            for s, k, a, b in rows
        ))

    def intervals(self, state: str | None = None, kind: PolicyKind | None = None):
        return [e for e in self.entries
                if (state is None or e.state == state) and (kind is None or e.kind == kind)]

    def is_active(self, state: str, kind: PolicyKind, day: Date) -> bool:
        day = to_date(day)
        return any(e.covers(day) for e in self.intervals(state, kind))

    def without(self, kinds: Iterable[PolicyKind], states: Iterable[str] | None = None) -> "PolicyCalendar":
        kinds = set(kinds)
        states = None if states is None else set(states)
        return PolicyCalendar(tuple(
            e for e in self.entries
            if not (e.kind in kinds and (states is None or e.state in states))
        ))

    def plus(self, extra: Iterable[PolicyInterval]) -> "PolicyCalendar":
        return PolicyCalendar(self.entries + tuple(extra))

    def violations(self, country: Country) -> list[str]:
        known = set(country.state_codes)
        return [f"calendar entry {e.state} {e.kind.value} {e.start}: unknown state code {e.state!r}"
                for e in self.entries if e.state not in known]

    def activity(self, country: Country, dates: Sequence[Date]) -> np.ndarray:
        """Boolean array ``(len(dates), N, 3)`` in ``ALL_POLICIES`` order."""
        dates = list(dates)
        out = np.zeros((len(dates), country.n, 3), dtype=bool)
        if not dates:
            return out
        origin = dates[0]
        offsets = np.array([(d - origin).days for d in dates])
        for e in self.entries:
            j = country.index(e.state)
            k = ALL_POLICIES.index(e.kind)
            lo, hi = (e.start - origin).days, (e.end - origin).days
            out[(offsets >= lo) & (offsets <= hi), j, k] = True
        return out


@dataclass(frozen=True)
class PolicyMultipliers:
    theta_m: np.ndarray
    theta_s: np.ndarray
    theta_t: np.ndarray

    @classmethod
    def ones(cls, n: int) -> "PolicyMultipliers":
        return cls(np.ones(n), np.ones(n), np.ones(n))

    @classmethod
    def from_activity(cls, active: np.ndarray, params: ModelParams) -> "PolicyMultipliers":
        """``active`` is an ``(N, 3)`` boolean slice of :meth:`PolicyCalendar.activity`."""
        lows = [params.theta_low(k) for k in ALL_POLICIES]
        cols = [np.where(active[:, k], lows[k], 1.0) for k in range(3)]
        return cls(theta_m=cols[0], theta_s=cols[1], theta_t=cols[2])

    @property
    def transmission(self) -> np.ndarray:
        """Combined multiplier on the transmission rate (mask times stay-home)."""
        return self.theta_m * self.theta_s


def multipliers_at(calendar: PolicyCalendar, params: ModelParams, country: Country,
                   day) -> PolicyMultipliers:
    """Policy multipliers in force on ``day`` for every state."""
    day = to_date(day)
    bad = calendar.violations(country)
    if bad:
        raise ConfigError(bad[0])
    return PolicyMultipliers.from_activity(calendar.activity(country, [day])[0], params)


def multiplier_path(calendar: PolicyCalendar, params: ModelParams, country: Country,
                    dates: Sequence[Date]) -> list[PolicyMultipliers]:
    bad = calendar.violations(country)
    if bad:
        raise ConfigError(bad[0])
    act = calendar.activity(country, dates)
    return [PolicyMultipliers.from_activity(a, params) for a in act]


@dataclass(frozen=True)
class LatentState:
    """Per-state compartments plus the exogenous transmission rate."""

    d: np.ndarray
    s: np.ndarray
    i: np.ndarray
    r: np.ndarray
    beta0: np.ndarray

    @property
    def n(self) -> int:
        return len(self.s)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.d, self.s, self.i, self.r, self.beta0]).astype(float)

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "LatentState":
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size % 5:
            raise ValueError(f"state vector length {x.shape} is not a multiple of 5")
        d, s, i, r, b = np.split(x, 5)
        return cls(d, s, i, r, b)

    @classmethod
    def initial(cls, country: Country, params: ModelParams, infected=100.0,
                deaths=0.0) -> "LatentState":
        n = country.n
        i = np.broadcast_to(np.asarray(infected, dtype=float), (n,)).copy()
        d = np.broadcast_to(np.asarray(deaths, dtype=float), (n,)).copy()
        return cls(d=d, s=country.populations - i - d, i=i, r=np.zeros(n),
                   beta0=np.full(n, params.beta_bar))

    def totals(self) -> np.ndarray:
        return self.d + self.s + self.i + self.r


def validate(country: Country, params: ModelParams, calendar: PolicyCalendar | None = None,
             mobility=None) -> list[str]:
    """Every invariant violation across the configuration; empty means ok."""
    out = list(country.violations()) + params.violations()
    if calendar is not None:
        out += calendar.violations(country)
    if mobility is not None:
        out += mobility.violations(country)
    return out
