"""File formats: CSV inputs, the ``key = value`` parameter file, scenario
files, output tables with metadata sidecars, and the remote deaths fetch.
"""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io as _io
import json
import logging
import os
import tempfile
import urllib.error
import urllib.request
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .core import (ALL_POLICIES, ConfigError, Country, ModelParams, PolicyCalendar, PolicyKind,
                   date_range, to_date)
from .counterfactual import ALL_STATES, Scenario, build_scenario, identity_scenario
from .estimation import DeathPanel
from .mobility import MobilitySpec

log = logging.getLogger(__name__)

# 50 states, DC and the territories that appear in historical death feeds
KNOWN_CODES = frozenset("""
AK AL AR AZ CA CO CT DC DE FL GA HI IA ID IL IN KS KY LA MA MD ME MI MN MO MS MT NC ND NE NH NJ
NM NV NY OH OK OR PA RI SC SD TN TX UT VA VT WA WI WV WY AS GU MP PR VI
""".split())

DEATHS_HEADER = ("date", "state", "cumulative_deaths")
MOBILITY_HEADER = ("origin", "destination", "daily_fraction")
POLICY_HEADER = ("state", "policy", "start_date", "end_date")
POPULATION_HEADER = ("state", "population")
MAX_DIP = 0.05


class FetchError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_rows(path, header: Sequence[str]):
    """Yield ``(line_number, row_dict)``; an empty file yields nothing."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return
        got = tuple(c.strip() for c in first)
        if got != tuple(header):
            raise ConfigError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, dict(zip(header, (c.strip() for c in row)))


def _known(code: str, country: Country | None) -> bool:
    return code in country.state_codes if country is not None else code in KNOWN_CODES


def load_populations(path) -> Country:
    codes, pops = [], []
    for lineno, row in _read_rows(path, POPULATION_HEADER):
        try:
            pops.append(float(row["population"]))
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad population {row['population']!r}") from None
        codes.append(row["state"])
    country = Country(tuple(codes), np.array(pops))
    bad = country.violations()
    if bad:
        raise ConfigError(f"{path}: {bad[0]}")
    return country


def load_deaths(path, country: Country | None = None) -> DeathPanel:
    """Dense date x state panel of cumulative deaths.

    Interior gaps are forward-filled and small dips (under 5% of the running
    maximum) are lifted to the running maximum, both with a warning.
    """
    values: dict[tuple, float] = {}
    states: list[str] = []
    skipped: set[str] = set()
    for lineno, row in _read_rows(path, DEATHS_HEADER):
        code = row["state"]
        if not _known(code, country):
            if country is not None and code in KNOWN_CODES:
                # a real jurisdiction the model does not include
                skipped.add(code)
                continue
            raise ConfigError(f"{path}:{lineno}: unknown state code {code!r}")
        try:
            day = to_date(row["date"])
            val = float(row["cumulative_deaths"])
        except (ConfigError, ValueError):
            raise ConfigError(f"{path}:{lineno}: cannot parse {row}") from None
        key = (day, code)
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate row for {code} on {day}")
        values[key] = val
        if code not in states:
            states.append(code)
    if skipped:
        log.warning("%s: ignoring jurisdictions outside the model: %s", path, ", ".join(sorted(skipped)))
    if not values:
        raise ConfigError(f"{path}: no death records")
    codes = list(country.state_codes) if country is not None else sorted(states)
    days = sorted({d for d, _ in values})
    dates = date_range(days[0], days[-1])
    raw = np.full((len(dates), len(codes)), np.nan)
    pos = {d: k for k, d in enumerate(dates)}
    col = {c: j for j, c in enumerate(codes)}
    for (d, c), v in values.items():
        raw[pos[d], col[c]] = v
    for j, code in enumerate(codes):
        series = raw[:, j]
        seen = np.flatnonzero(~np.isnan(series))
        if seen.size == 0:
            log.warning("%s: no records for %s; assuming zero deaths", path, code)
            series[:] = 0.0
            continue
        series[:seen[0]] = 0.0
        gaps = np.isnan(series)
        if gaps.any():
            log.warning("%s: forward-filling %d missing day(s) for %s", path, gaps.sum(), code)
            for k in np.flatnonzero(gaps):
                series[k] = series[k - 1]
        running = np.maximum.accumulate(series)
        dips = series < running
        if dips.any():
            worst = np.max((running - series)[dips] / np.maximum(running[dips], 1.0))
            if worst > MAX_DIP:
                k = int(np.flatnonzero(dips)[0])
                raise ConfigError(f"{path}: cumulative deaths for {code} fall by more than "
                                  f"{MAX_DIP:.0%} on {dates[k]}")
            log.warning("%s: lifting %d small dip(s) for %s to the running maximum",
                        path, dips.sum(), code)
            raw[:, j] = running
    return DeathPanel(tuple(dates), tuple(codes), raw)


def write_deaths(path, panel: DeathPanel, adjusted: bool = False) -> None:
    data = panel.adjusted if adjusted else panel.raw
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEATHS_HEADER)
        for k, d in enumerate(panel.dates):
            for j, c in enumerate(panel.codes):
                w.writerow([d.isoformat(), c, _fmt(data[k, j])])


def _matrix(path, country: Country) -> np.ndarray:
    n = country.n
    w = np.zeros((n, n))
    if path is None:
        return w
    for lineno, row in _read_rows(path, MOBILITY_HEADER):
        o, d = row["origin"], row["destination"]
        for code in (o, d):
            if code not in country.state_codes:
                raise ConfigError(f"{path}:{lineno}: unknown state code {code!r}")
        if o == d:
            raise ConfigError(f"{path}:{lineno}: self-loop {o}->{d} (diagonal must be zero)")
        try:
            f = float(row["daily_fraction"])
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad fraction {row['daily_fraction']!r}") from None
        if not 0 <= f < 1:
            raise ConfigError(f"{path}:{lineno}: fraction {f} outside [0,1)")
        w[country.index(o), country.index(d)] = f
    sums = w.sum(axis=1)
    for j in np.flatnonzero(sums >= 1):
        raise ConfigError(f"{path}: outflow fractions of {country.state_codes[j]} sum to {sums[j]:.4f} >= 1")
    return w


def load_mobility(travel_path, commute_path, country: Country) -> MobilitySpec:
    """Travel and commute matrices; absent pairs are zero, ``None`` paths give zeros."""
    return MobilitySpec(_matrix(travel_path, country), _matrix(commute_path, country))


def load_policies(path, country: Country | None = None) -> PolicyCalendar:
    rows = []
    for lineno, row in _read_rows(path, POLICY_HEADER):
        code = row["state"]
        if not _known(code, country):
            raise ConfigError(f"{path}:{lineno}: unknown state code {code!r}")
        try:
            kind = PolicyKind.parse(row["policy"])
            start, end = to_date(row["start_date"]), to_date(row["end_date"])
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        if end < start:
            raise ConfigError(f"{path}:{lineno}: end {end} before start {start}")
        rows.append((code, kind, start, end))
    return PolicyCalendar.from_rows(rows)


def write_policies(path, calendar: PolicyCalendar) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POLICY_HEADER)
        for e in calendar.entries:
            w.writerow([e.state, e.kind.value, e.start.isoformat(), e.end.isoformat()])


# -- parameters ------------------------------------------------------------------

def parse_params(text: str, base: ModelParams | None = None, source: str = "<params>") -> ModelParams:
    """``key = value`` lines with ModelParams field names; ``#`` starts a comment."""
    base = base or ModelParams()
    known = set(base.as_dict())
    changes = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown parameter {key!r}")
        try:
            changes[key] = float(value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: {key} is not a number: {value!r}") from None
    return base.replace(**changes)


def load_params(path, base: ModelParams | None = None) -> ModelParams:
    return parse_params(Path(path).read_text(encoding="utf-8"), base, str(path))


def format_params(params: ModelParams) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in params.as_dict().items())


# -- scenarios -------------------------------------------------------------------

def _policies(token: str) -> list[PolicyKind]:
    token = token.strip()
    if token.upper() == "ALL":
        return list(ALL_POLICIES)
    return [PolicyKind.parse(t) for t in token.split(",") if t.strip()]


def parse_scenarios(text: str, observed: PolicyCalendar, country: Country, horizon,
                    source: str = "<scenarios>") -> list[Scenario]:
    """One scenario per line: ``name | kind | policies | scope | overrides``.

    ``kind`` is STRICT, LOOSE or OBSERVED; ``policies`` is ``ALL`` or a comma
    list; ``scope`` is ``ALL`` or a state code; ``overrides`` is a comma list of
    ``POLICY.start=YYYY-MM-DD`` (may be empty).
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) == 4:
            parts.append("")
        if len(parts) != 5:
            raise ConfigError(f"{source}:{lineno}: expected 5 '|'-separated fields")
        name, kind, pols, scope, overrides = parts
        scope = ALL_STATES if scope.upper() == "ALL" else scope
        try:
            if kind.upper() == "OBSERVED":
                sc = identity_scenario(observed, scope)
                out.append(Scenario(name, sc.calendar, scope, sc.description))
                continue
            starts = {}
            for ov in filter(None, (o.strip() for o in overrides.split(","))):
                key, _, value = ov.partition("=")
                pol, _, attr = key.strip().partition(".")
                if attr != "start":
                    raise ConfigError(f"unsupported override {ov!r}")
                starts[PolicyKind.parse(pol)] = to_date(value)
            out.append(build_scenario(kind, _policies(pols), scope, observed, country, horizon,
                                      starts=starts, name=name))
        except (ConfigError, ValueError) as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def load_scenarios(path, observed, country, horizon) -> list[Scenario]:
    return parse_scenarios(Path(path).read_text(encoding="utf-8"), observed, country, horizon, str(path))


BUILTIN_SCENARIOS = """
strict_all        | STRICT | ALL        | ALL |
strict_stay_home  | STRICT | STAY_HOME  | ALL |
strict_mask       | STRICT | MASK       | ALL |
strict_travel_ban | STRICT | TRAVEL_BAN | ALL |
loose_all         | LOOSE  | ALL        | ALL |
loose_stay_home   | LOOSE  | STAY_HOME  | ALL |
loose_mask        | LOOSE  | MASK       | ALL |
loose_travel_ban  | LOOSE  | TRAVEL_BAN | ALL |
early_mask        | STRICT | MASK       | ALL | MASK.start=2020-03-19
early_travel_ban  | STRICT | TRAVEL_BAN | ALL | TRAVEL_BAN.start=2020-02-12
observed          | OBSERVED | ALL      | ALL |
"""


def builtin_scenarios(observed, country, horizon) -> dict[str, Scenario]:
    return {s.name: s for s in parse_scenarios(BUILTIN_SCENARIOS, observed, country, horizon, "<builtin>")}


# -- outputs ---------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, columns: Sequence[str], rows: Iterable, metadata: dict | None = None) -> Path:
    """CSV with a fixed column order plus a ``<name>.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(c) for c in columns]
            w.writerow([_fmt(v) for v in row])
    if metadata is not None:
        write_metadata(path, metadata)
    return path


def write_metadata(path, metadata: dict) -> Path:
    side = Path(str(path) + ".meta.json")
    meta = {"version": __version__, **metadata}
    side.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return side


def run_metadata(params: ModelParams, inputs: dict, seed=None, command: str = "") -> dict:
    return {
        "command": command,
        "params": params.as_dict(),
        "inputs": {k: (sha256_file(v) if v and Path(v).exists() else None) for k, v in sorted(inputs.items())},
        "seed": seed,
    }


# -- remote fetch ------------------------------------------------------------------

def _records_from_payload(payload: bytes, content_type: str) -> list[tuple[str, str, float]]:
    text = payload.decode("utf-8")
    stripped = text.lstrip()
    records = []
    if "json" in content_type or stripped.startswith(("[", "{")):
        data = json.loads(text)
        if isinstance(data, dict):
            data = data.get("data", data.get("records"))
        if not isinstance(data, list):
            raise FetchError("JSON payload is not a list of records")
        for rec in data:
            try:
                date = str(rec["date"])
                state = str(rec["state"])
                deaths = rec.get("death", rec.get("cumulative_deaths"))
            except (KeyError, TypeError, AttributeError):
                raise FetchError(f"record without date/state: {rec!r}") from None
            records.append((date, state, deaths))
    else:
        reader = csv.DictReader(_io.StringIO(text))
        fields = set(reader.fieldnames or ())
        col = "cumulative_deaths" if "cumulative_deaths" in fields else "death"
        if not {"date", "state", col} <= fields:
            raise FetchError(f"CSV payload lacks date/state/{col} columns: {sorted(fields)}")
        records = [(r["date"], r["state"], r[col]) for r in reader]
    out = []
    for date, state, deaths in records:
        if len(date) == 8 and date.isdigit():
            date = f"{date[:4]}-{date[4:6]}-{date[6:]}"
        try:
            day = to_date(date)
        except ConfigError as exc:
            raise FetchError(str(exc)) from None
        if deaths in (None, ""):
            continue
        out.append((day.isoformat(), state, float(deaths)))
    out.sort()
    return out


def fetch_deaths(url: str, output, timeout: float = 30.0) -> dict:
    """Download a historical state death feed and write it in the deaths schema.

    The file appears atomically or not at all.  Returns the metadata written to
    the sidecar (retrieval time, payload and output hashes).
    """
    output = Path(output)
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            payload = resp.read()
            ctype = resp.headers.get("Content-Type", "")
    except urllib.error.HTTPError as exc:
        raise FetchError(f"HTTP {exc.code} from {url}") from None
    except (urllib.error.URLError, OSError) as exc:
        raise FetchError(f"cannot reach {url}: {exc}") from None
    try:
        records = _records_from_payload(payload, ctype)
    except (ValueError, UnicodeDecodeError) as exc:
        raise FetchError(f"unexpected payload from {url}: {exc}") from None

    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DEATHS_HEADER)
    for day, state, deaths in records:
        w.writerow([day, state, _fmt(deaths) if deaths != int(deaths) else int(deaths)])
    body = buf.getvalue().encode("utf-8")

    output.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=output.parent, prefix=output.name, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
        os.replace(tmp, output)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    meta = {
        "source_url": url,
        "retrieved_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "content_sha256": hashlib.sha256(body).hexdigest(),
        "rows": len(records),
    }
    write_metadata(output, meta)
    return meta
