"""Command-line entry point.

Inputs default to files under ``$EPISTATE_DATA_DIR`` (``deaths.csv``,
``travel.csv``, ``commute.csv``, ``policies.csv``, ``populations.csv`` and an
optional ``params.txt``).  Every command writes its tables to ``--out`` with a
``.meta.json`` sidecar and a ``summary.json`` for the run.

Exit status: 0 on success, 1 on a domain error (bad input, numerical
failure, fetch failure), 2 on a usage error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .core import (ConfigError, Country, LatentState, ModelParams, NumericalError, PolicyCalendar,
                   date_range, to_date, validate)
from .counterfactual import (CounterfactualResult, Scenario, excess_report,
                             mask_date_sweep, run_batch)
from .dynamics import D, I, S, effective_r, simulate_path
from .estimation import DeathPanel, fit, seasonal_adjust, sensitivity_sweep
from .filtering import SirdTransition, bf_smooth, rts_smooth, run_filter
from .mobility import MobilitySpec
from .io import (FetchError, builtin_scenarios, fetch_deaths, format_params, load_deaths,
                 load_mobility, load_params, load_policies, load_populations, load_scenarios,
                 run_metadata, write_deaths, write_metadata, write_table)

log = logging.getLogger("epistate")

COMMANDS = ("validate", "fit", "filter", "smooth", "rt", "simulate", "counterfactual", "sweep", "fetch")
DEFAULT_FILES = {
    "deaths": "deaths.csv",
    "travel": "travel.csv",
    "commute": "commute.csv",
    "policies": "policies.csv",
    "populations": "populations.csv",
    "params": "params.txt",
}
COMPARTMENTS = ("D", "S", "I", "R", "beta")


class UsageError(Exception):
    pass


# -- argument parsing -------------------------------------------------------------

def _inputs(p: argparse.ArgumentParser, deaths: bool = True) -> None:
    g = p.add_argument_group("inputs")
    g.add_argument("--data-dir", default=os.environ.get("EPISTATE_DATA_DIR"),
                   help="default input root (env EPISTATE_DATA_DIR)")
    if deaths:
        g.add_argument("--deaths", help="cumulative deaths CSV")
        g.add_argument("--adjust", default="moving_average",
                       choices=("moving_average", "stl", "none"),
                       help="weekly seasonal adjustment of deaths")
    g.add_argument("--travel", help="travel flows CSV")
    g.add_argument("--commute", help="commuting flows CSV")
    g.add_argument("--policies", help="policy calendar CSV")
    g.add_argument("--populations", help="state populations CSV")
    g.add_argument("--params", help="key = value parameter file")


def _output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epistate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("validate", help="check inputs against every invariant")
    _inputs(p)

    p = sub.add_parser("fit", help="quasi-ML estimate of beta_bar, sigma, rho")
    _inputs(p)
    _output(p)
    p.add_argument("--horizon", help="last date used")
    p.add_argument("--max-evals", type=int, default=500)

    for name, text in (("filter", "filtered states"), ("smooth", "smoothed states"),
                       ("rt", "effective reproduction numbers")):
        p = sub.add_parser(name, help=text)
        _inputs(p)
        _output(p)
        p.add_argument("--horizon", help="last date used")
        if name != "filter":
            p.add_argument("--smoother", choices=("rts", "bf"), default="rts")

    p = sub.add_parser("simulate", help="draw one individual-level trajectory")
    _inputs(p, deaths=False)
    _output(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--start", default="2020-02-12")
    p.add_argument("--horizon", default="2020-11-30")
    p.add_argument("--infected", type=float, default=100.0, help="initial infected per state")

    p = sub.add_parser("counterfactual", help="excess deaths under alternative policies")
    _inputs(p)
    _output(p)
    p.add_argument("--scenario", action="append", default=[],
                   help="built-in or scenario-file name (repeatable)")
    p.add_argument("--scenario-file", help="'name | kind | policies | scope | overrides' lines")
    p.add_argument("--each-state", action="store_true",
                   help="run every selected scenario once per state instead of jointly")
    p.add_argument("--horizon")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("sweep", help="sensitivity re-fits or a mask start-date sweep")
    _inputs(p)
    _output(p)
    p.add_argument("--override", action="append", default=[],
                   help="NAME=VALUE[,NAME=VALUE...]; one table row per flag")
    p.add_argument("--scenario", action="append", default=[])
    p.add_argument("--scenario-file")
    p.add_argument("--no-refit", action="store_true")
    p.add_argument("--max-evals", type=int, default=500)
    p.add_argument("--mask-dates", help="START:END[:STEP_DAYS] nationwide mask start dates")
    p.add_argument("--horizon")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("fetch", help="download historical state death counts")
    p.add_argument("--url", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--timeout", type=float, default=30.0)
    return parser


# -- input resolution --------------------------------------------------------------

def _resolve(args, key: str, required: bool) -> Path | None:
    given = getattr(args, key, None)
    root = Path(args.data_dir) if args.data_dir else None
    if given:
        path = Path(given)
        if not path.is_absolute() and not path.exists() and root is not None:
            path = root / path
    elif root is not None:
        path = root / DEFAULT_FILES[key]
        if not path.exists() and not required:
            return None
    else:
        if required:
            raise ConfigError(f"no --{key} file given and no data directory set")
        return None
    if not path.exists():
        raise ConfigError(f"{key} file not found: {path}")
    return path


@dataclass
class Inputs:
    country: Country
    params: ModelParams
    calendar: PolicyCalendar
    mobility: MobilitySpec
    panel: DeathPanel | None
    paths: dict


def load_inputs(args, deaths: bool = True) -> Inputs:
    paths = {
        "populations": _resolve(args, "populations", True),
        "travel": _resolve(args, "travel", False),
        "commute": _resolve(args, "commute", False),
        "policies": _resolve(args, "policies", False),
        "params": _resolve(args, "params", False),
    }
    if deaths:
        paths["deaths"] = _resolve(args, "deaths", True)
    country = load_populations(paths["populations"])
    params = load_params(paths["params"]) if paths["params"] else ModelParams()
    calendar = load_policies(paths["policies"], country) if paths["policies"] else PolicyCalendar(())
    mobility = load_mobility(paths["travel"], paths["commute"], country)
    panel = None
    if deaths:
        panel = load_deaths(paths["deaths"], country)
        horizon = getattr(args, "horizon", None)
        if horizon:
            panel = panel.truncated(to_date(horizon))
        if args.adjust != "none":
            panel = seasonal_adjust(panel, args.adjust)
    return Inputs(country, params, calendar, mobility, panel,
                  {k: str(v) for k, v in paths.items() if v is not None})


def _check(inp: Inputs) -> None:
    bad = validate(inp.country, inp.params, inp.calendar, inp.mobility)
    if bad:
        raise ConfigError("; ".join(bad))


def _meta(inp: Inputs, command: str, seed=None) -> dict:
    return run_metadata(inp.params, inp.paths, seed=seed, command=command)


def _summary(out: Path, meta: dict, **results) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"version": __version__, **meta, "results": results}
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n",
                                      encoding="utf-8")


def _long_rows(dates, codes, means, sds=None):
    """Plot-ready ``date, series, value`` rows for every compartment and state."""
    n = len(codes)
    for k, day in enumerate(dates):
        for b, comp in enumerate(COMPARTMENTS):
            for j, code in enumerate(codes):
                yield day.isoformat(), f"{comp}:{code}", means[k, b * n + j]
                if sds is not None:
                    yield day.isoformat(), f"{comp}_sd:{code}", sds[k, b * n + j]


def _sds(covs: np.ndarray) -> np.ndarray:
    return np.sqrt(np.clip(np.diagonal(covs, axis1=1, axis2=2), 0, None))


# -- commands -----------------------------------------------------------------------

def cmd_validate(args) -> int:
    inp = load_inputs(args)
    bad = validate(inp.country, inp.params, inp.calendar, inp.mobility)
    missing = [c for c in inp.country.state_codes if not np.any(inp.panel.raw[:, inp.country.index(c)])]
    for code in missing:
        print(f"warning: no deaths recorded for {code}", file=sys.stderr)
    for msg in bad:
        print(f"invalid: {msg}", file=sys.stderr)
    if bad:
        return 1
    print(f"ok: {inp.country.n} states, {len(inp.panel)} days "
          f"({inp.panel.dates[0]} to {inp.panel.dates[-1]}), {len(inp.calendar.entries)} policy intervals")
    return 0


def cmd_fit(args) -> int:
    inp = load_inputs(args)
    _check(inp)
    res = fit(inp.panel, inp.calendar, inp.mobility, inp.country, inp.params, max_evals=args.max_evals)
    out = Path(args.out)
    meta = _meta(inp, "fit")
    row = res.as_row()
    write_table(out / "fit.csv", list(row), [row], meta)
    (out / "params_fitted.txt").write_text(format_params(res.params(inp.params)), encoding="utf-8")
    _summary(out, meta, fit=row)
    print(f"beta_bar={res.beta_bar:.6g} sigma={res.sigma:.6g} rho={res.rho:.6g} "
          f"loglik={res.loglik:.6g} converged={res.converged}")
    return 0


def _filtered(inp: Inputs):
    return run_filter(inp.panel, inp.calendar, inp.mobility, inp.country, inp.params)


def cmd_filter(args) -> int:
    inp = load_inputs(args)
    _check(inp)
    fout = _filtered(inp)
    out = Path(args.out)
    meta = _meta(inp, "filter")
    write_table(out / "filtered.csv", ("date", "series", "value"),
                _long_rows(fout.dates, inp.country.state_codes, fout.means(), _sds(fout.covs())), meta)
    write_table(out / "loglik.csv", ("date", "loglik"),
                ((d.isoformat(), v) for d, v in zip(fout.dates, fout.increments)), meta)
    _summary(out, meta, loglik=fout.loglik, days=len(fout.dates))
    print(f"loglik={fout.loglik:.6f}")
    return 0


def _smoothed(inp: Inputs, method: str):
    fout = _filtered(inp)
    return fout, (bf_smooth if method == "bf" else rts_smooth)(fout)


def cmd_smooth(args) -> int:
    inp = load_inputs(args)
    _check(inp)
    fout, sm = _smoothed(inp, args.smoother)
    out = Path(args.out)
    meta = _meta(inp, "smooth")
    write_table(out / "smoothed.csv", ("date", "series", "value"),
                _long_rows(sm.dates, inp.country.state_codes, sm.means, _sds(sm.covs)), meta)
    n = inp.country.n
    gap = float(np.max(np.abs(sm.means[:, :n] - inp.panel.adjusted)))
    _summary(out, meta, loglik=fout.loglik, smoother=args.smoother, max_death_gap=gap)
    print(f"smoothed {len(sm.dates)} days; max |D - observed| = {gap:.3g}")
    return 0


def rt_table(inp: Inputs, means: np.ndarray, dates) -> list[tuple]:
    """Per-state and national R_t rows; national is the infected-weighted mean."""
    n = inp.country.n
    tr = SirdTransition(inp.country, inp.mobility, inp.calendar, inp.params, dates)
    rows = []
    for k, day in enumerate(dates):
        th = tr.thetas[k]
        s, i, b = (means[k, blk * n:(blk + 1) * n] for blk in (S, I, 4))
        r = effective_r(np.maximum(b, 0), th.theta_m, th.theta_s, s, inp.country, inp.params)
        for code, v in zip(inp.country.state_codes, r):
            rows.append((day.isoformat(), f"R:{code}", v))
        w = np.maximum(i, 0)
        nat = float(w @ r / w.sum()) if w.sum() > 0 else float(r.mean())
        rows.append((day.isoformat(), "R:US", nat))
    return rows


def cmd_rt(args) -> int:
    inp = load_inputs(args)
    _check(inp)
    _, sm = _smoothed(inp, args.smoother)
    rows = rt_table(inp, sm.means, sm.dates)
    out = Path(args.out)
    meta = _meta(inp, "rt")
    write_table(out / "rt.csv", ("date", "series", "value"), rows, meta)
    _summary(out, meta, smoother=args.smoother, days=len(sm.dates))
    print(f"wrote {len(rows)} R_t values")
    return 0


def cmd_simulate(args) -> int:
    inp = load_inputs(args, deaths=False)
    _check(inp)
    dates = date_range(to_date(args.start), to_date(args.horizon))
    if len(dates) < 2:
        raise ConfigError("simulation needs at least two dates")
    tr = SirdTransition(inp.country, inp.mobility, inp.calendar, inp.params, dates)
    x0 = LatentState.initial(inp.country, inp.params, infected=np.rint(args.infected)).to_vector()
    path = simulate_path(x0, tr.thetas[:-1], tr.mobs[:-1], inp.params, inp.country.populations, args.seed)
    out = Path(args.out)
    meta = _meta(inp, "simulate", seed=args.seed)
    write_table(out / "simulated.csv", ("date", "series", "value"),
                _long_rows(dates, inp.country.state_codes, path), meta)
    n = inp.country.n
    panel = DeathPanel(dates, inp.country.state_codes, path[:, D * n:(D + 1) * n])
    write_deaths(out / "simulated_deaths.csv", panel)
    write_metadata(out / "simulated_deaths.csv", meta)
    _summary(out, meta, days=len(dates), final_deaths=float(path[-1, :n].sum()))
    print(f"simulated {len(dates)} days; total deaths {path[-1, :n].sum():.0f}")
    return 0


def _scenarios(args, inp: Inputs, horizon) -> list[Scenario]:
    table = builtin_scenarios(inp.calendar, inp.country, horizon)
    from_file = []
    if args.scenario_file:
        from_file = load_scenarios(args.scenario_file, inp.calendar, inp.country, horizon)
        table.update({s.name: s for s in from_file})
    if not args.scenario:
        return from_file
    chosen = []
    for name in args.scenario:
        if name not in table:
            raise ConfigError(f"unknown scenario {name!r}; known: {', '.join(sorted(table))}")
        chosen.append(table[name])
    return chosen


def _per_state(sc: Scenario, inp: Inputs) -> list[Scenario]:
    """Restrict a nationwide scenario to one state at a time."""
    out = []
    for code in inp.country.state_codes:
        fict = [e for e in sc.calendar.entries if e.state == code]
        keep = [e for e in inp.calendar.entries if e.state != code]
        out.append(Scenario(f"{sc.name}_{code}", PolicyCalendar(tuple(keep + fict)), code,
                            f"{sc.description} (only {code})"))
    return out


def cmd_counterfactual(args) -> int:
    inp = load_inputs(args)
    _check(inp)
    horizon = to_date(args.horizon) if args.horizon else inp.panel.dates[-1]
    scenarios = _scenarios(args, inp, horizon)
    if not scenarios:
        raise UsageError("give --scenario and/or --scenario-file")
    if args.each_state:
        scenarios = [s for sc in scenarios for s in _per_state(sc, inp)]
    results = run_batch(scenarios, inp.panel, inp.calendar, inp.mobility, inp.country, inp.params,
                        threads=args.threads, horizon=horizon)
    failed = [(sc.name, r) for sc, r in zip(scenarios, results) if not isinstance(r, CounterfactualResult)]
    good = [r for r in results if isinstance(r, CounterfactualResult)]
    out = Path(args.out)
    meta = _meta(inp, "counterfactual")
    report = excess_report(good, inp.country)
    write_table(out / "excess.csv", ("scenario", "state", "baseline", "excess", "relative"), report, meta)

    def traj():
        for res in good:
            for k, day in enumerate(res.dates):
                for j, code in enumerate(inp.country.state_codes):
                    yield res.scenario.name, day.isoformat(), f"D:{code}", res.deaths[k, j]
                    yield res.scenario.name, day.isoformat(), f"D*:{code}", res.deaths_fict[k, j]

    write_table(out / "counterfactual.csv", ("scenario", "date", "series", "value"), traj(), meta)
    national = {r.scenario.name: r.national_excess for r in good}
    _summary(out, meta, horizon=horizon, national_excess=national,
             failures={name: str(e) for name, e in failed})
    for name, value in national.items():
        print(f"{name}: national excess {value:+.0f}")
    for name, exc in failed:
        print(f"{name}: failed: {exc}", file=sys.stderr)
    return 1 if failed and not good else 0


def _parse_override(text: str) -> dict:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, value = part.partition("=")
        if not sep:
            raise UsageError(f"override {part!r} is not NAME=VALUE")
        try:
            out[key.strip()] = float(value)
        except ValueError:
            raise UsageError(f"override {part!r}: value is not a number") from None
    return out


def _mask_dates(text: str) -> list[_dt.date]:
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise UsageError("--mask-dates takes START:END[:STEP_DAYS]")
    step = int(parts[2]) if len(parts) == 3 else 1
    if step < 1:
        raise UsageError("mask date step must be >= 1")
    return date_range(to_date(parts[0]), to_date(parts[1]))[::step]


def cmd_sweep(args) -> int:
    overrides = [_parse_override(t) for t in args.override]
    mask_dates = _mask_dates(args.mask_dates) if args.mask_dates else []
    if not overrides and not mask_dates:
        raise UsageError("give --override and/or --mask-dates")
    inp = load_inputs(args)
    _check(inp)
    horizon = to_date(args.horizon) if args.horizon else inp.panel.dates[-1]
    out = Path(args.out)
    meta = _meta(inp, "sweep")
    results = {}
    if overrides:
        scenarios = _scenarios(args, inp, horizon)
        rows = sensitivity_sweep(overrides, inp.panel, inp.calendar, inp.mobility, inp.country,
                                 inp.params, scenarios=scenarios, refit=not args.no_refit,
                                 fit_kwargs={"max_evals": args.max_evals})
        table = [r.as_row() for r in rows]
        cols = list(dict.fromkeys(k for row in table for k in row))
        write_table(out / "sweep.csv", cols, table, meta)
        results["sweep_errors"] = sum(bool(r.error) for r in rows)
    if mask_dates:
        curve = mask_date_sweep(mask_dates, inp.panel, inp.calendar, inp.mobility, inp.country,
                                inp.params, horizon=horizon, threads=args.threads)
        write_table(out / "mask_sweep.csv", ("start_date", "national_excess"),
                    ((d.isoformat(), v) for d, v in curve), meta)
        results["mask_sweep"] = {d.isoformat(): v for d, v in curve}
    _summary(out, meta, **results)
    print(f"sweep written to {out}")
    return 0


def cmd_fetch(args) -> int:
    meta = fetch_deaths(args.url, args.output, timeout=args.timeout)
    print(f"wrote {meta['rows']} rows to {args.output} (sha256 {meta['content_sha256'][:12]})")
    return 0


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def dispatch(argv: list[str] | None = None) -> int:
    """Parse ``argv`` and run one command; returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"epistate {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, NumericalError, FetchError, FileNotFoundError) as exc:
        print(f"epistate {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
