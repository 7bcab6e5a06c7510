"""Wall-clock timings of the national-scale passes.

Filter, both smoothers and one joint counterfactual on a synthetic country.

    python scripts/benchmark.py --states 51 --days 293
"""
import argparse
import time
import warnings

from epistate import synthetic
from epistate.core import ALL_POLICIES
from epistate.counterfactual import ALL_STATES, build_scenario, run_counterfactual
from epistate.filtering import bf_smooth, rts_smooth, run_filter


def timed(label, fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    print(f"{label:<28} {time.perf_counter() - t0:8.2f} s", flush=True)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--states", type=int, default=51)
    ap.add_argument("--days", type=int, default=293)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--skip-counterfactual", action="store_true")
    args = ap.parse_args()
    ds = synthetic.dataset(n=args.states, days=args.days, seed=args.seed, infected=5000.0)
    print(f"{args.states} states, {args.days} days, state dimension {5 * args.states}")
    fout = timed("filter", run_filter, ds.panel, ds.calendar, ds.mobility, ds.country, ds.params)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        timed("RTS smoother", rts_smooth, fout)
    timed("BF smoother", bf_smooth, fout)
    timed("BF smoother (means only)", bf_smooth, fout, covariances=False)
    if not args.skip_counterfactual:
        sc = build_scenario("STRICT", ALL_POLICIES, ALL_STATES, ds.calendar, ds.country,
                            ds.panel.dates[-1])
        timed("joint counterfactual", run_counterfactual, ds.panel, ds.calendar, sc,
              ds.mobility, ds.country, ds.params)


if __name__ == "__main__":
    main()
