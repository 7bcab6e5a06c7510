"""Write a synthetic country in the CSV layout the command line reads.

    python scripts/make_synthetic_data.py data/ --states 51 --days 293 --seed 1
    EPISTATE_DATA_DIR=data/ epistate smooth --out runs/smooth
"""
import argparse

from epistate import synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--states", type=int, default=51)
    ap.add_argument("--days", type=int, default=293)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--infected", type=float, default=5000.0,
                    help="initial infected per state")
    ap.add_argument("--closed", action="store_true", help="no interstate mobility")
    args = ap.parse_args()
    ds = synthetic.dataset(n=args.states, days=args.days, seed=args.seed,
                           infected=args.infected, closed=args.closed)
    d = ds.write(args.out)
    deaths = ds.panel.raw[-1].sum()
    print(f"wrote {args.states} states x {args.days} days to {d} ({deaths:,.0f} deaths by the last day)")


if __name__ == "__main__":
    main()
