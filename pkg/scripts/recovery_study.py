"""Parameter recovery on synthetic panels drawn at known (beta_bar, sigma, rho).

Each seed draws a country, mobility, calendar and one exact-model path, fits
the three free parameters from an off-truth start and checks the estimate
against the recovery bands.

    python scripts/recovery_study.py --seeds 10 --out recovery.csv
"""
import argparse
import csv

from epistate.synthetic import recovery_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--states", type=int, default=5)
    ap.add_argument("--days", type=int, default=200)
    ap.add_argument("--infected", type=float, default=5000.0)
    ap.add_argument("--max-evals", type=int, default=500)
    ap.add_argument("--out")
    args = ap.parse_args()
    rows = []
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        row = recovery_trial(seed, args.states, args.days, args.infected, max_evals=args.max_evals)
        rows.append(row)
        print(f"seed {seed}: beta_bar={row['beta_bar']:.4f} sigma={row['sigma']:.4f} "
              f"rho={row['rho']:.3f} loglik={row['loglik']:.1f} (truth {row['truth_loglik']:.1f}) "
              f"recovered={row['recovered']} ({row['seconds']:.0f}s)", flush=True)
    print(f"recovered {sum(r['recovered'] for r in rows)}/{len(rows)}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
