"""Late-enrollment day-count pmf for several availability parameters, as CSV.

    python scripts/betabinom_pmf.py --out runs/betabinom_pmf.csv
"""
import argparse

import numpy as np
import pandas as pd

from guidevae.preprocess import betabinom_pmf, expected_missing_days


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--a", type=float, default=0.85)
    parser.add_argument("--b", default="2,3,5,10,20,30,50")
    parser.add_argument("--n", type=int, default=365)
    parser.add_argument("--out", default="betabinom_pmf.csv")
    args = parser.parse_args()

    m = np.arange(args.n + 1)
    frame = pd.DataFrame({"missing_days": m})
    for b in (float(v) for v in args.b.split(",")):
        frame[f"b={b:g}"] = betabinom_pmf(m, args.a, b, args.n)
        print(f"b={b:g}: mean {expected_missing_days(args.a, b, args.n):.2f} days")
    frame.to_csv(args.out, index=False, float_format="%.17g")


if __name__ == "__main__":
    main()
