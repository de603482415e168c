"""Median-best imputation of one user's missing days, with the ground truth.

Reads the artifacts of a finished ``guidevae train`` run and writes a long CSV
(date, hour, truth, median_best, p05, p95) over the user's amputated days.

    python scripts/median_best.py --config configs/fleet.yaml --out runs/fleet --user u03
"""
import argparse
from pathlib import Path

import numpy as np
import pandas as pd

from guidevae import pipeline
from guidevae.config import load_config
from guidevae.model import impute


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", required=True, help="run directory holding prepare/ and train/")
    parser.add_argument("--user", help="user id; default is the user with most missing days")
    parser.add_argument("--count", type=int, default=100)
    parser.add_argument("--sample-seed", type=int, default=0)
    args = parser.parse_args()

    cfg, out = load_config(args.config), Path(args.out)
    prepared = pipeline.read_prepared(out, cfg)
    model = pipeline.read_model(out, cfg)
    missing = prepared.splits.missing
    ids = list(missing.user_ids)
    u = ids.index(args.user) if args.user else int(np.argmax(missing.counts))
    rows = missing.user == u
    if not rows.any():
        raise SystemExit(f"user {ids[u]} has no missing days")
    truth = missing.values[rows]
    res = impute(model, u, missing.conditions[rows], args.count, np.random.default_rng(args.sample_seed), truth=truth)
    M, T = truth.shape
    best = res.samples[res.median_best].reshape(M, T)
    lo, hi = np.percentile(res.samples.reshape(args.count, M, T), [5, 95], axis=0)
    frame = pd.DataFrame(
        {
            "date": np.repeat(missing.dates[rows].astype(str), T),
            "hour": np.tile(np.arange(T), M),
            "truth": truth.ravel(),
            "median_best": best.ravel(),
            "p05": lo.ravel(),
            "p95": hi.ravel(),
        }
    )
    path = out / f"median_best_{ids[u]}.csv"
    frame.to_csv(path, index=False, float_format="%.17g")
    print(f"user {ids[u]}: {M} days, median-best sample {res.median_best}, written to {path}")


if __name__ == "__main__":
    main()
