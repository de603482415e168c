"""Hyperparameter sweep over one axis (K, W, V, eps or b), written as CSV.

Each row is one trained and evaluated model: test and missing-set mean
log-likelihoods plus the reconstruction/KL split of the test ELBO.

    python scripts/sweep.py --config configs/fleet.yaml --axis V --values 0,4,8,16 --repeats 3
"""
import argparse
import logging
from pathlib import Path

from guidevae import pipeline
from guidevae.config import load_config


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", required=True)
    parser.add_argument("--axis", required=True, choices=sorted(pipeline.SWEEP_AXES))
    parser.add_argument("--values", help="comma-separated; default is the reference grid")
    parser.add_argument("--repeats", type=int, default=1)
    parser.add_argument("--out", default="runs/sweeps")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    pipeline.set_deterministic()

    cast = float if args.axis in ("eps", "b") else int
    values = [cast(v) for v in args.values.split(",")] if args.values else pipeline.DEFAULT_SWEEPS[args.axis]
    table = pipeline.run_sweep(args.axis, values, load_config(args.config), repeats=args.repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / f"{args.axis}.csv")
    print(f"wrote {out / (args.axis + '.csv')}")


if __name__ == "__main__":
    main()
