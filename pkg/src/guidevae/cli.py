"""Command-line driver: ``guidevae <stage> --config cfg.yaml [--out DIR]``.

Exit codes: 0 success, 2 input error, 3 missing or stale upstream artifact,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import pipeline
from .config import ConfigError, PipelineConfig, dump_config, load_config
from .dataset import IngestionError, encode_calendar
from .model import TrainingDiverged, generate, impute

log = logging.getLogger("guidevae")

EXIT_INPUT, EXIT_ARTIFACT, EXIT_NUMERIC = 2, 3, 4


def _config(args) -> tuple[PipelineConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def cmd_prepare(args) -> None:
    cfg, out = _config(args)
    prepared = pipeline.prepare(cfg)
    pipeline.write_prepared(out, cfg, prepared)
    (out / "config.yaml").write_text(dump_config(cfg))
    sizes = {n: len(prepared.splits[n]) for n in ("train", "validation", "test", "missing")}
    print(json.dumps(sizes))


def cmd_embed(args) -> None:
    cfg, out = _config(args)
    prepared = pipeline.read_prepared(out, cfg, args.force)
    embedding = pipeline.embed(cfg, prepared)
    pipeline.write_embedding(out, cfg, embedding)
    print("unguided: embedding skipped" if embedding is None else f"user dictionary {embedding.gamma.shape} written")


def cmd_train(args) -> None:
    cfg, out = _config(args)
    prepared = pipeline.read_prepared(out, cfg, args.force)
    embedding = pipeline.read_embedding(out, cfg, args.force)
    result = pipeline.fit(cfg, prepared, embedding)
    pipeline.write_training(out, cfg, result)
    best = result.history[result.best_epoch]
    print(f"best epoch {result.best_epoch}: validation ELBO {best['val_elbo']:.4f}")


def cmd_eval(args) -> None:
    cfg, out = _config(args)
    prepared = pipeline.read_prepared(out, cfg, args.force)
    model = pipeline.read_model(out, cfg, args.force)
    report = pipeline.evaluate(cfg, prepared, model)
    pipeline.write_report(out, cfg, report)
    print(json.dumps({k: v["mean_loglik"] for k, v in report.sets.items()}))


def _user_index(model_ids: list[str], user: str) -> int:
    if user in model_ids:
        return model_ids.index(user)
    if user.isdigit() and int(user) < len(model_ids):
        return int(user)
    raise KeyError(f"unknown user {user!r}")


def cmd_generate(args) -> None:
    cfg, out = _config(args)
    prepared = pipeline.read_prepared(out, cfg, args.force)
    model = pipeline.read_model(out, cfg, args.force)
    ids = list(prepared.splits.train.user_ids)
    u = _user_index(ids, args.user)
    if not 1 <= args.month <= 12 or not 0 <= args.weekday <= 6:
        raise ValueError("--month must be 1..12 and --weekday 0 (Monday)..6")
    aux = encode_calendar(args.month - 1, args.weekday)
    rng = np.random.default_rng(cfg.stage_seed("generate") if args.sample_seed is None else args.sample_seed)
    samples = generate(model, aux, args.count, rng, user=u)
    date = _representative_date(args.month, args.weekday)
    rows = [
        {"user_id": ids[u], "sample": s, "date": date, "hour": h, "kwh": samples[s, h]}
        for s in range(len(samples))
        for h in range(samples.shape[1])
    ]
    d = out / "generate"
    d.mkdir(exist_ok=True)
    path = d / f"{ids[u]}_m{args.month:02d}_w{args.weekday}.csv"
    pd.DataFrame(rows, columns=["user_id", "sample", "date", "hour", "kwh"]).to_csv(path, index=False, float_format="%.17g")
    print(f"{len(rows)} rows written to {path}")


def _representative_date(month: int, weekday: int, year: int = 2021) -> str:
    days = np.arange(np.datetime64(f"{year}-{month:02d}-01"), np.datetime64(f"{year}-{month:02d}-01") + 31)
    days = days[days.astype("datetime64[M]").astype(int) % 12 == month - 1]
    return str(days[(days.astype(int) + 3) % 7 == weekday][0])


def cmd_impute(args) -> None:
    cfg, out = _config(args)
    prepared = pipeline.read_prepared(out, cfg, args.force)
    model = pipeline.read_model(out, cfg, args.force)
    missing = prepared.splits.missing
    ids = list(missing.user_ids)
    u = _user_index(ids, args.user)
    rows = missing.user == u
    if not rows.any():
        raise ValueError(f"user {ids[u]} has no missing days")
    rng = np.random.default_rng(cfg.stage_seed("impute") if args.sample_seed is None else args.sample_seed)
    result = impute(model, u, missing.conditions[rows], args.count, rng, truth=missing.values[rows])
    dates = missing.dates[rows].astype(str)
    T = missing.T
    records = [
        {"user_id": ids[u], "sample": s, "date": dates[i // T], "hour": i % T, "kwh": result.samples[s, i]}
        for s in range(args.count)
        for i in range(result.samples.shape[1])
    ]
    d = out / "impute"
    d.mkdir(exist_ok=True)
    pd.DataFrame(records).to_csv(d / f"{ids[u]}.csv", index=False, float_format="%.17g")
    summary = {
        "user_id": ids[u],
        "missing_days": int(rows.sum()),
        "samples": args.count,
        "median_best_sample": result.median_best,
        "scores": [float(s) for s in result.scores],
    }
    (d / f"{ids[u]}.json").write_text(json.dumps(summary, indent=2))
    print(f"median-best sample: {result.median_best}")


def cmd_sweep(args) -> None:
    cfg, out = _config(args)
    values = [float(v) if args.axis == "eps" else int(v) for v in args.values.split(",")] if args.values else pipeline.DEFAULT_SWEEPS[args.axis]
    table = pipeline.run_sweep(args.axis, values, cfg, repeats=args.repeats)
    d = out / "sweep"
    d.mkdir(exist_ok=True)
    table.to_csv(d / f"{args.axis}.csv")
    (d / f"{args.axis}.json").write_text(table.to_json())
    print(f"{len(table.rows)} rows written to {d / (args.axis + '.csv')}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline YAML config")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", help="output directory (default: config 'out')")
    common.add_argument("--force", action="store_true", help="accept stale upstream artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="guidevae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in [("prepare", cmd_prepare), ("embed", cmd_embed), ("train", cmd_train), ("eval", cmd_eval)]:
        sub.add_parser(name, parents=[common]).set_defaults(func=func)

    p = sub.add_parser("generate", parents=[common])
    p.add_argument("--user", required=True, help="user id or zero-based index")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--month", type=int, required=True, help="calendar month 1..12")
    p.add_argument("--weekday", type=int, required=True, help="0 = Monday .. 6 = Sunday")
    p.add_argument("--sample-seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("impute", parents=[common])
    p.add_argument("--user", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--sample-seed", type=int)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("sweep", parents=[common])
    p.add_argument("--axis", required=True, choices=sorted(pipeline.SWEEP_AXES))
    p.add_argument("--values", help="comma-separated; default is the reference grid")
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    pipeline.set_deterministic()
    try:
        args.func(args)
    except (pipeline.MissingArtifact, pipeline.StaleArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ConfigError, IngestionError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
