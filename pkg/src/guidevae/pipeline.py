"""End-to-end stages (prepare, embed, train, eval), artifact I/O and sweeps."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from .config import PipelineConfig
from .dataset import MultiUserDataset, attach_conditions, generate_fleet, read_readings_csv
from .embedding import LdaFit, LdaModel, UserDictionary, WordCodebook, assign_words, kmeans_fit, lda_fit, word_counts
from .evaluation import EvaluationReport, dataset_loglik, rll_kl_decompose
from .model import GuideVae, TrainResult, build_model, load_checkpoint, save_checkpoint, train
from .preprocess import (
    SPLIT_NAMES,
    AmputationSpec,
    SplitDataset,
    ZplnParams,
    amputate_and_split,
    export_split_membership,
    sample_enrollments,
    zpln_apply,
    zpln_fit_features,
)

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    pass


class StaleArtifact(RuntimeError):
    pass


def fingerprint(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=float).tobytes()).hexdigest()[:16]


# -- in-memory stages ---------------------------------------------------------


@dataclass
class Prepared:
    splits: SplitDataset  # raw units, with calendar conditions
    zpln: ZplnParams
    enrollments: np.ndarray

    def normalized(self, name: str) -> MultiUserDataset:
        data = self.splits[name]
        return data.with_values(zpln_apply(data.values, self.zpln))


@dataclass
class Embedding:
    codebook: WordCodebook
    lda: LdaFit
    train_fingerprint: str

    @property
    def gamma(self) -> np.ndarray:
        return self.lda.dictionary.gamma


def load_source(cfg: PipelineConfig) -> MultiUserDataset:
    if cfg.data.csv is not None:
        return read_readings_csv(cfg.data.csv, min_days=cfg.data.min_days)
    return generate_fleet(cfg.data.fleet)


def prepare(cfg: PipelineConfig, source: MultiUserDataset | None = None) -> Prepared:
    source = attach_conditions(source if source is not None else load_source(cfg))
    amp = AmputationSpec(cfg.amputation.a, cfg.amputation.b, cfg.amputation.n, cfg.stage_seed("amputation"))
    enrollments = sample_enrollments(source.U, amp, n_per_user=source.counts)
    splits = amputate_and_split(source, enrollments, tuple(cfg.split.ratios), cfg.stage_seed("split"))
    if len(splits.train) == 0:
        raise ValueError("training split is empty")
    zpln = zpln_fit_features(splits.train.values, cfg.zpln.h_plus, cfg.zpln.h_zero)
    return Prepared(splits, zpln, enrollments)


def embed(cfg: PipelineConfig, prepared: Prepared) -> Embedding | None:
    """Wording and LDA on the normalized training split; None when unguided."""
    if not cfg.guided:
        return None
    train_set = prepared.normalized("train")
    W, K = cfg.embedding.W, cfg.embedding.K
    codebook = kmeans_fit(train_set.values, W, seed=cfg.stage_seed("kmeans"))
    words = assign_words(train_set.values, codebook)
    counts = word_counts(words, train_set.user, train_set.U, W)
    lda_cfg = cfg.embedding.lda
    lda_cfg = type(lda_cfg)(**{**lda_cfg.__dict__, "seed": cfg.stage_seed("lda")})
    fit = lda_fit(counts, K, W, alpha=1.0 / K, eta=1.0 / W, config=lda_cfg)
    return Embedding(codebook, fit, fingerprint(train_set.values))


def fit(cfg: PipelineConfig, prepared: Prepared, embedding: Embedding | None) -> TrainResult:
    train_set = prepared.normalized("train")
    K = cfg.embedding.K if embedding is not None else 0
    spec = cfg.model.spec(train_set.T, K)
    gamma = embedding.gamma if embedding is not None else None
    model = build_model(spec, gamma, prepared.zpln, seed=cfg.stage_seed("init"))
    tcfg = type(cfg.train)(**{**cfg.train.__dict__, "seed": cfg.stage_seed("train")})
    return train(model, train_set, prepared.normalized("validation"), tcfg)


def evaluate(cfg: PipelineConfig, prepared: Prepared, model, sets=("test", "missing")) -> EvaluationReport:
    report = EvaluationReport(fingerprints={"config": cfg.stage_hash("eval")})
    iscfg = type(cfg.evaluation)(cfg.evaluation.samples, cfg.stage_seed("eval"))
    for name in sets:
        data = prepared.normalized(name)
        if len(data) == 0:
            report.add(name, data, np.zeros(0), float("nan"), float("nan"))
            continue
        _, values = dataset_loglik(data, model, iscfg)
        rll, kl, _ = rll_kl_decompose(model, data, cfg.train.n_mc, cfg.stage_seed("rll"))
        report.add(name, data, values, rll, kl)
    return report


@dataclass
class PipelineResult:
    prepared: Prepared
    embedding: Embedding | None
    training: TrainResult
    report: EvaluationReport


def run_pipeline(cfg: PipelineConfig, source: MultiUserDataset | None = None) -> PipelineResult:
    prepared = prepare(cfg, source)
    embedding = embed(cfg, prepared)
    training = fit(cfg, prepared, embedding)
    report = evaluate(cfg, prepared, training.model)
    return PipelineResult(prepared, embedding, training, report)


# -- sweeps -------------------------------------------------------------------

SWEEP_AXES = {"K": "embedding.K", "W": "embedding.W", "V": "model.V", "eps": "model.eps", "b": "amputation.b"}
DEFAULT_SWEEPS = {
    "K": [0, 5, 10, 20, 50, 100],
    "W": [0, 250, 500, 1000, 2000],
    "V": [0, 25, 50, 75, 100, 125, 150],
    "eps": [1e-5, 1e-4, 1e-3],
    "b": [2, 3, 5, 10, 20, 30, 50],
}


@dataclass
class SweepTable:
    axis: str
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("axis_value", "seed", "test_ll", "missing_ll", "rll", "kl")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS, extrasaction="ignore")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    def to_json(self) -> str:
        return json.dumps({"axis": self.axis, "rows": self.rows}, indent=2, sort_keys=True)


def run_sweep(axis: str, values, base: PipelineConfig, repeats: int = 1, source: MultiUserDataset | None = None) -> SweepTable:
    """Train and evaluate one model per (axis value, repeat), all else fixed.

    Repeat ``r`` uses global seed ``base.seed + r``. Axis value 0 for ``K`` or
    ``W`` is the unguided baseline; ``V = 0`` is the diagonal covariance.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    table = SweepTable(axis)
    for value in values:
        for r in range(repeats):
            cfg = base.replace(**{SWEEP_AXES[axis]: value, "seed": base.seed + r})
            res = run_pipeline(cfg, source)
            test, missing = res.report.sets["test"], res.report.sets["missing"]
            table.rows.append(
                {
                    "axis_value": value,
                    "seed": cfg.seed,
                    "test_ll": test["mean_loglik"],
                    "missing_ll": missing["mean_loglik"] if missing["mean_loglik"] is not None else float("nan"),
                    "rll": test["rll"],
                    "kl": test["kl"],
                    "config_hash": cfg.stage_hash("eval"),
                }
            )
            log.info("sweep %s=%s seed=%d test_ll=%.4f", axis, value, cfg.seed, test["mean_loglik"])
    return table


# -- artifacts ----------------------------------------------------------------


def _manifest(path: Path) -> dict:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run the upstream stage first")
    return json.loads(path.read_text())


def check_fresh(manifest: dict, cfg: PipelineConfig, stage: str, force: bool) -> None:
    expected = cfg.stage_hash(stage)
    if manifest.get("config_hash") != expected and not force:
        raise StaleArtifact(
            f"{stage} artifacts were produced from config hash {manifest.get('config_hash')}, "
            f"current config hashes to {expected}; rerun '{stage}' or pass --force"
        )


def _write_manifest(directory: Path, cfg: PipelineConfig, stage: str, **extra) -> None:
    body = {"stage": stage, "config_hash": cfg.stage_hash(stage), "seed": cfg.seed, **extra}
    (directory / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True))


def _write_profiles(data: MultiUserDataset, path: Path) -> None:
    cols = {"user_id": np.asarray(data.user_ids, dtype=object)[data.user], "date": data.dates.astype(str)}
    for t in range(data.T):
        cols[f"h{t:02d}"] = data.values[:, t]
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")


def _read_profiles(path: Path, user_ids: tuple[str, ...]) -> MultiUserDataset:
    frame = pd.read_csv(path, dtype={"user_id": str, "date": str}, float_precision="round_trip")
    index = {uid: i for i, uid in enumerate(user_ids)}
    values = frame.drop(columns=["user_id", "date"]).to_numpy(dtype=float)
    data = MultiUserDataset(
        values=values.reshape(len(frame), -1),
        user=np.array([index[u] for u in frame["user_id"]], dtype=np.int64),
        dates=frame["date"].to_numpy().astype("datetime64[D]"),
        user_ids=user_ids,
    )
    return attach_conditions(data)


def write_prepared(out: Path, cfg: PipelineConfig, prepared: Prepared) -> None:
    d = out / "prepare"
    d.mkdir(parents=True, exist_ok=True)
    source_ids = prepared.splits.train.user_ids
    for name in SPLIT_NAMES:
        _write_profiles(prepared.splits[name], d / f"{name}.csv")
    full = _concat(prepared.splits)
    export_split_membership(full[0], full[1], d / "splits.csv")
    (d / "zpln.json").write_text(prepared.zpln.to_json())
    _write_manifest(
        d,
        cfg,
        "prepare",
        user_ids=list(source_ids),
        enrollments=[int(m) for m in prepared.enrollments],
        sizes={name: len(prepared.splits[name]) for name in SPLIT_NAMES},
    )


def _concat(splits: SplitDataset):
    parts = [splits[n] for n in SPLIT_NAMES]
    order = np.lexsort(
        (np.concatenate([p.dates for p in parts]).astype(np.int64), np.concatenate([p.user for p in parts]))
    )
    labels = np.concatenate([np.full(len(p), n, dtype=object) for p, n in zip(parts, SPLIT_NAMES)])
    full = MultiUserDataset(
        values=np.concatenate([p.values for p in parts])[order],
        user=np.concatenate([p.user for p in parts])[order],
        dates=np.concatenate([p.dates for p in parts])[order],
        user_ids=parts[0].user_ids,
    )
    return full, labels[order]


def read_prepared(out: Path, cfg: PipelineConfig, force: bool = False) -> Prepared:
    d = out / "prepare"
    manifest = _manifest(d / "manifest.json")
    check_fresh(manifest, cfg, "prepare", force)
    ids = tuple(manifest["user_ids"])
    parts = {name: _read_profiles(d / f"{name}.csv", ids) for name in SPLIT_NAMES}
    full, labels = _concat(SplitDataset(assignment=np.zeros(0), **parts))
    splits = SplitDataset(assignment=labels, **parts)
    zpln = ZplnParams.from_json((d / "zpln.json").read_text())
    return Prepared(splits, zpln, np.asarray(manifest["enrollments"]))


def write_embedding(out: Path, cfg: PipelineConfig, embedding: Embedding | None) -> None:
    d = out / "embed"
    d.mkdir(parents=True, exist_ok=True)
    if embedding is None:
        _write_manifest(d, cfg, "embed", mode="unguided", W=cfg.embedding.W, K=0)
        return
    np.savetxt(d / "codebook.csv", embedding.codebook.centers, delimiter=",", fmt="%.17g")
    np.savetxt(d / "gamma.csv", embedding.gamma, delimiter=",", fmt="%.17g")
    np.savetxt(d / "topics.csv", embedding.lda.model.lam, delimiter=",", fmt="%.17g")
    lda = embedding.lda
    _write_manifest(
        d,
        cfg,
        "embed",
        mode="guided",
        W=cfg.embedding.W,
        K=cfg.embedding.K,
        alpha=lda.model.alpha,
        eta=lda.model.eta,
        kmeans_seed=cfg.stage_seed("kmeans"),
        lda_seed=cfg.stage_seed("lda"),
        lda_config={**cfg.embedding.lda.__dict__, "seed": cfg.stage_seed("lda")},
        train_fingerprint=embedding.train_fingerprint,
        elbo_history=lda.elbo_history,
    )


def read_embedding(out: Path, cfg: PipelineConfig, force: bool = False) -> Embedding | None:
    d = out / "embed"
    manifest = _manifest(d / "manifest.json")
    check_fresh(manifest, cfg, "embed", force)
    if manifest["mode"] == "unguided":
        return None
    centers = np.loadtxt(d / "codebook.csv", delimiter=",", ndmin=2)
    gamma = np.loadtxt(d / "gamma.csv", delimiter=",", ndmin=2)
    lam = np.loadtxt(d / "topics.csv", delimiter=",", ndmin=2)
    lda = LdaFit(LdaModel(lam, manifest["alpha"], manifest["eta"]), UserDictionary(gamma), manifest["elbo_history"])
    return Embedding(WordCodebook(centers), lda, manifest["train_fingerprint"])


def write_training(out: Path, cfg: PipelineConfig, result: TrainResult) -> None:
    d = out / "train"
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        result.model,
        d / "checkpoint",
        extra={
            "config_hash": cfg.stage_hash("train"),
            "train_config": {**cfg.train.__dict__, "seed": cfg.stage_seed("train")},
            "init_seed": cfg.stage_seed("init"),
            "best_epoch": result.best_epoch,
            "validation_user_vectors": "fixed draws per validation pass",
        },
    )
    pd.DataFrame(result.history).to_csv(d / "history.csv", index=False, float_format="%.17g")
    model = result.model
    if model.spec.V > 0:
        U = model.dictionary().detach().double().numpy()
        order = np.argsort(np.abs(U).sum(0), kind="stable")
        np.savetxt(d / "dictionary_sorted_l1.csv", U[:, order], delimiter=",", fmt="%.17g")
    _write_manifest(d, cfg, "train", best_epoch=result.best_epoch, epochs=len(result.history))


def read_model(out: Path, cfg: PipelineConfig, force: bool = False) -> GuideVae:
    d = out / "train"
    manifest = _manifest(d / "manifest.json")
    check_fresh(manifest, cfg, "train", force)
    model, _ = load_checkpoint(d / "checkpoint")
    return model


def write_report(out: Path, cfg: PipelineConfig, report: EvaluationReport) -> None:
    d = out / "eval"
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(report.to_json())
    _write_manifest(
        d,
        cfg,
        "eval",
        means={k: v["mean_loglik"] for k, v in report.sets.items()},
        importance_samples=cfg.evaluation.samples,
    )


def set_deterministic() -> None:
    torch.use_deterministic_algorithms(True)
