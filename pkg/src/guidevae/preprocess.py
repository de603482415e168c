"""Zero-preserved log-normalization, late-enrollment amputation and splits."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import betaln, gammaln

from .dataset import MultiUserDataset

log = logging.getLogger(__name__)

S_MIN = 1e-6
SNAP_TOLERANCE = 0.5
SPLIT_NAMES = ("train", "validation", "test", "missing")


# -- zero-preserved log-normalization ----------------------------------------


@dataclass(frozen=True)
class ZplnParams:
    m: np.ndarray
    s: np.ndarray
    h_plus: float = 1.0
    h_zero: float = -3.0

    def __post_init__(self):
        if np.any(self.s <= 0):
            raise ValueError("log-stds must be positive")
        if not self.h_plus > self.h_zero:
            raise ValueError("h_plus must exceed h_zero")

    def to_json(self) -> str:
        return json.dumps(
            {"m": [float(v) for v in self.m], "s": [float(v) for v in self.s], "h_plus": self.h_plus, "h_zero": self.h_zero},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "ZplnParams":
        d = json.loads(text)
        return cls(np.asarray(d["m"], float), np.asarray(d["s"], float), float(d["h_plus"]), float(d["h_zero"]))


def zpln_fit(values: np.ndarray) -> tuple[float, float, bool]:
    """Zero-excluded log mean/std of one feature.

    Returns ``(m, s, ok)``; ``ok`` is False when no positive entry exists and
    the fallback ``(0, 1)`` was used. The std is the population std, floored
    at ``S_MIN``.
    """
    values = np.asarray(values, dtype=float)
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ValueError("zpln_fit expects finite non-negative values")
    logs = np.log(values[values > 0])
    if logs.size == 0:
        return 0.0, 1.0, False
    m = logs.mean()
    s = max(np.sqrt(np.mean((logs - m) ** 2)), S_MIN)
    return float(m), float(s), True


def zpln_fit_features(X: np.ndarray, h_plus: float = 1.0, h_zero: float = -3.0) -> ZplnParams:
    ms, ss = [], []
    for t in range(X.shape[1]):
        m, s, ok = zpln_fit(X[:, t])
        if not ok:
            log.warning("feature %d has no positive training values; using m=0, s=1", t)
        ms.append(m)
        ss.append(s)
    return ZplnParams(np.array(ms), np.array(ss), h_plus, h_zero)


def zpln_apply(x: np.ndarray, params: ZplnParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("zero-preserved log-normalization needs non-negative input")
    out = np.full(x.shape, params.h_zero)
    pos = x > 0
    z = (np.log(np.where(pos, x, 1.0)) - params.m) / params.s + params.h_plus
    out[pos] = z[pos]
    return out


def zpln_invert(xbar: np.ndarray, params: ZplnParams, tol: float = SNAP_TOLERANCE) -> np.ndarray:
    """Exact inverse on zeros; values within ``tol`` of ``h_zero`` snap to 0."""
    xbar = np.asarray(xbar, dtype=float)
    x = np.exp(params.s * (xbar - params.h_plus) + params.m)
    return np.where(np.abs(xbar - params.h_zero) <= tol, 0.0, x)


# -- beta-binomial late enrollment --------------------------------------------


@dataclass(frozen=True)
class AmputationSpec:
    a: float = 0.85
    b: float = 10.0
    n: int | None = 365  # None: each user's own profile count
    seed: int = 0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("beta-binomial shapes must be positive")
        if self.n is not None and self.n < 0:
            raise ValueError("support length must be non-negative")


def betabinom_logpmf(m, a: float, b: float, n: int) -> np.ndarray:
    m = np.asarray(m)
    inside = (m >= 0) & (m <= n) & (m == np.floor(m))
    mm = np.where(inside, m, 0).astype(float)
    lp = gammaln(n + 1) - gammaln(mm + 1) - gammaln(n - mm + 1) + betaln(mm + a, n - mm + b) - betaln(a, b)
    return np.where(inside, lp, -np.inf)


def betabinom_pmf(m, a: float, b: float, n: int) -> np.ndarray:
    """C(n, m) B(m + a, n - m + b) / B(a, b); zero outside {0..n}."""
    return np.exp(betabinom_logpmf(m, a, b, n))


def expected_missing_days(a: float, b: float, n: int) -> float:
    return n * a / (a + b)


def sample_enrollments(num_users: int, spec: AmputationSpec, n_per_user=None) -> np.ndarray:
    """I.i.d. beta-binomial late-enrollment day counts ``M_u``."""
    rng = np.random.default_rng(spec.seed)
    if spec.n is None:
        if n_per_user is None:
            raise ValueError("spec.n is None; pass n_per_user")
        n = np.asarray(n_per_user, dtype=np.int64)
    else:
        n = np.full(num_users, spec.n, dtype=np.int64)
    p = rng.beta(spec.a, spec.b, size=num_users)
    return rng.binomial(n, p).astype(np.int64)


# -- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class SplitDataset:
    train: MultiUserDataset
    validation: MultiUserDataset
    test: MultiUserDataset
    missing: MultiUserDataset
    assignment: np.ndarray  # split name per pooled profile of the source

    def __getitem__(self, name: str) -> MultiUserDataset:
        return getattr(self, name)


def _apportion(n: int, weights: np.ndarray, carry: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of ``n`` with remainders carried in.

    Ties prefer the later (smaller) splits so small users still get a test
    profile.
    """
    quota = n * weights + carry
    alloc = np.maximum(np.floor(quota), 0).astype(np.int64)
    while alloc.sum() > n:
        alloc[np.argmax(alloc - quota)] -= 1
    order = sorted(range(len(weights)), key=lambda k: (-(quota[k] - alloc[k]), -k))
    for k in order[: n - alloc.sum()]:
        alloc[k] += 1
    carry[:] = quota - alloc
    return alloc


def amputate_and_split(
    dataset: MultiUserDataset,
    enrollments: np.ndarray,
    ratios: tuple[float, float, float] = (8, 2, 2),
    seed: int = 0,
) -> SplitDataset:
    """First ``M_u`` days of each user go to ``missing``; the rest are split.

    The remainder of every user is shuffled and apportioned by largest
    remainder. Fractional remainders are carried from one user to the next, so
    pooled split sizes stay within one profile of the exact ratios.
    """
    enrollments = np.asarray(enrollments, dtype=np.int64)
    counts = dataset.counts
    if len(enrollments) != dataset.U:
        raise ValueError("one enrollment count per user required")
    if np.any(enrollments > counts):
        u = int(np.argmax(enrollments > counts))
        raise ValueError(f"user {dataset.user_ids[u]}: M_u={enrollments[u]} exceeds N_u={counts[u]}")
    weights = np.asarray(ratios, dtype=float)
    weights = weights / weights.sum()
    rng = np.random.default_rng(seed)
    carry = np.zeros(3)
    assignment = np.empty(len(dataset), dtype=object)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    for u in range(dataset.U):
        idx = starts[u] + np.arange(counts[u])
        idx = idx[np.argsort(dataset.dates[idx], kind="stable")]
        m = enrollments[u]
        assignment[idx[:m]] = "missing"
        rest = idx[m:]
        alloc = _apportion(len(rest), weights, carry)
        labels = np.repeat(np.array(SPLIT_NAMES[:3], dtype=object), alloc)
        assignment[rest] = labels[rng.permutation(len(rest))]
    parts = {name: dataset.subset(assignment == name) for name in SPLIT_NAMES}
    return SplitDataset(assignment=assignment, **parts)


def export_split_membership(dataset: MultiUserDataset, assignment: np.ndarray, path: str | Path) -> None:
    frame = pd.DataFrame(
        {
            "user_id": np.asarray(dataset.user_ids, dtype=object)[dataset.user],
            "date": dataset.dates.astype(str),
            "split": assignment,
        }
    )
    frame.to_csv(path, index=False)
