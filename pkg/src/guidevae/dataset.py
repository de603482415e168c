"""Multi-user daily profiles: ingestion, pooled indexing, calendar conditions
and a synthetic fleet generator."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

HOURS_PER_DAY = 24


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class Profile:
    values: np.ndarray
    user_index: int
    within_user_index: int
    date: np.datetime64


@dataclass(frozen=True)
class MultiUserDataset:
    """Pooled profiles in user-major, date-ascending order.

    ``user`` holds zero-based user indices into ``user_ids``. Users may have
    zero profiles (e.g. a split where a user was fully amputated), so ``U`` is
    always ``len(user_ids)``.
    """

    values: np.ndarray
    user: np.ndarray
    dates: np.ndarray
    user_ids: tuple[str, ...]
    conditions: np.ndarray | None = None
    labels: np.ndarray | None = None  # per-user archetype for synthetic fleets

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("values must be a (N, T) matrix")
        n = len(self.values)
        if len(self.user) != n or len(self.dates) != n:
            raise ValueError("values, user and dates must have equal length")
        if n and (self.user.min() < 0 or self.user.max() >= len(self.user_ids)):
            raise ValueError("user index out of range")
        if n and np.any(np.diff(self.user) < 0):
            raise ValueError("profiles must be grouped user-major")
        if self.conditions is not None and self.conditions.shape != (n, 4):
            raise ValueError("conditions must be (N, 4)")

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def U(self) -> int:
        return len(self.user_ids)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.user, minlength=self.U)

    @property
    def within_user(self) -> np.ndarray:
        """Zero-based position of each profile inside its user's block."""
        starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        return np.arange(len(self)) - starts[self.user]

    def profile(self, i: int) -> Profile:
        return Profile(self.values[i], int(self.user[i]), int(self.within_user[i]), self.dates[i])

    def user_profiles(self, u: int) -> np.ndarray:
        return self.values[self.user == u]

    def subset(self, mask: np.ndarray) -> "MultiUserDataset":
        """Rows selected by a boolean mask or index array, user list kept intact."""
        idx = np.arange(len(self))[mask] if np.asarray(mask).dtype == bool else np.asarray(mask)
        idx = np.sort(idx)
        return replace(
            self,
            values=self.values[idx],
            user=self.user[idx],
            dates=self.dates[idx],
            conditions=None if self.conditions is None else self.conditions[idx],
        )

    def with_values(self, values: np.ndarray) -> "MultiUserDataset":
        return replace(self, values=np.asarray(values, dtype=float))


# -- pooled index -------------------------------------------------------------


def pooled_index(u: int, n: int, counts: Sequence[int]) -> int:
    """One-based pooled index ``i = n + sum_{u' < u} N_u'`` for one-based (u, n)."""
    counts = list(counts)
    if not 1 <= u <= len(counts):
        raise IndexError(f"user {u} outside 1..{len(counts)}")
    if not 1 <= n <= counts[u - 1]:
        raise IndexError(f"profile {n} outside 1..{counts[u - 1]} for user {u}")
    return n + sum(counts[: u - 1])


def unpool_index(i: int, counts: Sequence[int]) -> tuple[int, int]:
    """Inverse of :func:`pooled_index`."""
    total = sum(counts)
    if not 1 <= i <= total:
        raise IndexError(f"pooled index {i} outside 1..{total}")
    offset = 0
    for u, c in enumerate(counts, start=1):
        if i <= offset + c:
            return u, i - offset
        offset += c
    raise AssertionError("unreachable")


# -- calendar conditions ------------------------------------------------------


def cyclic_conditions(dates: np.ndarray) -> np.ndarray:
    """(month_sin, month_cos, weekday_sin, weekday_cos) per date.

    Month index is zero-based (January = 0); weekday index is Monday = 0.
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    if np.any(np.isnat(dates)):
        raise ValueError("every profile needs a calendar date")
    months = dates.astype("datetime64[M]").astype(int) % 12
    # 1970-01-01 was a Thursday (weekday 3)
    weekdays = (dates.astype(int) + 3) % 7
    return encode_calendar(months, weekdays)


def encode_calendar(month_index, weekday_index) -> np.ndarray:
    m = 2 * np.pi * np.asarray(month_index, dtype=float) / 12
    w = 2 * np.pi * np.asarray(weekday_index, dtype=float) / 7
    return np.stack([np.sin(m), np.cos(m), np.sin(w), np.cos(w)], axis=-1)


def attach_conditions(dataset: MultiUserDataset) -> MultiUserDataset:
    return replace(dataset, conditions=cyclic_conditions(dataset.dates))


# -- ingestion ----------------------------------------------------------------


def ingest_readings(
    records: Iterable[tuple[str, object, float]] | pd.DataFrame,
    min_days: int = 1,
) -> MultiUserDataset:
    """Build daily profiles from hourly ``(user_id, timestamp, kwh)`` readings.

    Users with any negative reading, users that only ever read zero, and users
    with fewer than ``min_days`` complete days are dropped. Incomplete days
    are dropped silently.
    """
    if isinstance(records, pd.DataFrame):
        df = records.loc[:, ["user_id", "timestamp", "kwh"]].copy()
    else:
        df = pd.DataFrame(list(records), columns=["user_id", "timestamp", "kwh"])
    if df.empty:
        raise IngestionError("no readings")
    df["user_id"] = df["user_id"].astype(str)
    df["timestamp"] = pd.to_datetime(df["timestamp"])
    df["kwh"] = df["kwh"].astype(float)
    df["day"] = df["timestamp"].dt.floor("D")

    bad = df["timestamp"] != df["timestamp"].dt.floor("h")
    if bad.any():
        row = df[bad].iloc[0]
        raise IngestionError(f"non-hourly timestamp {row.timestamp} for user {row.user_id} on {row.day.date()}")
    dup = df.duplicated(["user_id", "timestamp"])
    if dup.any():
        row = df[dup].iloc[0]
        raise IngestionError(f"duplicate timestamp {row.timestamp} for user {row.user_id} on {row.day.date()}")
    nonfinite = ~np.isfinite(df["kwh"].to_numpy())
    if nonfinite.any():
        row = df[nonfinite].iloc[0]
        raise IngestionError(f"non-finite reading for user {row.user_id} on {row.day.date()}")

    per_user = df.groupby("user_id")["kwh"]
    negative = per_user.min() < 0
    all_zero = per_user.max() == 0
    for uid in negative[negative].index:
        log.info("excluding user %s: negative reading", uid)
    for uid in all_zero[all_zero].index:
        log.info("excluding user %s: constant zero consumption", uid)
    keep = negative.index[~(negative | all_zero)]
    df = df[df["user_id"].isin(keep)]

    df = df.assign(hour=df["timestamp"].dt.hour)
    complete = df.groupby(["user_id", "day"])["hour"].transform("size") == HOURS_PER_DAY
    df = df[complete]
    table = df.pivot_table(index=["user_id", "day"], columns="hour", values="kwh", aggfunc="first")
    table = table.sort_index()

    user_ids, values, user, dates = [], [], [], []
    for uid, block in table.groupby(level="user_id", sort=True):
        if len(block) < min_days:
            log.info("excluding user %s: %d complete days < %d", uid, len(block), min_days)
            continue
        values.append(block.to_numpy(dtype=float))
        user.append(np.full(len(block), len(user_ids)))
        dates.append(block.index.get_level_values("day").to_numpy().astype("datetime64[D]"))
        user_ids.append(uid)
    if not user_ids:
        raise IngestionError("no user survived the filters")
    return MultiUserDataset(
        values=np.concatenate(values),
        user=np.concatenate(user),
        dates=np.concatenate(dates),
        user_ids=tuple(user_ids),
    )


def read_readings_csv(path: str | Path, min_days: int = 1) -> MultiUserDataset:
    df = pd.read_csv(path, dtype={"user_id": str}, encoding="utf-8", float_precision="round_trip")
    missing = {"user_id", "timestamp", "kwh"} - set(df.columns)
    if missing:
        raise IngestionError(f"{path}: missing columns {sorted(missing)}")
    return ingest_readings(df, min_days=min_days)


def export_readings_csv(dataset: MultiUserDataset, path: str | Path) -> None:
    """Write the dataset back in the ``user_id,timestamp,kwh`` input schema."""
    T = dataset.T
    hours = np.arange(T).astype("timedelta64[h]")
    stamps = (dataset.dates.astype("datetime64[h]")[:, None] + hours[None, :]).ravel()
    frame = pd.DataFrame(
        {
            "user_id": np.repeat(np.asarray(dataset.user_ids, dtype=object)[dataset.user], T),
            "timestamp": pd.to_datetime(stamps).strftime("%Y-%m-%dT%H:%M:%S"),
            "kwh": dataset.values.ravel(),
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")


# -- synthetic fleets ---------------------------------------------------------


def _bump(T: int, centre: float, width: float) -> np.ndarray:
    t = np.arange(T)
    d = np.minimum(np.abs(t - centre), T - np.abs(t - centre))
    return np.exp(-0.5 * (d / width) ** 2)


@dataclass
class Archetype:
    name: str
    template: list[float]
    noise: float = 0.3  # log-scale std of the multiplicative noise
    zero_prob: float = 0.0
    noise_corr: float = 0.0  # squared-exponential length scale in steps; 0 = white
    seasonal_amplitude: float = 0.2
    weekend_factor: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.zero_prob <= 1.0:
            raise ValueError(f"{self.name}: zero_prob must be in [0, 1]")
        if self.noise < 0 or self.noise_corr < 0:
            raise ValueError(f"{self.name}: noise parameters must be non-negative")
        if min(self.template) < 0:
            raise ValueError(f"{self.name}: template must be non-negative")


def default_archetypes(T: int = HOURS_PER_DAY, noise_corr: float = 0.0, noise: float = 0.3) -> list[Archetype]:
    """Four load shapes with little overlap: morning, evening, office and night."""
    base = 0.05
    shapes = {
        "morning": 0.8 * _bump(T, 7.5, 1.2),
        "evening": 1.0 * _bump(T, 19.5, 1.5),
        "office": 0.7 * np.clip(_bump(T, 12.5, 3.0) * 1.6, 0, 1),
        "night": 0.9 * _bump(T, 2.0, 1.8),
    }
    weekend = {"morning": 1.1, "evening": 1.2, "office": 0.3, "night": 1.0}
    return [
        Archetype(
            name=name,
            template=[float(v) for v in base + shape],
            noise=noise,
            noise_corr=noise_corr,
            weekend_factor=weekend[name],
        )
        for name, shape in shapes.items()
    ]


@dataclass
class FleetSpec:
    num_users: int
    days: int
    archetypes: list[Archetype] | None = None  # None: the four default shapes
    seed: int = 0
    start: str = "2021-01-01"
    user_scale_sd: float = 0.25
    noise: float = 0.3  # used only for the default shapes
    noise_corr: float = 0.0  # used only for the default shapes

    def __post_init__(self):
        if self.num_users < 1 or self.days < 1:
            raise ValueError("num_users and days must be >= 1")
        if self.archetypes is None:
            self.archetypes = default_archetypes(noise_corr=self.noise_corr, noise=self.noise)
        if not self.archetypes:
            raise ValueError("at least one archetype required")
        self.archetypes = [a if isinstance(a, Archetype) else Archetype(**a) for a in self.archetypes]
        if len({len(a.template) for a in self.archetypes}) != 1:
            raise ValueError("archetype templates must share one length")


def _noise_factor(T: int, length: float) -> np.ndarray:
    if length <= 0:
        return np.eye(T)
    t = np.arange(T)
    K = np.exp(-0.5 * ((t[:, None] - t[None, :]) / length) ** 2)
    return np.linalg.cholesky(K + 1e-8 * np.eye(T))


def generate_fleet(spec: FleetSpec) -> MultiUserDataset:
    """Deterministic synthetic fleet; each user follows one archetype.

    Profile = template * user scale * seasonal * weekday modulation times
    mean-one log-normal noise (optionally hour-correlated), then zero-inflated.
    """
    rng = np.random.default_rng(spec.seed)
    T = len(spec.archetypes[0].template)
    start = np.datetime64(spec.start, "D")
    dates = start + np.arange(spec.days)
    month = dates.astype("datetime64[M]").astype(int) % 12
    weekday = (dates.astype(int) + 3) % 7
    seasonal_phase = np.cos(2 * np.pi * month / 12)

    labels = rng.integers(len(spec.archetypes), size=spec.num_users)
    scales = np.exp(spec.user_scale_sd * rng.standard_normal(spec.num_users))
    factors = {a.name: _noise_factor(T, a.noise_corr) for a in spec.archetypes}

    values = np.empty((spec.num_users * spec.days, T))
    for u in range(spec.num_users):
        arch = spec.archetypes[labels[u]]
        template = np.asarray(arch.template, dtype=float)
        modulation = (1 + arch.seasonal_amplitude * seasonal_phase) * np.where(weekday >= 5, arch.weekend_factor, 1.0)
        mean = scales[u] * modulation[:, None] * template[None, :]
        eps = rng.standard_normal((spec.days, T)) @ factors[arch.name].T
        block = mean * np.exp(arch.noise * eps - 0.5 * arch.noise**2)
        block[rng.random((spec.days, T)) < arch.zero_prob] = 0.0
        values[u * spec.days : (u + 1) * spec.days] = block

    width = len(str(spec.num_users - 1))
    return MultiUserDataset(
        values=values,
        user=np.repeat(np.arange(spec.num_users), spec.days),
        dates=np.tile(dates, spec.num_users),
        user_ids=tuple(f"u{u:0{width}d}" for u in range(spec.num_users)),
        labels=labels,
    )
