import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from guidevae.dataset import (
    Archetype,
    FleetSpec,
    IngestionError,
    MultiUserDataset,
    cyclic_conditions,
    default_archetypes,
    encode_calendar,
    export_readings_csv,
    generate_fleet,
    ingest_readings,
    pooled_index,
    read_readings_csv,
    unpool_index,
)


def _readings(user, day, values, hours=None):
    hours = range(24) if hours is None else hours
    base = pd.Timestamp(day)
    return [(user, base + pd.Timedelta(hours=h), float(v)) for h, v in zip(hours, values)]


@given(st.lists(st.integers(1, 9), min_size=1, max_size=8), st.data())
def test_pooled_index_bijection(counts, data):
    total = sum(counts)
    i = data.draw(st.integers(1, total))
    u, n = unpool_index(i, counts)
    assert pooled_index(u, n, counts) == i


def test_pooled_index_examples():
    assert pooled_index(1, 1, [3, 2]) == 1
    assert pooled_index(2, 1, [3, 2]) == 4
    assert unpool_index(5, [3, 2]) == (2, 2)
    with pytest.raises(IndexError):
        pooled_index(2, 3, [3, 2])
    with pytest.raises(IndexError):
        unpool_index(0, [3, 2])


def test_calendar_encoding_known_dates():
    # 2021-01-04 was a Monday in January
    c = cyclic_conditions(np.array(["2021-01-04", "2021-07-11"], dtype="datetime64[D]"))
    np.testing.assert_allclose(c[0], [0, 1, 0, 1], atol=1e-15)
    np.testing.assert_allclose(c[1], encode_calendar(6, 6))
    with pytest.raises(ValueError):
        cyclic_conditions(np.array(["NaT"], dtype="datetime64[D]"))


def test_ingest_builds_sorted_profiles():
    recs = _readings("b", "2021-03-02", range(24)) + _readings("a", "2021-03-01", np.ones(24))
    recs += _readings("a", "2021-03-02", np.zeros(24))
    ds = ingest_readings(recs)
    assert ds.user_ids == ("a", "b")
    assert ds.values.shape == (3, 24)
    np.testing.assert_array_equal(ds.values[2], np.arange(24))
    assert list(ds.counts) == [2, 1]
    assert list(ds.within_user) == [0, 1, 0]
    assert ds.profile(1).date == np.datetime64("2021-03-02")


def test_ingest_filters_users_and_days():
    recs = _readings("neg", "2021-01-01", [-1] + [1] * 23)
    recs += _readings("zero", "2021-01-01", np.zeros(24))
    recs += _readings("ok", "2021-01-01", np.ones(24))
    recs += _readings("ok", "2021-01-02", np.ones(23), hours=range(23))  # incomplete
    ds = ingest_readings(recs)
    assert ds.user_ids == ("ok",)
    assert len(ds) == 1
    with pytest.raises(IngestionError, match="no user"):
        ingest_readings(recs, min_days=2)


def test_ingest_errors_name_user_and_day():
    recs = _readings("x", "2021-01-01", np.ones(24))
    with pytest.raises(IngestionError, match="x.*2021-01-01"):
        ingest_readings(recs + [recs[3]])
    bad = recs[:-1] + [("x", pd.Timestamp("2021-01-01 23:30"), 1.0)]
    with pytest.raises(IngestionError, match="non-hourly"):
        ingest_readings(bad)
    with pytest.raises(IngestionError):
        ingest_readings([])


def test_csv_roundtrip(tmp_path):
    ds = generate_fleet(FleetSpec(num_users=3, days=4, seed=1))
    export_readings_csv(ds, tmp_path / "r.csv")
    back = read_readings_csv(tmp_path / "r.csv")
    assert back.user_ids == ds.user_ids
    np.testing.assert_array_equal(back.values, ds.values)
    np.testing.assert_array_equal(back.dates, ds.dates)
    (tmp_path / "bad.csv").write_text("user,kwh\n")
    with pytest.raises(IngestionError, match="missing columns"):
        read_readings_csv(tmp_path / "bad.csv")


def test_dataset_validation():
    with pytest.raises(ValueError, match="user-major"):
        MultiUserDataset(np.zeros((2, 3)), np.array([1, 0]), np.zeros(2, "datetime64[D]"), ("a", "b"))
    with pytest.raises(ValueError, match="out of range"):
        MultiUserDataset(np.zeros((1, 3)), np.array([2]), np.zeros(1, "datetime64[D]"), ("a", "b"))


def test_fleet_is_deterministic_and_non_negative():
    spec = FleetSpec(num_users=5, days=10, seed=2)
    a, b = generate_fleet(spec), generate_fleet(spec)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values.min() >= 0
    assert a.values.shape == (50, 24)
    assert len(a.labels) == 5


def test_fleet_zero_inflation_and_correlation():
    arch = Archetype("flat", [1.0] * 24, noise=0.3, zero_prob=0.2, noise_corr=4.0)
    ds = generate_fleet(FleetSpec(num_users=4, days=300, archetypes=[arch], seed=0, user_scale_sd=0.0))
    assert 0.15 < (ds.values == 0).mean() < 0.3
    both = (ds.values[:, 10] > 0) & (ds.values[:, 11] > 0)
    r = np.corrcoef(np.log(ds.values[both, 10]), np.log(ds.values[both, 11]))[0, 1]
    # squared-exponential kernel at lag 1: exp(-1/32)
    assert r == pytest.approx(np.exp(-1 / 32), abs=0.03)


def test_fleet_noise_is_mean_one():
    arch = Archetype("flat", [2.0] * 24, noise=0.5, seasonal_amplitude=0.0)
    ds = generate_fleet(FleetSpec(num_users=50, days=200, archetypes=[arch], seed=1, user_scale_sd=0.0))
    assert ds.values.mean() == pytest.approx(2.0, rel=0.02)
    assert ds.values.min() > 0


def test_default_archetypes_shapes():
    archs = default_archetypes(12, noise_corr=2.0)
    assert all(len(a.template) == 12 and a.noise_corr == 2.0 for a in archs)
    with pytest.raises(ValueError):
        FleetSpec(num_users=2, days=2, archetypes=[archs[0], Archetype("x", [1.0] * 5)])
