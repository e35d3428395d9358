import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rampwise.data import (DatasetBundle, MissingColumn, NonMonotonicTimestamps, PowerSeries, TooShort,
                           ZeroRatedPower, EmptyFile, chronological_split, load_csv, normalize)

H = 3600


def _csv(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


def test_three_row_csv(tmp_path):
    p = _csv(tmp_path, "timestamp,power\n0,1\n3600,2\n7200,3\n")
    b = load_csv(p, {"rated_power": 10})
    assert len(b) == 3
    assert not b.imputed.any()
    assert b.segments == ((0, 3),)


def test_two_hour_gap_imputed(tmp_path):
    p = _csv(tmp_path, "timestamp,power,wind\n0,10,1\n3600,20,2\n10800,40,4\n")
    b = load_csv(p, {"rated_power": 100})
    assert len(b) == 4
    assert b.imputed.tolist() == [False, False, True, False]
    # linear interpolation by hand: midway between 20 and 40
    assert b.power.values[2] == pytest.approx(30.0)
    assert b.covariates.columns["wind"][2] == pytest.approx(3.0)
    assert b.power.timestamps[2] == 7200


def test_long_gap_splits_segments(tmp_path):
    p = _csv(tmp_path, "timestamp,power\n" + "".join(f"{t * H},{t}\n" for t in (0, 1, 2, 10, 11, 12, 13)))
    b = load_csv(p, {"rated_power": 100})
    assert b.segments == ((0, 3), (3, 7))
    assert len(b.longest_segment()) == 4


def test_iso_timestamps(tmp_path):
    p = _csv(tmp_path, "timestamp,power\n2020-01-01T00:00Z,1\n2020-01-01T01:00Z,2\n")
    b = load_csv(p, {"rated_power": 10})
    assert b.power.timestamps.tolist() == [1577836800, 1577840400]


def test_missing_power_column(tmp_path):
    with pytest.raises(MissingColumn):
        load_csv(_csv(tmp_path, "timestamp,wind\n0,1\n"), {"rated_power": 1})


def test_non_monotonic(tmp_path):
    with pytest.raises(NonMonotonicTimestamps):
        load_csv(_csv(tmp_path, "timestamp,power\n3600,1\n0,2\n"), {"rated_power": 1})


def test_empty_file(tmp_path):
    with pytest.raises(EmptyFile):
        load_csv(_csv(tmp_path, ""), {"rated_power": 1})
    with pytest.raises(EmptyFile):
        load_csv(_csv(tmp_path, "timestamp,power\n"), {"rated_power": 1})


def _series(values, rated):
    return PowerSeries(np.arange(len(values)) * H, np.asarray(values, float), rated)


def test_normalize_examples():
    assert normalize(_series([0, 237.5, 475], 475)).values.tolist() == [0.0, 0.5, 1.0]
    z = normalize(_series([0, 0, 0], 475))
    assert z.values.tolist() == [0, 0, 0] and z.violations == 0
    c = normalize(_series([480], 475))
    assert c.values.tolist() == [1.0] and c.violations == 1
    with pytest.raises(ZeroRatedPower):
        normalize(_series([1], 0))


def test_ingest_clamps_out_of_range(tmp_path):
    b = load_csv(_csv(tmp_path, "timestamp,power\n0,-5\n3600,480\n"), {"rated_power": 475})
    assert b.power.values.tolist() == [0.0, 475.0]


@pytest.mark.parametrize("n,expected", [(1000, (700, 150, 150)), (10, (7, 1, 2))])
def test_split_lengths(n, expected):
    b = DatasetBundle(_series(np.ones(n), 1.0))
    parts = chronological_split(b)
    assert tuple(len(p) for p in parts) == expected


def test_split_too_short():
    with pytest.raises(TooShort):
        chronological_split(DatasetBundle(_series(np.ones(9), 1.0)))


@given(st.lists(st.floats(0, 600, allow_nan=False), min_size=1, max_size=50), st.floats(1, 500))
def test_normalize_round_trip(values, rated):
    norm = normalize(_series(values, rated))
    assert np.all((norm.values >= 0) & (norm.values <= 1))
    np.testing.assert_allclose(norm.values * rated, np.clip(values, 0, rated), atol=1e-12 * max(rated, 1))


@given(st.integers(10, 3000))
def test_split_partitions(n):
    b = DatasetBundle(_series(np.arange(n, dtype=float), float(n)))
    tr, va, te = chronological_split(b)
    assert len(tr) + len(va) + len(te) == n
    joined = np.concatenate([tr.power.values, va.power.values, te.power.values])
    assert np.array_equal(joined, b.power.values)
    if len(va) and len(te):
        assert tr.power.timestamps.max() < va.power.timestamps.min() < te.power.timestamps.min()
