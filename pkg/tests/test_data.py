import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from silofed import data
from silofed.data import CsvSchema, GeoPoint, ShiftSpec, SiloDataset, SplitPlan


def _gen(seed=0, magnitude=0.0, scale_spread=0.0, offset_spread=0.0, n_silos=4, n=200, dim=5, layout="grid"):
    shift = ShiftSpec.draw(
        n_silos, dim, scale_spread=scale_spread, offset_spread=offset_spread,
        concept_magnitude=magnitude, noise_std=1.0, seed=seed,
    )
    return data.generate_silos(n_silos, n, dim, shift, layout, seed)


def test_geopoint_ranges():
    GeoPoint(90, -180)
    with pytest.raises(ValueError):
        GeoPoint(91, 0)
    with pytest.raises(ValueError):
        GeoPoint(0, 181)


def test_haversine_quarter_meridian():
    d = data.haversine_km(GeoPoint(0, 0), GeoPoint(90, 0))
    assert d == pytest.approx(np.pi / 2 * data.EARTH_RADIUS_KM, rel=1e-12)
    assert data.haversine_km(GeoPoint(40, -90), GeoPoint(40, -90)) == 0.0


def test_generator_is_deterministic():
    a = _gen(seed=3, magnitude=0.5, scale_spread=0.3, offset_spread=0.5)
    b = _gen(seed=3, magnitude=0.5, scale_spread=0.3, offset_spread=0.5)
    for x, y in zip(a, b):
        assert x.silo_id == y.silo_id and x.location == y.location
        assert x.features.tobytes() == y.features.tobytes()
        assert x.targets.tobytes() == y.targets.tobytes()
        assert x.years.tobytes() == y.years.tobytes()


def test_generator_shapes_and_years():
    silos = _gen(n_silos=5, n=30, dim=4)
    assert [s.silo_id for s in silos] == [f"silo{k:02d}" for k in range(5)]
    assert len({s.location for s in silos}) == 5
    for s in silos:
        assert s.features.shape == (30, 4)
        assert set(s.years.tolist()) == set(range(2009, 2016))
        assert np.all(np.isfinite(s.targets))


@pytest.mark.parametrize("kwargs", [dict(n_silos=1), dict(n=5), dict(dim=2)])
def test_generator_rejects_degenerate(kwargs):
    with pytest.raises(ValueError):
        _gen(**kwargs)


def test_shift_spec_validation():
    with pytest.raises(ValueError):
        ShiftSpec(concept_magnitude=-1)
    with pytest.raises(ValueError):
        ShiftSpec(noise_std=-0.1)
    with pytest.raises(ValueError):
        ShiftSpec(scales=np.array([[1.0, 0.0]]))


def test_no_shift_silos_indistinguishable():
    rejections = 0
    for seed in range(20):
        silos = _gen(seed=seed, n=500)
        pooled_a = np.concatenate([silos[0].features.ravel(), [*silos[0].targets]])
        pooled_b = np.concatenate([silos[1].features.ravel(), [*silos[1].targets]])
        if stats.ks_2samp(pooled_a, pooled_b).pvalue < 0.01:
            rejections += 1
    assert rejections == 0


def _ols(x, y):
    design = np.column_stack([np.ones(len(y)), x, x[:, 0] * x[:, 1], np.sin(x[:, 2])])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    sigma2 = resid @ resid / (len(y) - design.shape[1])
    se = np.sqrt(np.diag(sigma2 * np.linalg.inv(design.T @ design)))
    return coef, se


def test_concept_shift_changes_label_coefficients():
    silos = _gen(seed=1, magnitude=1.0, n=1000)
    c0, s0 = _ols(silos[0].features, silos[0].targets)
    c3, s3 = _ols(silos[3].features, silos[3].targets)
    z = np.abs(c0 - c3) / np.sqrt(s0**2 + s3**2)
    assert np.max(z[1:]) > 3.0
    # without concept shift the same fit agrees within sampling error
    flat = _gen(seed=1, magnitude=0.0, n=1000)
    d0, t0 = _ols(flat[0].features, flat[0].targets)
    d3, t3 = _ols(flat[3].features, flat[3].targets)
    assert np.max(np.abs(d0 - d3) / np.sqrt(t0**2 + t3**2)) < 4.0


def test_concept_shift_is_spatially_correlated():
    # average over seeds: neighbouring silos share more of the perturbation
    near, far = [], []
    for seed in range(30):
        locs = data.silo_locations(9, "grid", seed)
        truths = data.ground_truths(9, 5, locs, 1.0, seed)
        vec = [np.concatenate([t.beta, [t.gamma, t.kappa]]) for t in truths]
        near.append(np.linalg.norm(vec[0] - vec[1]))
        far.append(np.linalg.norm(vec[0] - vec[8]))
    assert np.mean(near) < np.mean(far)


def test_covariate_shift_moves_marginals():
    silos = _gen(seed=2, scale_spread=0.5, offset_spread=1.0, n=500)
    means = np.array([s.features.mean(axis=0) for s in silos])
    assert np.ptp(means[:, 0]) > 0.5


def test_random_layout_within_box():
    for p in data.silo_locations(12, "random", 4):
        assert data.LAT_RANGE[0] <= p.lat <= data.LAT_RANGE[1]
        assert data.LON_RANGE[0] <= p.lon <= data.LON_RANGE[1]
    with pytest.raises(ValueError):
        data.silo_locations(3, "hexagonal", 0)


def _write(path, rows, header="silo,lat,lon,year,yield,f0,f1"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return path


SCHEMA = CsvSchema(("f0", "f1"))


def test_load_csv_two_silos(tmp_path):
    rows = [f"{s},40.0,-90.0,{2010 + i},{50 + i},{i},{-i}" for s in ("ia", "il") for i in range(3)]
    silos, report = data.load_csv(_write(tmp_path / "d.csv", rows), SCHEMA)
    assert [s.silo_id for s in silos] == ["ia", "il"]
    assert [len(s) for s in silos] == [3, 3]
    assert report.total_dropped == 0 and report.kept == {"ia": 3, "il": 3}


def test_load_csv_drops_bad_rows(tmp_path, caplog):
    rows = ["ia,40,-90,2010,,1,2", "ia,40,-90,2011,51,1,2", "ia,40,-90,2012,52,nan,2", "ia,40,-90,2013,53,1,2"]
    with caplog.at_level(logging.INFO, logger="silofed.data"):
        silos, report = data.load_csv(_write(tmp_path / "d.csv", rows), SCHEMA)
    assert len(silos[0]) == 2
    assert report.dropped == {"ia": 2}
    assert any(getattr(r, "record", {}).get("event") == "csv_load" for r in caplog.records)


def test_load_csv_single_empty_target_counts_one(tmp_path):
    rows = ["ia,40,-90,2010,,1,2", "ia,40,-90,2011,51,1,2"]
    _, report = data.load_csv(_write(tmp_path / "d.csv", rows), SCHEMA)
    assert report.total_dropped == 1


def test_load_csv_schema_errors(tmp_path):
    p = _write(tmp_path / "d.csv", ["ia,40,-90,2010,50,1"], header="silo,lat,lon,year,yield,f0")
    with pytest.raises(data.SchemaError, match="f1"):
        data.load_csv(p, SCHEMA)
    p = _write(tmp_path / "e.csv", ["ia,40,-90,2010,,1,2"])
    with pytest.raises(ValueError, match="no usable rows"):
        data.load_csv(p, SCHEMA)


def test_csv_round_trip(tmp_path):
    silos = _gen(seed=5, magnitude=0.3, scale_spread=0.2, offset_spread=0.4, n=40)
    path = data.write_csv(silos, tmp_path / "gen.csv")
    loaded, report = data.load_csv(path, data.default_schema(5))
    assert report.total_dropped == 0
    for a, b in zip(silos, loaded):
        assert a.silo_id == b.silo_id
        assert abs(a.location.lat - b.location.lat) < 1e-9
        assert np.max(np.abs(a.features - b.features)) < 1e-9
        assert np.max(np.abs(a.targets - b.targets)) < 1e-9
        assert np.array_equal(a.years, b.years)


def _years_silo(years):
    n = len(years)
    return SiloDataset("s", GeoPoint(40, -90), np.arange(2 * n, dtype=float).reshape(n, 2), np.arange(n, dtype=float), years)


def test_split_examples():
    ds = _years_silo(np.repeat([2013, 2014, 2015], 10))
    train, val, test = data.split(ds, SplitPlan(2015), seed=0)
    assert set(test.years.tolist()) == {2015}
    assert len(train) + len(val) + len(test) == len(ds)
    assert len(val) == 3  # floor(0.15 * 20)
    ids = np.concatenate([train.targets, val.targets, test.targets])
    assert sorted(ids.tolist()) == sorted(ds.targets.tolist())


def test_split_val_count_100():
    ds = _years_silo(np.array([2000] * 100 + [2001] * 5))
    train, val, _ = data.split(ds, SplitPlan(2001), 3)
    assert len(val) == 15 and len(train) == 85


def test_split_excludes_future_years():
    ds = _years_silo(np.repeat([2013, 2014, 2015], 4))
    train, val, test = data.split(ds, SplitPlan(2014), 0)
    assert np.all(np.concatenate([train.years, val.years]) < 2014)
    assert len(train) + len(val) + len(test) == 8


def test_split_errors():
    ds = _years_silo(np.repeat([2013, 2014], 4))
    with pytest.raises(ValueError, match="s"):
        data.split(ds, SplitPlan(2016), 0)
    with pytest.raises(ValueError):
        data.split(ds, SplitPlan(2013), 0)
    with pytest.raises(ValueError):
        SplitPlan(2015, val_fraction=1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(2010, 2014), min_size=2, max_size=60), st.integers(0, 100))
def test_split_is_partition(years, seed):
    years = np.array(years + [2015, 2010])
    ds = _years_silo(years)
    train, val, test = data.split(ds, SplitPlan(2015), seed)
    parts = np.concatenate([train.targets, val.targets, test.targets])
    assert sorted(parts.tolist()) == sorted(ds.targets.tolist())
    assert np.all(test.years == 2015)


def test_histogram_point_mass():
    edges = np.array([0.0, 1.0, 2.0, 3.0])
    h = data.featurize_histogram(np.full((2, 50), 1.5), edges)
    assert h.tolist() == [0, 1, 0, 0, 1, 0]


def test_histogram_clamps_out_of_range():
    edges = np.array([0.0, 1.0, 2.0])
    h = data.featurize_histogram(np.array([[-5.0, 0.5, 2.0, 9.0]]), edges)
    assert h.tolist() == [0.5, 0.5]


def test_histogram_uniform_sampling():
    rng = np.random.default_rng(0)
    raster = rng.uniform(0, 1, size=(3, 10_000))
    h = data.featurize_histogram(raster, np.linspace(0, 1, 5)).reshape(3, 4)
    assert np.all(np.abs(h - 0.25) < 0.02)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(2, 40), st.integers(1, 300), st.integers(0, 1000))
def test_histogram_rows_are_probability_vectors(bands, bins, pixels, seed):
    rng = np.random.default_rng(seed)
    raster = rng.normal(size=(bands, pixels)) * 3
    h = data.featurize_histogram(raster, data.default_bin_edges(-2, 2, bins)).reshape(bands, bins)
    assert np.all(h >= 0)
    assert np.all(np.abs(h.sum(axis=1) - 1) < 1e-12)


def test_histogram_errors():
    with pytest.raises(ValueError):
        data.featurize_histogram(np.zeros((1, 4)), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        data.featurize_histogram(np.zeros((1, 4)), np.array([0.0, 2.0, 1.0]))


def test_normalize_moments_and_identity():
    silos = _gen(seed=6, scale_spread=0.5, offset_spread=2.0)
    normed, norm = data.normalize_features(silos, "per_silo")
    for s in normed:
        assert np.all(np.abs(s.features.mean(axis=0)) < 1e-10)
        assert np.all(np.abs(s.features.std(axis=0) - 1) < 1e-10)
    again, _ = data.normalize_features(normed, "per_silo")
    for a, b in zip(normed, again):
        assert np.max(np.abs(a.features - b.features)) < 1e-6
    means = np.array([norm.stats_for(s.silo_id).mean for s in silos])
    assert np.ptp(means[:, 0]) > 0.1


def test_normalize_global_pools():
    silos = _gen(seed=6, scale_spread=0.5, offset_spread=2.0)
    normed, norm = data.normalize_features(silos, "global")
    pooled = np.concatenate([s.features for s in normed])
    assert np.all(np.abs(pooled.mean(axis=0)) < 1e-10)
    assert np.all(np.abs(pooled.std(axis=0) - 1) < 1e-10)
    assert norm.stats_for("silo00") is norm.stats_for("silo03")


def test_normalize_zero_variance_floor():
    ds = SiloDataset("z", GeoPoint(0, 0), np.column_stack([np.ones(5), np.arange(5.0)]), np.zeros(5), np.zeros(5))
    normed, norm = data.normalize_features([ds], "per_silo")
    assert norm.warnings and "z" in norm.warnings[0]
    assert np.all(np.isfinite(normed[0].features))
    with pytest.raises(ValueError):
        data.normalize_features([ds], "mystery")
