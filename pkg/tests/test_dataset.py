import math

import numpy as np
import pytest

from probcast.dataset import (
    VARIABLES,
    ForecastArchive,
    SyntheticLaw,
    apply_normalization,
    default_split,
    fit_normalization,
    generate_synthetic,
    invert_normalization,
    load_archive,
    read_metadata,
    select_days,
    sidecar_path,
    split,
    write_archive,
)
from probcast.exceptions import (
    DegenerateVariable,
    MalformedRecord,
    OverlappingRanges,
    RangeOutOfBounds,
    ShapeMismatch,
    UnitOutOfRange,
)


def test_archive_arrays_are_read_only(small_archive):
    with pytest.raises(ValueError):
        small_archive.forecasts[0, 0, 0, 0] = 1.0


def test_default_excluded_leads(small_archive):
    assert small_archive.excluded_leads == frozenset({0, 1, 2, 3})
    assert list(small_archive.active_leads) == list(range(4, 10))


def test_shape_checks():
    fc = np.zeros((1, 2, 3, 4))
    with pytest.raises(ShapeMismatch):
        ForecastArchive(fc, np.zeros((1, 2, 3, 3)))
    with pytest.raises(ShapeMismatch):
        ForecastArchive(fc, fc, variables=("Ws", "T"))
    with pytest.raises(RangeOutOfBounds):
        ForecastArchive(fc, fc, excluded_leads={5})


@pytest.mark.parametrize("bad", [-0.1, 2 * math.pi, 7.0])
def test_wind_direction_range(bad):
    fc = np.zeros((1, 1, 1, 4))
    fc[..., 1] = bad
    with pytest.raises(UnitOutOfRange):
        ForecastArchive(fc, np.zeros_like(fc))


def test_round_trip_is_bit_exact(tmp_path, law):
    archive = generate_synthetic(law, (2, 5, 6), seed=11, missing_fraction=0.2)
    path = write_archive(archive, tmp_path / "a.csv")
    back = load_archive(path)
    assert back.equals(archive)
    assert np.isnan(back.observations).any()
    meta = read_metadata(sidecar_path(path))
    assert meta["variables"] == "Ws,Wd,T,P"
    assert meta["units"] == "m/s,rad,K,Pa"
    assert meta["excluded_leads"] == "0,1,2,3"


def _write_and_corrupt(tmp_path, law, edit):
    archive = generate_synthetic(law, (1, 3, 5), seed=1)
    path = write_archive(archive, tmp_path / "a.csv")
    lines = path.read_text().splitlines()
    lines = edit(lines)
    path.write_text("\n".join(lines) + "\n")
    return path


def test_malformed_line_reports_line_number(tmp_path, law):
    def edit(lines):
        lines[4] = lines[4].replace(",", ";", 2)
        return lines

    with pytest.raises(MalformedRecord) as err:
        load_archive(_write_and_corrupt(tmp_path, law, edit))
    assert err.value.line == 5


def test_missing_row_is_shape_mismatch(tmp_path, law):
    with pytest.raises(ShapeMismatch):
        load_archive(_write_and_corrupt(tmp_path, law, lambda lines: lines[:-1]))


def test_out_of_range_value(tmp_path, law):
    def edit(lines):
        cells = lines[2].split(",")
        cells[4] = "9.0"  # Wd forecast
        lines[2] = ",".join(cells)
        return lines

    with pytest.raises(UnitOutOfRange):
        load_archive(_write_and_corrupt(tmp_path, law, edit))


def test_negative_wind_speed_rejected(tmp_path, law):
    def edit(lines):
        cells = lines[2].split(",")
        cells[3] = "-1.0"
        lines[2] = ",".join(cells)
        return lines

    with pytest.raises(UnitOutOfRange):
        load_archive(_write_and_corrupt(tmp_path, law, edit))


def test_normalization_uses_training_days_only(small_archive):
    stats = fit_normalization(small_archive, train_days=range(0, 20))
    cells = small_archive.forecasts[:, :20][:, :, small_archive.active_leads]
    np.testing.assert_allclose(stats.forecast_mean, cells.mean(axis=(1, 2)).T)
    np.testing.assert_allclose(stats.forecast_std, cells.std(axis=(1, 2)).T)
    norm = apply_normalization(small_archive, stats)
    back = invert_normalization(norm, stats)
    np.testing.assert_allclose(back.forecasts, small_archive.forecasts, rtol=0, atol=1e-9)


def test_degenerate_variable_warns_or_raises():
    rng = np.random.default_rng(0)
    fc = rng.uniform(0, 5, (1, 10, 3, 4))
    fc[..., 2] = 280.0
    archive = ForecastArchive(fc, fc.copy(), excluded_leads=())
    with pytest.warns(RuntimeWarning):
        stats = fit_normalization(archive)
    assert stats.forecast_std[2, 0] == 0.0
    assert stats.forecast_scale[2, 0] == 1.0
    with pytest.raises(DegenerateVariable):
        fit_normalization(archive, strict=True)


def test_split_and_select(small_archive):
    train, test = default_split(small_archive, 30, 7)
    assert train.n_days == 30 and test.n_days == 7
    assert test.first_day == 30
    np.testing.assert_array_equal(test.forecasts, small_archive.forecasts[:, 30:37])
    sub = select_days(test, range(2, 4))
    assert sub.first_day == 32
    with pytest.raises(OverlappingRanges):
        split(small_archive, range(0, 20), range(10, 30))
    with pytest.raises(RangeOutOfBounds):
        split(small_archive, range(0, 20), range(20, 50))


def test_synthetic_is_deterministic(law):
    a = generate_synthetic(law, (2, 10, 8), seed=5)
    b = generate_synthetic(law, (2, 10, 8), seed=5)
    c = generate_synthetic(law, (2, 10, 8), seed=6)
    assert a.equals(b)
    assert not a.equals(c)
    assert a.variables == VARIABLES


def test_conditional_law_matches_samples(law):
    archive = generate_synthetic(law, (4, 5000, 6), seed=2, excluded_leads=())
    lead = 5
    f = archive.forecasts[:, :, lead, 0].ravel()
    o = archive.observations[:, :, lead, 0].ravel()
    mean, var = law.conditional("Ws", f, lead)
    resid = o - mean
    assert abs(resid.mean()) < 0.03
    assert abs(resid.var() / var[0] - 1) < 0.03
    assert abs(np.corrcoef(f, o)[0, 1] - law.correlation("Ws")) < 0.02


def test_missing_fraction(law):
    archive = generate_synthetic(law, (3, 200, 8), seed=1, missing_fraction=0.1)
    frac = np.isnan(archive.observations[..., 0]).mean()
    assert 0.08 < frac < 0.12
    assert np.all(np.isfinite(archive.forecasts))


def test_law_validation():
    with pytest.raises(ValueError):
        SyntheticLaw().with_law("Ws", autocorr=1.0)
