from datetime import datetime

import numpy as np
import pytest

from tcfusion.evaluation import haversine_km
from tcfusion.gph import (
    AnalyticGPHSource, CoverageError, GridDirectorySource, InMemoryGPHSource, LatLonGrid,
    crop_gph, format_grid, parse_grid, read_grid, write_grid_archive, write_stack,
)

WHEN = datetime(2000, 8, 1, 0)


def ramp_source(res=0.5):
    lat0, lon0 = 0.0, 100.0
    lats = lat0 + res * np.arange(101)
    lons = lon0 + res * np.arange(141)
    values = 1000 * lats[:, None] + lons[None, :]
    return InMemoryGPHSource({WHEN: LatLonGrid(lat0, lon0, res, values)})


def test_constant_field_crop():
    src = AnalyticGPHSource(lambda la, lo, t: np.full(la.shape, 5880.0), (0, 50), (100, 170), 0.5)
    crop = crop_gph(src, (20.0, 130.0), WHEN, q=51)
    assert crop.shape == (51, 51)
    assert np.all(crop == 5880.0)


def test_crop_centered_on_nearest_cell():
    src = ramp_source()
    crop = crop_gph(src, (20.2, 130.3), WHEN, q=5)
    # nearest cell: lat 20.0, lon 130.5; rows run south to north
    assert crop[2, 2] == 1000 * 20.0 + 130.5
    assert crop[0, 2] == 1000 * 19.0 + 130.5
    assert crop[2, 4] == 1000 * 20.0 + 131.5


def test_crop_half_width_is_about_1400_km():
    # 51 cells at 0.5 deg span 25.5 deg; half of that along the equator
    half = haversine_km(0.0, 0.0, 0.0, 25.5) / 2
    assert abs(half - 1417.7) < 0.5
    assert 1400 <= half <= 1420


def test_crop_outside_coverage_names_extent():
    with pytest.raises(CoverageError, match=r"needs lat .* source covers lat"):
        crop_gph(ramp_source(), (2.0, 130.0), WHEN, q=51)


def test_even_q_rejected():
    with pytest.raises(ValueError, match="odd"):
        crop_gph(ramp_source(), (20.0, 130.0), WHEN, q=50)


def test_missing_time_is_coverage_error():
    with pytest.raises(CoverageError):
        crop_gph(ramp_source(), (20.0, 130.0), datetime(2000, 8, 1, 6), q=5)


def test_resolution_mismatch_rejected():
    with pytest.raises(ValueError, match="resolution"):
        crop_gph(ramp_source(), (20.0, 130.0), WHEN, q=5, resolution=1.0)


def test_grid_text_round_trip():
    grid = LatLonGrid(10.0, 120.0, 0.5, np.arange(12.0).reshape(3, 4) + 5800.25)
    stamp, again = parse_grid(format_grid(WHEN, grid))
    assert stamp == WHEN
    assert again.shape == (3, 4)
    np.testing.assert_array_equal(again.values, grid.values)
    assert (again.lat0, again.lon0, again.resolution) == (10.0, 120.0, 0.5)


def test_square_grid_header_has_single_size():
    grid = LatLonGrid(0.0, 100.0, 1.0, np.zeros((3, 3)))
    header = format_grid(WHEN, grid).splitlines()[0].split()
    assert header == ["2000080100", "0.0", "100.0", "1.0", "3"]


def test_grid_shape_mismatch_rejected():
    text = "2000080100 0.0 100.0 1.0 3\n1 2 3\n4 5 6\n"
    with pytest.raises(ValueError, match="shape"):
        parse_grid(text)


def test_non_finite_grid_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        parse_grid("2000080100 0.0 100.0 1.0 1\nnan\n")


def test_archive_round_trip(tmp_path):
    grids = [(WHEN, LatLonGrid(0.0, 100.0, 1.0, np.full((5, 5), 5870.0))),
             (datetime(2000, 8, 1, 6), LatLonGrid(0.0, 100.0, 1.0, np.full((5, 5), 5871.0)))]
    directory = write_grid_archive(tmp_path / "gph", grids)
    src = GridDirectorySource(directory)
    assert src.timestamps() == [g[0] for g in grids]
    assert np.all(crop_gph(src, (2.0, 102.0), datetime(2000, 8, 1, 6), q=3) == 5871.0)
    with pytest.raises(CoverageError):
        src.grid_at(datetime(2001, 1, 1))


def test_archive_requires_index(tmp_path):
    with pytest.raises(FileNotFoundError, match="index"):
        GridDirectorySource(tmp_path)


def test_write_stack_blocks(tmp_path):
    stack = np.arange(2 * 3 * 3, dtype=float).reshape(2, 3, 3)
    path = tmp_path / "stack.txt"
    write_stack(path, [WHEN, datetime(2000, 8, 1, 6)], [(20.0, 130.0), (20.5, 130.5)], stack, 0.5)
    lines = path.read_text().splitlines()
    assert len(lines) == 8
    _, grid = parse_grid("\n".join(lines[:4]))
    assert (grid.lat0, grid.lon0) == (19.5, 129.5)
    np.testing.assert_array_equal(grid.values, stack[0])
