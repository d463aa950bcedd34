import json

import numpy as np
import pytest

from rssimap.errors import ConfigError, SchemaError
from rssimap.grid import (
    GridSpec,
    RadioMap,
    read_esri_ascii,
    read_grid,
    read_grid_bands,
    write_esri_ascii,
    write_grid,
)


def test_spec_validation():
    with pytest.raises(ConfigError):
        GridSpec(0, 0, 0.0, 4, 4)
    with pytest.raises(ConfigError):
        GridSpec(0, 0, 10, 0, 4)


def test_centres_and_locate():
    spec = GridSpec(100.0, 200.0, 10.0, 4, 3)
    e, n = spec.center(2, 1)
    assert (e, n) == (115.0, 225.0)
    rows, cols, inside = spec.locate(np.array([115.0, 99.0, 140.0]), np.array([225.0, 205.0, 205.0]))
    assert rows.tolist() == [2, -1, -1] and cols.tolist() == [1, -1, -1]
    assert inside.tolist() == [True, False, False]


def test_grid_container_round_trip(tmp_path):
    spec = GridSpec(-50.0, 20.0, 10.0, 5, 3)
    arr = np.arange(15, dtype=float).reshape(3, 5) - 100
    arr[1, 2] = np.nan
    path = tmp_path / "g.f32"
    write_grid(path, arr, spec)
    meta = json.loads((tmp_path / "g.json").read_text())
    assert meta == {"width": 5, "height": 3, "cell_m": 10.0, "origin_east": -50.0,
                    "origin_north": 20.0, "nodata": -999.0}
    raw = np.fromfile(path, dtype="<f4")
    assert raw[7] == -999.0 and raw[0] == -100.0
    back, spec2 = read_grid(path)
    assert spec2 == spec
    np.testing.assert_array_equal(np.isnan(back), np.isnan(arr))
    np.testing.assert_array_equal(back[~np.isnan(arr)], arr[~np.isnan(arr)])


def test_multiband(tmp_path):
    spec = GridSpec(0, 0, 1, 2, 2)
    arr = np.random.default_rng(0).random((3, 2, 2)).astype(np.float32)
    write_grid(tmp_path / "s.f32", arr, spec, bands=["a", "b", "c"])
    back, _, bands = read_grid_bands(tmp_path / "s.f32")
    assert bands == ["a", "b", "c"]
    np.testing.assert_array_equal(back, arr)


def test_missing_sidecar(tmp_path):
    np.zeros(4, "<f4").tofile(tmp_path / "x.f32")
    with pytest.raises(SchemaError):
        read_grid(tmp_path / "x.f32")


def test_radiomap_round_trip_with_dotted_stem(tmp_path):
    spec = GridSpec(0, 0, 10, 3, 2)
    m = RadioMap(spec, np.array([[-90, -91, -92], [-93, -94, -95.0]]),
                 np.array([[1, 0, 1], [0, 1, 1]], bool),
                 np.array([[3, 0, 4], [1, 2, 5]]),
                 np.array([[0.5, np.nan, 1.0], [np.nan, 0.0, 2.0]]))
    stem = tmp_path / "bs.1.train"
    m.save(stem)
    back = RadioMap.load(stem)
    np.testing.assert_array_equal(back.mask, m.mask)
    np.testing.assert_array_equal(back.count, m.count)
    np.testing.assert_allclose(back.values, m.values)
    np.testing.assert_array_equal(np.isnan(back.cell_std), np.isnan(m.cell_std))


def test_esri_round_trip_and_orientation(tmp_path):
    spec = GridSpec(300.0, 600.0, 30.0, 3, 2)
    arr = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, np.nan]])
    write_esri_ascii(tmp_path / "d.asc", arr, spec)
    first_data_line = (tmp_path / "d.asc").read_text().splitlines()[6]
    assert first_data_line.split()[0] == "4"  # northern row is written first
    back, spec2 = read_esri_ascii(tmp_path / "d.asc")
    assert spec2 == spec
    np.testing.assert_array_equal(np.isnan(back), np.isnan(arr))
    assert back[0, 0] == 1.0


def test_esri_center_header(tmp_path):
    (tmp_path / "c.asc").write_text("ncols 2\nnrows 1\nxllcenter 15\nyllcenter 15\ncellsize 30\n7 8\n")
    arr, spec = read_esri_ascii(tmp_path / "c.asc")
    assert spec.origin_east == 0.0 and arr.tolist() == [[7.0, 8.0]]
