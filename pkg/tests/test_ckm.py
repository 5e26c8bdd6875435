"""CKM measurement, map maintenance and file store tests."""

import math

import numpy as np
import pytest

from ckmsim.channel import ChannelObservation, Scene, Target, compute_paths, downlink_observation
from ckmsim.ckm import (
    CkmFormatError,
    CkmGrid,
    ckm_insert,
    ckm_load,
    ckm_query,
    ckm_save,
    grids_equal,
    top_beams,
    ue_measure_rss_per_beam,
)
from ckmsim.waveform import OfdmConfig, SensingFrameSpec, beam_angle, build_sensing_frame


def _obs(matrix):
    return ChannelObservation(matrix=matrix, frame=None, kind="ue_downlink")


# ---------------------------------------------------------------------------
# RSS measurement
# ---------------------------------------------------------------------------


def test_rss_closed_form_all_ones():
    y = np.ones((1024, 8), dtype=complex)
    rss = ue_measure_rss_per_beam(_obs(y), 4, 2)
    np.testing.assert_allclose(rss, 10.0 * math.log10(1024.0), atol=1e-9)
    assert rss[0] == pytest.approx(30.103, abs=1e-3)


def test_rss_gain_scaling():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((64, 8)) + 1j * rng.standard_normal((64, 8))
    base = ue_measure_rss_per_beam(_obs(y), 4, 2)
    scaled = ue_measure_rss_per_beam(_obs(3.0 * y), 4, 2)
    np.testing.assert_allclose(scaled - base, 20.0 * math.log10(3.0), atol=1e-9)


def test_rss_zero_slice_is_minus_inf():
    y = np.zeros((16, 8), dtype=complex)
    y[:, 4:] = 1.0
    rss = ue_measure_rss_per_beam(_obs(y), 4, 2)
    assert rss[0] == -math.inf and np.isfinite(rss[1])


def test_rss_argmax_matches_aimed_beam_end_to_end():
    cfg = OfdmConfig(
        bandwidth_hz=64 * 78.125e3,
        num_subcarriers=64,
        symbol_duration_s=16e-6,
        symbols_per_frame=35,
    )
    sf = SensingFrameSpec(num_beams=8, symbols_per_subframe=4, zc_root=5)
    frame = build_sensing_frame(cfg, sf)
    scene = Scene(bs_position=(0.0, 0.0))
    for q in (0, 2, 6):
        theta = beam_angle(q, 8)
        ue = Target(kind="ue", position=(4.0 * math.sin(theta), 4.0 * math.cos(theta)))
        paths = compute_paths(scene, ue, cfg.wavelength_m)
        obs = downlink_observation(frame, paths, cfg, noise=None)
        rss = ue_measure_rss_per_beam(obs, 4, 8)
        assert int(np.argmax(rss)) == q


# ---------------------------------------------------------------------------
# top beams
# ---------------------------------------------------------------------------


def test_top_beams_examples():
    assert top_beams(np.array([-10.0, -20.0, -5.0]), 2) == [2, 0]
    assert top_beams(np.array([-10.0, -20.0, -5.0]), 1) == [2]
    assert top_beams(np.array([0.0, 0.0]), 2) == [0, 1]  # tie to lower index
    assert top_beams(np.array([1.0, 2.0, 3.0]), 10) == [2, 1, 0]  # truncated
    with pytest.raises(ValueError):
        top_beams(np.array([1.0]), 0)


def test_top_beams_offset_invariance():
    rng = np.random.default_rng(3)
    rss = rng.standard_normal(64)
    assert top_beams(rss, 5) == top_beams(rss + 17.3, 5)


# ---------------------------------------------------------------------------
# insert / query
# ---------------------------------------------------------------------------


def small_grid():
    return CkmGrid(origin_xy=(0.0, 0.0), cell_size_m=0.5, extent=(4, 4), num_beams=4, n_max=2)


def test_insert_rounding_rule():
    grid = small_grid()
    ckm_insert(grid, (0.74, 0.74), np.array([-10.0, -5.0, -20.0, -30.0]))
    assert list(grid.cells) == [(1, 1)]
    assert grid.cells[(1, 1)].center_xy == (0.5, 0.5)
    ckm_insert(grid, (0.75, 0.75), np.zeros(4))  # round-half-up
    assert (2, 2) in grid.cells
    assert grid.cells[(2, 2)].center_xy == (1.0, 1.0)


def test_insert_exact_center_and_overwrite_policy():
    grid = small_grid()
    ckm_insert(grid, (1.0, 1.5), np.array([-10.0, -5.0, -20.0, -30.0]))
    cell = grid.cells[(2, 3)]
    assert cell.beam_indices == [1, 0]
    assert cell.sample_count == 1
    ckm_insert(grid, (1.0, 1.5), np.array([-1.0, -2.0, -3.0, -4.0]))
    cell = grid.cells[(2, 3)]
    assert cell.beam_indices == [0, 1]
    assert cell.sample_count == 2
    np.testing.assert_allclose(cell.rss_db, [-1.0, -2.0, -3.0, -4.0])


def test_insert_out_of_extent_and_floor():
    grid = small_grid()
    with pytest.raises(ValueError):
        ckm_insert(grid, (5.0, 0.0), np.zeros(4))
    ckm_insert(grid, (0.0, 0.0), np.array([-np.inf, -1.0, -2.0, -3.0]))
    assert grid.cells[(0, 0)].rss_db[0] == -300.0


def test_query_policies():
    grid = small_grid()
    assert ckm_query(grid, (0.5, 0.5)) is None  # empty map
    ckm_insert(grid, (0.5, 0.5), np.array([-1.0, -2.0, -3.0, -4.0]))
    hit = ckm_query(grid, (0.5, 0.5))
    assert hit is not None and hit.center_xy == (0.5, 0.5)
    # midway toward an empty neighbor: populated cell within 1.5 cell sizes
    assert ckm_query(grid, (0.75, 0.5)).center_xy == (0.5, 0.5)
    assert ckm_query(grid, (0.5, 1.2)).center_xy == (0.5, 0.5)
    # far outside
    assert ckm_query(grid, (10.0, 10.0)) is None


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------


def test_round_trip_empty_grid(tmp_path):
    grid = small_grid()
    path = tmp_path / "ckm.json"
    ckm_save(grid, path)
    assert grids_equal(ckm_load(path), grid)


def test_round_trip_populated_grid(tmp_path):
    grid = small_grid()
    rng = np.random.default_rng(5)
    for pos in [(0.0, 0.0), (0.5, 0.5), (1.5, 0.0), (1.0, 1.5)]:
        ckm_insert(grid, pos, rng.normal(-40.0, 10.0, 4))
    ckm_insert(grid, (0.5, 0.5), rng.normal(-40.0, 10.0, 4))  # revisit
    path = tmp_path / "ckm.json"
    ckm_save(grid, path)
    loaded = ckm_load(path)
    assert grids_equal(loaded, grid)
    # second generation identical bytes
    path2 = tmp_path / "ckm2.json"
    ckm_save(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_cells_sorted_by_row_then_column(tmp_path):
    grid = small_grid()
    ckm_insert(grid, (1.5, 0.0), np.zeros(4))
    ckm_insert(grid, (0.0, 0.5), np.zeros(4))
    ckm_insert(grid, (0.0, 0.0), np.zeros(4))
    path = tmp_path / "ckm.json"
    ckm_save(grid, path)
    import json

    doc = json.loads(path.read_text())
    order = [(c["ix"], c["iy"]) for c in doc["cells"]]
    assert order == [(0, 0), (3, 0), (0, 1)]


def test_duplicate_cell_record_rejected(tmp_path):
    grid = small_grid()
    ckm_insert(grid, (0.0, 0.0), np.zeros(4))
    path = tmp_path / "ckm.json"
    ckm_save(grid, path)
    import json

    doc = json.loads(path.read_text())
    doc["cells"].append(doc["cells"][0])
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(CkmFormatError, match="duplicate"):
        ckm_load(bad)


def test_malformed_file_errors_name_the_record(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(CkmFormatError):
        ckm_load(path)
    import json

    grid = small_grid()
    ckm_insert(grid, (0.0, 0.0), np.zeros(4))
    ok = tmp_path / "ok.json"
    ckm_save(grid, ok)
    doc = json.loads(ok.read_text())
    del doc["cells"][0]["rss_db"]
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps(doc))
    with pytest.raises(CkmFormatError, match="ix=0"):
        ckm_load(broken)
