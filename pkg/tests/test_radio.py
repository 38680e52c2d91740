import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slarm.grid import OccupancyGrid
from slarm.radio import (RicianParams, build_radio_map, expected_gain_db,
                         los_blocked, path_loss_db, sample_channel,
                         segment_intersects_box, write_radio_csv,
                         write_radio_matrix_csv)
from slarm.world import Box, load_scenario, rasterize_ground_truth


class TestPathLoss:
    def test_unit_distance_unit_frequency(self):
        assert path_loss_db(1.0, 1.0, los=True) == pytest.approx(31.84)

    def test_los_at_ten_meters(self):
        assert path_loss_db(10.0, 3.5, los=True) == pytest.approx(63.677, abs=1e-3)

    def test_nlos_takes_max(self):
        assert path_loss_db(10.0, 3.5, los=False) == pytest.approx(66.281, abs=1e-3)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            path_loss_db(0.0, 3.5, los=True)
        with pytest.raises(ValueError):
            path_loss_db(1.0, -1.0, los=True)

    @given(st.floats(1.0, 500.0), st.floats(0.5, 100.0))
    def test_nlos_never_below_los(self, d, fc):
        assert path_loss_db(d, fc, los=False) >= path_loss_db(d, fc, los=True)

    @given(st.floats(1.0, 100.0), st.floats(1.0, 100.0))
    def test_monotone_in_distance(self, d, factor):
        assert path_loss_db(d * (1.0 + factor), 3.5, los=True) \
            > path_loss_db(d, 3.5, los=True)


@pytest.fixture()
def blockage_scenario():
    return load_scenario({
        "room": {"x_max": 5.0, "y_max": 3.5, "height": 3.0},
        "ap": {"x": 0.0, "y": 3.5, "z": 2.5},
        "walls": [{"center": [0.0, 1.75], "size": [6.5, 0.5, 1.8]}],
        "obstacles": [{"center": [0.0, 2.75], "size": [2.0, 0.5, 1.5]}],
    })


class TestLosBlocked:
    def test_clear_vertical_link(self, blockage_scenario):
        sc = blockage_scenario
        assert not los_blocked(sc, sc.ap_position, (0.0, 3.4, 0.3))

    def test_wall_blocks_when_crossing_below_top(self, blockage_scenario):
        sc = blockage_scenario
        # segment crosses the 1.8 m wall band (y in [1.5, 2.0]) at z < 1.8
        receiver = (0.0, 0.0, 0.3)
        t = (3.5 - 2.0) / 3.5
        z_at_wall = 2.5 + t * (0.3 - 2.5)
        assert z_at_wall < 1.8
        assert los_blocked(sc, sc.ap_position, receiver)

    def test_passes_over_low_obstacle(self):
        sc = load_scenario({
            "room": {"x_max": 5.0, "y_max": 3.5, "height": 3.0},
            "ap": {"x": 0.0, "y": 3.5, "z": 2.5},
            "obstacles": [{"center": [0.0, 2.75], "size": [2.0, 0.5, 1.5]}],
        })
        # far receiver: the obstacle band (y in [2.5, 3.0]) is crossed close
        # to the AP where the segment is still above 1.5 m
        receiver = (0.0, 0.0, 0.3)
        t_far = (3.5 - 2.5) / 3.5
        z_min = 2.5 + t_far * (0.3 - 2.5)
        assert z_min > 1.5
        assert not los_blocked(sc, sc.ap_position, receiver)
        # near receiver: the same band is crossed low, so it blocks
        assert los_blocked(sc, sc.ap_position, (0.0, 2.3, 0.3))

    @given(st.floats(-4.5, 4.5), st.floats(-3.0, 3.0),
           st.floats(-4.5, 4.5), st.floats(-3.0, 3.0))
    def test_symmetric_in_endpoints(self, x1, y1, x2, y2):
        sc = load_scenario({
            "room": {"x_max": 5.0, "y_max": 3.5, "height": 3.0},
            "obstacles": [{"center": [1.0, 0.5], "size": [1.5, 1.0, 1.4]}],
        })
        a = (x1, y1, 2.5)
        b = (x2, y2, 0.3)
        assert los_blocked(sc, a, b) == los_blocked(sc, b, a)

    def test_touch_at_endpoint_does_not_block(self):
        box = Box(-1.0, 1.0, 1.0, 2.0, 0.0, 3.0)
        # start exactly on the y_min face, heading away
        assert not segment_intersects_box((0.0, 1.0, 1.5), (0.0, 0.0, 1.5), box)
        # crossing through does block
        assert segment_intersects_box((0.0, 0.5, 1.5), (0.0, 2.5, 1.5), box)


class TestExpectedGain:
    def test_cell_below_ap(self, room_scenario):
        gain = expected_gain_db(room_scenario, (0.0, 3.5))
        assert gain == pytest.approx(-49.539, abs=1e-3)

    def test_nlos_strictly_lower(self, blockage_scenario):
        sc = blockage_scenario
        d = math.sqrt(3.5 ** 2 + 2.2 ** 2)
        clear = -path_loss_db(d, sc.fc_ghz, los=True)
        behind_wall = expected_gain_db(sc, (0.0, 0.0))
        assert behind_wall < clear

    def test_symmetric_cells_equal_gain(self, room_scenario):
        left = expected_gain_db(room_scenario, (-2.0, -2.5))
        right = expected_gain_db(room_scenario, (2.0, -2.5))
        assert left == pytest.approx(right, abs=1e-9)

    def test_outside_room_rejected(self, room_scenario):
        with pytest.raises(ValueError):
            expected_gain_db(room_scenario, (99.0, 0.0))


class TestSampleChannel:
    def test_same_seed_identical(self):
        params = RicianParams(alpha_bar=10.0)
        a = sample_channel(params, blocked=False, rng_seed=3)
        b = sample_channel(params, blocked=False, rng_seed=3)
        assert a.h == b.h

    def test_blocked_is_rayleigh_with_unit_power(self):
        h = sample_channel(RicianParams(5.0), blocked=True, rng_seed=0,
                           size=200_000)
        assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, abs=2e-2)

    def test_large_k_limit_is_deterministic(self):
        h = sample_channel(RicianParams(1e6), blocked=False, rng_seed=0,
                           size=10_000)
        assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, abs=1e-2)
        assert np.std(np.abs(h)) < 1e-2

    def test_negative_factor_rejected(self):
        with pytest.raises(ValueError):
            RicianParams(alpha_bar=-1.0)


class TestBuildRadioMap:
    def test_equal_grids_equal_maps(self, room_scenario):
        gt = rasterize_ground_truth(room_scenario, 0.25)
        est = OccupancyGrid.from_tristate(gt.tristate(), 0.25,
                                          room_scenario.x_max,
                                          room_scenario.y_max)
        a = build_radio_map(gt, room_scenario)
        b = build_radio_map(est, room_scenario)
        assert np.array_equal(a.gain_db, b.gain_db, equal_nan=True)
        assert np.array_equal(a.los, b.los)

    def test_open_room_all_los(self, open_room):
        gt = rasterize_ground_truth(open_room, 0.25)
        radio = build_radio_map(gt, open_room)
        assert (radio.los == 1).all()
        assert np.isfinite(radio.gain_db).all()

    def test_gain_decreases_with_distance_among_los(self, room_scenario):
        gt = rasterize_ground_truth(room_scenario, 0.25)
        radio = build_radio_map(gt, room_scenario)
        xs, ys = gt.center_mesh()
        ax, ay, az = room_scenario.ap_position
        d = np.sqrt((xs - ax) ** 2 + (ys - ay) ** 2
                    + (az - room_scenario.h_m) ** 2)
        los = radio.los == 1
        order = np.argsort(d[los])
        gains = radio.gain_db[los][order]
        assert (np.diff(gains) <= 1e-12).all()

    def test_no_data_on_unexplored_and_occupied(self, room_scenario):
        gt = rasterize_ground_truth(room_scenario, 0.25)
        tri = gt.tristate()
        tri[:10, :10] = 0.0  # pretend a corner was never explored
        est = OccupancyGrid.from_tristate(tri, 0.25, room_scenario.x_max,
                                          room_scenario.y_max)
        radio = build_radio_map(est, room_scenario)
        assert radio.no_data()[:10, :10].all()
        assert (radio.los[tri == 1.0] == -1).all()

    def test_blockage_matches_box_oracle_in_open_view(self, blockage_scenario):
        # cells between AP and wall are LoS, cells behind the wall NLoS
        gt = rasterize_ground_truth(blockage_scenario, 0.25)
        radio = build_radio_map(gt, blockage_scenario)
        front = gt.world_to_grid(0.0, 3.2)
        behind = gt.world_to_grid(0.0, 0.0)
        assert radio.los[front[0] - 1, front[1] - 1] == 1
        assert radio.los[behind[0] - 1, behind[1] - 1] == 0


class TestRadioExports:
    def test_csv_deterministic_and_skips_no_data(self, tmp_path, open_room):
        gt = rasterize_ground_truth(open_room, 0.5)
        radio = build_radio_map(gt, open_room)
        radio.gain_db[0, 0] = np.nan
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_radio_csv(radio, p1)
        write_radio_csv(radio, p2)
        assert p1.read_bytes() == p2.read_bytes()
        lines = p1.read_text().splitlines()
        assert lines[0] == "a,b,x_m,y_m,los,path_loss_db,gain_db"
        assert len(lines) == 1 + int(np.isfinite(radio.gain_db).sum())

    def test_matrix_shape(self, tmp_path, open_room):
        gt = rasterize_ground_truth(open_room, 0.5)
        radio = build_radio_map(gt, open_room)
        path = tmp_path / "m.csv"
        write_radio_matrix_csv(radio, path)
        rows = path.read_text().splitlines()
        assert len(rows) == gt.ny
        assert all(len(r.split(",")) == gt.nx for r in rows)
