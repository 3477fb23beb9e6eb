import json

import numpy as np
import pytest

from ensbench.dynamics import (IntegrationFault, L96Config, Ridge, VortexScenario, build_dataset,
                               chronological_split, frame_stratum, l96_frames, l96_integrate,
                               l96_tendency, load_scenarios, random_scenario, relative_vorticity,
                               save_scenarios, split_datasets, vortex_fields)
from ensbench.grid import GridSpec, great_circle_km


def test_fixed_points():
    for F in (0.0, 3.0, 8.0):
        x = np.full(40, F)
        assert np.all(l96_tendency(x, F) == 0)
        traj = l96_integrate(x, L96Config(F=F), 20)
        np.testing.assert_array_equal(traj, np.tile(x, (21, 1)))


def test_tendency_formula(rng):
    x = rng.standard_normal(6)
    ref = [(x[(i + 1) % 6] - x[i - 2]) * x[i - 1] - x[i] + 8.0 for i in range(6)]
    np.testing.assert_allclose(l96_tendency(x, 8.0), ref, rtol=1e-14)


def test_rk4_fourth_order(rng):
    x0 = 8.0 + rng.standard_normal(40)
    T = 0.2

    def run(dt):
        return l96_integrate(x0, L96Config(dt=dt), int(round(T / dt)))[-1]

    ref = run(0.05 / 8)
    e1 = np.abs(run(0.05) - ref).max()
    e2 = np.abs(run(0.025) - ref).max()
    assert 12.0 < e1 / e2 < 20.0


def test_blow_up_detected():
    with pytest.raises(IntegrationFault):
        l96_integrate(np.full(8, 1e4) * np.arange(8), L96Config(K=8, dt=0.5), 50)
    with pytest.raises(IntegrationFault):
        l96_integrate(np.array([np.nan] * 8), L96Config(K=8), 1)


def test_frames_shape_and_seed():
    g, f = l96_frames(L96Config(K=12, spinup=50), 30, seed=4)
    assert f.shape == (30, 1, 1, 12) and g.shape == (1, 12) and g.periodic
    np.testing.assert_array_equal(f, l96_frames(L96Config(K=12, spinup=50), 30, seed=4)[1])


def test_dataset_counts():
    frames = np.zeros((10, 1, 1, 4))
    assert len(build_dataset(frames, 2, 1)) == 8
    assert len(build_dataset(frames, 2, 3)) == 6
    with pytest.raises(ValueError):
        build_dataset(frames[:3], 2, 3)


def test_split_disjoint_and_chronological():
    n = 17 * 20
    ranges = chronological_split(n)
    assert ranges["train"] == (0, 300) and ranges["validation"] == (300, 320) and ranges["test"] == (320, 340)
    data = split_datasets(np.zeros((n, 1, 1, 4)), K=3)
    used = {}
    for name, d in data.items():
        lo, hi = ranges[name]
        touched = set()
        for s in d.samples:
            idx = range(s, s + 2 + d.horizon)
            assert lo <= min(idx) and max(idx) < hi
            touched.update(idx)
        used[name] = touched
    assert not (used["train"] & used["validation"]) and not (used["validation"] & used["test"])


def test_frame_stratum():
    assert frame_stratum(0, 200) == (1, 0)
    assert frame_stratum(3, 200) == (1, 18)
    assert frame_stratum(199, 200) == (12, 18)
    assert frame_stratum(200, 200) == (1, 0)


GRID = GridSpec(160, 200, 0.125, 0.25, 110.125, 0.25)


def test_vortex_center_and_far_field():
    sc = VortexScenario(20.0, 135.0, 45.0, 20.0, depth_hpa=40.0, radius_km=250.0)
    lat, lon = sc.center(0.0)
    g = GridSpec(41, 41, lat - 5.0, 0.25, lon - 5.0, 0.25)
    f = vortex_fields(sc, 0.0, g)
    assert f["msl"].values[20, 20] == pytest.approx(sc.background_hpa - sc.depth_hpa, abs=1e-9)
    lat2, lon2 = GRID.mesh()
    d = great_circle_km((lat, lon), (lat2, lon2))
    msl = vortex_fields(sc, 0.0, GRID)["msl"].values
    far = d >= 10 * sc.radius_km
    assert far.any()
    assert np.abs(msl[far] - sc.background_hpa).max() < 1e-6 * sc.depth_hpa


@pytest.mark.parametrize("lat0,sign", [(20.0, 1.0), (-20.0, -1.0)])
def test_vortex_cyclonic(lat0, sign):
    g = GridSpec(81, 81, lat0 - 10.0, 0.25, 125.0, 0.25)
    sc = VortexScenario(lat0, 135.0, 0.0, 0.0)
    f = vortex_fields(sc, 0.0, g)
    zeta = relative_vorticity(f["u10"], f["v10"])
    assert sign * zeta[40, 40] > 5e-5


def test_vortex_moves_and_vanishes():
    sc = VortexScenario(15.0, 140.0, 270.0, 15.0, lifetime_hours=24.0)
    assert great_circle_km(sc.center(0), sc.center(10)) == pytest.approx(150.0, rel=1e-9)
    assert sc.active(18.0) and not sc.active(24.0)
    f = vortex_fields(sc, 30.0, GRID)
    assert f["centers"] == [] and np.all(f["msl"].values == sc.background_hpa)


def test_ridge_elevation():
    sc = VortexScenario(20.0, 135.0, ridges=[Ridge(18.0, 22.0, 133.0, 137.0, 1500.0)])
    elev = vortex_fields(sc, 0.0, GRID)["elevation"]
    i, j = GRID.index_of(20.0, 135.0)
    assert elev.values[i, j] == 1500.0 and elev.values[0, 0] == 0.0


def test_random_scenarios_stay_inside(rng):
    box = (10.0, 30.0, 120.0, 150.0)
    for _ in range(20):
        sc = random_scenario(rng, box, 10.0, 20.0, 48.0)
        assert 10.0 <= sc.speed_kmh <= 20.0
        for t in np.linspace(0, 48, 9):
            la, lo = sc.center(t)
            assert box[0] <= la <= box[1] and box[2] <= lo <= box[3]
    with pytest.raises(ValueError):
        random_scenario(rng, (10.0, 11.0, 120.0, 121.0), 30.0, 40.0, 120.0)


def test_scenario_file_round_trip(tmp_path):
    sc = [VortexScenario(20.0, 135.0, 10.0, 12.0, ridges=[Ridge(1, 2, 3, 4)]), VortexScenario(-15.0, 150.0)]
    save_scenarios(tmp_path / "s.json", sc, {"meta": {"seed": 1}})
    assert load_scenarios(tmp_path / "s.json") == sc
    assert json.loads((tmp_path / "s.json").read_text())["meta"]["seed"] == 1
