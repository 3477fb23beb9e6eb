"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line."""
import csv
import json
import math
import shutil
import time
from importlib import resources

import numpy as np
import pytest

from ensbench.climatology import climatology_percentiles
from ensbench.cli import EXIT_OK, main
from ensbench.dynamics import L96Config, Ridge, VortexScenario, build_dataset, l96_frames, random_scenario, vortex_fields
from ensbench.grid import GridSpec, great_circle_km
from ensbench.losses import GaussianLatent, crps_loss_grad, gaussian_kl_grad, l1_loss_grad
from ensbench.metrics import brier, crps_ensemble
from ensbench.model import Architecture, init_params, rollout
from ensbench.tracking import Track, TrackPoint, aggregate_track_stats, ensemble_track_stats, track_storm
from ensbench.train import TrainConfig, grad_check, make_batch

from oracles import crps_by_integration

CONFIGS = resources.files("ensbench") / "configs"
PIPELINE = ["gen-data", "train", "forecast", "verify", "track", "report"]


@pytest.fixture
def verdict(capsys):
    def say(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail
    return say


def test_crps_matches_integration(verdict):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst, mae_ok = 0.0, True
    for i in range(1000):
        n = i % 16 + 1
        x = rng.normal(rng.normal(), rng.uniform(0.1, 3.0), n)
        y = float(rng.normal())
        got = float(crps_ensemble(x[:, None], np.array([y]))[0])
        worst = max(worst, abs(got - crps_by_integration(x, y)))
        if n == 1:
            mae_ok &= got == abs(x[0] - y)
    dt = time.perf_counter() - t0
    verdict("1 CRPS oracle", worst < 1e-6 and mae_ok and dt < 10,
            f"max |diff| {worst:.2e}, N=1 equals MAE: {mae_ok}, {dt:.2f} s")


def _fd_check(fn, base, eps=1e-6, skip=None):
    """Max relative error of fn's gradient (fn(x) -> (value, grad)) on every coordinate."""
    _, g = fn(base)
    worst = 0.0
    for i in range(base.size):
        if skip is not None and skip(base, i, eps):
            continue
        hi, lo = base.copy(), base.copy()
        hi.flat[i] += eps
        lo.flat[i] -= eps
        fd = (fn(hi)[0] - fn(lo)[0]) / (2 * eps)
        worst = max(worst, abs(g.flat[i] - fd) / max(abs(g.flat[i]), abs(fd), 1e-6))
    return worst


def _near_kink(target):
    def skip(x, i, eps):
        # a member crossing another member or the target changes the slope
        xi = x.flat[i]
        col = x[:, i % x.shape[1]]
        others = np.append(np.delete(col, i // x.shape[1]), target.flat[i % x.shape[1]])
        return np.min(np.abs(others - xi)) < 10 * eps
    return skip


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    data = {}
    for k in (6, 8):
        _, frames = l96_frames(L96Config(K=k, spinup=200), 40, seed=k)
        data[k] = (build_dataset(frames, 2, 3), frames.mean(axis=(0, 2, 3)), frames.std(axis=(0, 2, 3)))
    worst = {"crps": 0.0, "kl": 0.0, "l1": 0.0, "objective": 0.0}
    checked = 0
    for m in range(100):
        rng = np.random.default_rng(1000 + m)
        n, cols = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        x = rng.standard_normal((n, cols))
        y = rng.standard_normal(cols)
        # CRPS and L1 are piecewise linear, so a wider step is exact away from kinks
        # and keeps roundoff far below the tolerance on zero-slope coordinates
        for est in ("fair", "empirical"):
            worst["crps"] = max(worst["crps"], _fd_check(lambda v: crps_loss_grad(v, y, est), x, 1e-4,
                                                         skip=_near_kink(y)))
        mq, lq, mp, lp = rng.standard_normal((4, cols))
        for direction in ("q||p", "p||q"):
            kl = lambda v: gaussian_kl_grad(GaussianLatent(v[0], v[1]), GaussianLatent(mp, lp), direction)
            f = lambda v: (kl(v)[0], np.stack([kl(v)[1]["mu_q"], kl(v)[1]["log_var_q"]]))
            worst["kl"] = max(worst["kl"], _fd_check(f, np.stack([mq, lq])))
        worst["l1"] = max(worst["l1"], _fd_check(lambda v: l1_loss_grad(v, y), x, 1e-4,
                                                 skip=lambda v, i, e: abs(v.flat[i] - y.flat[i % cols]) < 10 * e))
        # full objective on a random small model
        k = 6 if m % 2 else 8
        dataset, mean, std = data[k]
        arch = Architecture.for_grid(1, 1, k, hidden=int(rng.integers(2, 5)), blocks=int(rng.integers(1, 3)))
        p = init_params(arch, seed=m, mean=mean, std=std)
        for name in p.arrays:
            p.arrays[name] = p.arrays[name] + 0.3 * rng.standard_normal(p.arrays[name].shape)
        steps = int(rng.integers(1, 4))
        idx = int(dataset.usable(steps)[rng.integers(len(dataset.usable(steps)))])
        cfg = TrainConfig(loss="crps" if m % 2 == 0 else "l1", lam=float(rng.uniform(0.1, 1.0)), members=3)
        batch = make_batch(p, dataset, idx, steps, 3, rng)
        w, c = grad_check(p, batch, cfg, eps=1e-5, n_coords=8, seed=m)
        worst["objective"] = max(worst["objective"], w)
        checked += c
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and checked >= 400 and dt < 120
    verdict("2 gradient suite", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
            + f"; {checked} objective coords over 100 models, {dt:.1f} s")


def test_kl_closed_forms(verdict):
    one = lambda m, v: GaussianLatent(np.array([m]), np.log(np.array([v])))
    a = gaussian_kl_grad(one(1.0, 1.0), one(0.0, 1.0))[0]
    b = gaussian_kl_grad(one(0.0, 4.0), one(0.0, 1.0))[0]
    ok = abs(a - 0.5) <= 1e-10 and abs(b - (math.log(0.5) + 1.5)) <= 1e-10 and abs(b - 0.80685) < 1e-5
    verdict("3 KL closed forms", ok, f"{a:.12f} (0.5), {b:.12f} (0.80685)")


def test_perturbation_free_limit(verdict):
    rng = np.random.default_rng(3)
    arch = Architecture.for_grid(2, 6, 8, hidden=6, blocks=2)
    p = init_params(arch, seed=3)
    for name, v in p.arrays.items():
        if ".dec_" in name or name.endswith("_b"):
            p.arrays[name] = 0.3 * rng.standard_normal(v.shape)
    cube = rng.standard_normal((4, 6, 8))
    det = rollout(p, cube, 1, 15, seed=0, perturbation="none")
    limit = rollout(p, cube, 1, 15, seed=0, perturbation="mean",
                    latent_override=lambda mu, lv, s: (np.zeros_like(mu), np.full_like(lv, -12.0)))
    err = float(np.abs(limit.fields - det.fields).max())
    ens = rollout(p, cube, 8, 15, seed=0)
    spread = ens.fields.std(axis=0).reshape(15, -1).mean(axis=1)
    ok = err < 1e-4 and bool(np.all(spread > 0))
    verdict("4 perturbation-free limit", ok,
            f"max deviation {err:.1e}; spread step 1 {spread[0]:.3g}, min over 15 steps {spread.min():.3g}")


@pytest.fixture(scope="module")
def l96_runs(tmp_path_factory):
    cfg = str(CONFIGS / "l96.json")
    root = tmp_path_factory.mktemp("l96")
    crps_dir, l1_dir = root / "crps", root / "l1"
    t0 = time.perf_counter()
    assert main(["gen-data", "--config", cfg, "--workdir", str(crps_dir)]) == EXIT_OK
    shutil.copytree(crps_dir / "data", l1_dir / "data")
    for wd, extra in ((crps_dir, []), (l1_dir, ["--set", 'train.loss="l1"'])):
        for cmd in ("train", "forecast", "verify"):
            assert main([cmd, "--config", cfg, "--workdir", str(wd), *extra]) == EXIT_OK, cmd
    elapsed = time.perf_counter() - t0
    load = lambda wd: {int(k): v for k, v in json.loads((wd / "verify/metrics.json").read_text())["scores"]["x"].items()}
    return load(crps_dir), load(l1_dir), elapsed, crps_dir


@pytest.mark.slow
def test_crps_beats_l1_on_l96(l96_runs, verdict):
    crps, l1, elapsed, wd = l96_runs
    leads = [k for k in sorted(crps) if k >= 3]
    wins = {k: crps[k]["crps"] <= l1[k]["crps"] for k in leads}
    lines = [ln for ln in (wd / "model/loss_curve.csv").read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    last_stage = max(int(r["stage"]) for r in rows)
    fit = [float(r["crps_term"]) for r in rows if int(r["stage"]) == last_stage][-50:]
    final, first = float(np.mean(fit)), float(rows[0]["crps_term"])
    detail = " ".join(f"{k}:{crps[k]['crps']:.3f}/{l1[k]['crps']:.3f}" for k in leads)
    losing = [k for k, v in wins.items() if not v]
    verdict("5 CRPS+KL vs L1+KL fair-CRPS", all(wins.values()) and elapsed <= 1800,
            f"lead:crps/l1 {detail}; losing leads {losing}; final-stage fit term {final:.3f} vs first "
            f"{first:.3f}; {elapsed:.0f} s")


@pytest.mark.slow
def test_spread_skill(l96_runs, verdict):
    crps, _, _, _ = l96_runs
    ssr = {k: crps[k]["ssr"] for k in sorted(crps)}
    mid = [ssr[k] for k in range(5, 11)]
    verdict("6 spread-skill ratio", all(0.5 <= s <= 1.5 for s in mid),
            "per lead " + " ".join(f"{k}:{v:.2f}" for k, v in ssr.items()))


def _cap_ok(track, factor=3.0):
    pos = track.positions()
    return all(great_circle_km(b, c) <= factor * great_circle_km(a, b) + 1e-6
               for a, b, c in zip(pos, pos[1:], pos[2:]))


def test_tracker_oracle(verdict):
    grid = GridSpec(240, 400, 0.125, 0.25, 100.125, 0.25)
    coarse_km = great_circle_km((0.0, 0.0), (0.0, 5 * 0.25))
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    errors, caps, complete = [], True, True
    for _ in range(20):
        sc = random_scenario(rng, (5.0, 50.0, 105.0, 195.0), 10.0, 40.0, 120.0)
        tr = track_storm(lambda k: vortex_fields(sc, 6.0 * k, grid), sc.center(0), n_leads=21)
        complete &= len(tr) == 21
        caps &= _cap_ok(tr)
        errors.append([great_circle_km((p.lat, p.lon), sc.center(p.time)) for p in tr.points])
    ridge = VortexScenario(15.0, 135.0, 90.0, 25.0, ridges=[Ridge(12.0, 18.0, 137.5, 140.0, 1500.0)])
    rt = track_storm(lambda k: vortex_fields(ridge, 6.0 * k, grid), ridge.center(0), n_leads=21)
    caps &= _cap_ok(rt)
    dt = time.perf_counter() - t0
    mean_err = np.mean(np.array(errors), axis=0) if complete else np.array([np.inf])
    ok = complete and bool(np.all(mean_err <= coarse_km)) and rt.terminated_reason == "elevation" and caps and dt < 60
    verdict("7 tracker oracle", ok,
            f"worst mean error {mean_err.max():.1f} km (cell {coarse_km:.1f} km) over 21 leads; ridge "
            f"ends '{rt.terminated_reason}'; cap holds {caps}; {dt:.1f} s")


def test_track_statistics(verdict):
    d = 80.0
    lat, lon = 15.5, 130.0
    # equal longitude offsets solved so each member sits d km from the observation
    dlon = math.degrees(2 * math.asin(math.sin(d / (2 * 6371.0)) / math.cos(math.radians(lat))))
    line = lambda pts: Track([TrackPoint(t, a, b) for t, a, b in pts])
    best = line([(0.0, lat, lon - 0.5), (6.0, lat, lon), (12.0, lat, lon + 0.5)])
    members = [line([(0.0, lat, lon - 0.5), (6.0, lat, lon + s * dlon)]) for s in (1, -1)]
    st = ensemble_track_stats(members, best, max_hours=6.0)
    sums = st.acc_error == sum(st.error[t] for t in st.leads) and st.acc_spread == sum(st.spread[t] for t in st.leads)
    miss = line([(0.0, lat, lon - 0.5)])
    gated = ensemble_track_stats([members[0], miss, members[1], miss], best, max_hours=6.0)
    agg = aggregate_track_stats([st, gated])
    ok = (st.error[6.0] == 0.0 and abs(st.spread[6.0] - d) < 1e-9 * d and sums and gated.excluded
          and agg["excluded_cases"] == 1 and agg["cases"] == 1)
    verdict("8 track statistics", ok,
            f"error {st.error[6.0]}, spread {st.spread[6.0]:.9f} (d={d}), acc sums exact {sums}, "
            f"gated case excluded {gated.excluded} and reported as {agg['excluded_cases']} excluded")


def test_brier_and_percentiles(verdict):
    rng = np.random.default_rng(9)
    w = np.ones(2)
    scores = []
    for _ in range(500):
        n = int(rng.integers(1, 12))
        x, y = rng.standard_normal((n, 2, 3)), rng.standard_normal((2, 3))
        scores.append(brier(x, y, float(rng.normal()), "above" if rng.random() < 0.5 else "below", w))
    bounded = min(scores) >= 0.0 and max(scores) <= 1.0
    y = rng.standard_normal((2, 3))
    perfect = brier(np.repeat(y[None], 5, axis=0), y, 0.0, "above", w)
    worst = brier(np.repeat(-y[None], 5, axis=0), y, 0.0, "above", w)
    hist = rng.standard_normal((200, 1, 3, 4))
    clim = climatology_percentiles(hist, [(1 + i % 3, 0) for i in range(200)], (2, 5, 10, 50, 90, 95, 98))
    monotone = all(np.all(np.diff(t, axis=0) >= 0) for t in clim.percentiles.values())
    ok = bounded and perfect == 0.0 and worst == 1.0 and monotone
    verdict("9 Brier bounds and percentiles", ok,
            f"range [{min(scores):.3f}, {max(scores):.3f}], perfect {perfect}, worst {worst}, monotone {monotone}")


def test_smoke_pipeline_bit_identical(tmp_path, verdict):
    cfg = str(CONFIGS / "smoke.json")
    runs = [tmp_path / "a", tmp_path / "b"]
    for wd in runs:
        for cmd in PIPELINE:
            assert main([cmd, "--config", cfg, "--workdir", str(wd)]) == EXIT_OK, cmd
    files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
    other = sorted(p.relative_to(runs[1]) for p in runs[1].rglob("*") if p.is_file())
    diff = [str(f) for f in files if (runs[0] / f).read_bytes() != (runs[1] / f).read_bytes()]
    verdict("10 smoke determinism", files == other and not diff,
            f"{len(files)} artifacts compared, differing: {diff or 'none'}")
