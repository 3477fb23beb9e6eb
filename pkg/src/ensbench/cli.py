"""Command-line pipeline: gen-data, train, forecast, verify, track, report.

Artifacts live under a work directory (``--workdir``, default
``$ENSBENCH_DATA_DIR`` or ``./runs``)::

    data/frames.ensf, data/frames.json          Lorenz-96 truth frames
    data/vortex/cases.json, best_track.csv      synthetic cyclone cases
    model/checkpoint.ensc, model/loss_curve.csv
    forecast/forecasts.ense
    verify/climatology.ensf, verify/metrics.{csv,json}
    track/tracks.{csv,json}, track/track_stats.json, track/track_metrics.csv
    report/report.{csv,json}

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric fault.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from . import metrics
from .climatology import Climatology, MissingClimatologyError, climatology_percentiles
from .config import ConfigError, ExperimentConfig, load_config
from .dynamics import (IntegrationFault, L96Config, VortexScenario, build_dataset, chronological_split,
                       frame_stratum, l96_frames, load_scenarios, random_scenario, save_scenarios,
                       vortex_fields)
from .fileio import FormatError, read_fields, write_fields
from .grid import GridError, GridSpec, latitude_weights
from .model import (Architecture, EnsembleForecast, NumericFault, init_params, load_checkpoint,
                    load_ensembles, rollout, save_checkpoint, save_ensembles)
from .report import MetricReport
from .tracking import (Track, TrackerConfig, TrackingError, TrackPoint, aggregate_track_stats,
                       best_track_from_records, ensemble_track_stats, read_best_tracks, track_storm,
                       write_best_track_csv, write_tracks_csv, write_tracks_json)
from .train import TrainingDiverged, train

log = logging.getLogger("ensbench")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHANNELS = ("x",)
VORTEX_EPOCH = datetime(2000, 1, 1)


class DataError(RuntimeError):
    pass


class Context:
    def __init__(self, cfg: ExperimentConfig, workdir: Path, jobs: int):
        self.cfg = cfg
        self.workdir = workdir
        self.jobs = jobs

    @property
    def meta(self):
        return {"config_hash": self.cfg.hash, "seed": self.cfg.seed}

    def path(self, *parts) -> Path:
        p = self.workdir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, *parts) -> Path:
        p = self.workdir.joinpath(*parts)
        if not p.exists():
            raise DataError(f"missing input {p}; run the earlier pipeline step first")
        return p


def _sub_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(ctx: Context, args):
    cfg = ctx.cfg
    d = cfg.data
    n = d.years * d.frames_per_year
    l96 = L96Config(**asdict(d.l96))
    grid, frames = l96_frames(l96, n, seed=_sub_seed(cfg.seed, 1))
    write_fields(ctx.path("data", "frames.ensf"), grid, frames[:, 0])
    _write_json(ctx.path("data", "frames.json"), {
        **ctx.meta, "channels": list(CHANNELS), "frames": n, "frames_per_year": d.frames_per_year,
        "split": chronological_split(n, d.years, tuple(d.split)), "grid": grid.to_dict()})

    v = d.vortex
    vgrid = GridSpec(**asdict(v.grid))
    rng = np.random.default_rng(_sub_seed(cfg.seed, 2))
    margin = 3.0
    box = (vgrid.lats[0] + margin, vgrid.lats[-1] - margin, vgrid.lons[0] + margin, vgrid.lons[-1] - margin)
    hours = (v.leads - 1) * cfg.track.step_hours
    cases = [random_scenario(rng, box, v.min_speed_kmh, v.max_speed_kmh, hours,
                             radius_km=v.radius_km, depth_hpa=v.depth_hpa) for _ in range(v.cases)]
    save_scenarios(ctx.path("data", "vortex", "cases.json"), cases,
                   {"meta": ctx.meta, "grid": vgrid.to_dict()})
    bt = ctx.path("data", "vortex", "best_track.csv")
    bt.unlink(missing_ok=True)
    for i, sc in enumerate(cases):
        pts = [TrackPoint(t, *sc.center(t)) for t in np.arange(v.leads) * cfg.track.step_hours]
        tmp = bt.with_suffix(f".{i}.tmp")
        write_best_track_csv(tmp, f"CASE{i:03d}", VORTEX_EPOCH, Track(pts))
        lines = tmp.read_text().splitlines(keepends=True)
        with open(bt, "a") as fh:
            fh.writelines(lines if i == 0 else lines[1:])
        tmp.unlink()
    print(f"gen-data: {n} Lorenz-96 frames, {len(cases)} vortex cases -> {ctx.workdir / 'data'}")


# ---------------------------------------------------------------- train


def _load_frames(ctx: Context, path=None):
    fpath = Path(path) if path else ctx.need("data", "frames.ensf")
    grid, frames = read_fields(fpath)
    meta_path = fpath.with_suffix(".json")
    if not meta_path.exists():
        raise DataError(f"missing frame index {meta_path}")
    meta = json.loads(meta_path.read_text())
    return grid, frames[:, None], meta


def cmd_train(ctx: Context, args):
    cfg = ctx.cfg
    grid, frames, meta = _load_frames(ctx)
    lo, hi = meta["split"]["train"]
    tcfg = replace(cfg.train, seed=_sub_seed(cfg.seed, cfg.train.seed, 3))
    data = build_dataset(frames, 2, tcfg.curriculum_steps, lo, hi)
    train_frames = frames[lo:hi]
    mean = train_frames.mean(axis=(0, 2, 3))
    std = train_frames.std(axis=(0, 2, 3))
    arch = Architecture.for_grid(len(CHANNELS), grid.nlat, grid.nlon, cfg.model.hidden, cfg.model.blocks)
    params = init_params(arch, seed=_sub_seed(cfg.seed, 4), mean=mean, std=std)
    result = train(tcfg, data, params)
    save_checkpoint(ctx.path("model", "checkpoint.ensc"), result.params,
                    {"meta": ctx.meta, "loss": tcfg.loss, "iterations": len(result.records)})
    with open(ctx.path("model", "loss_curve.csv"), "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash} seed={cfg.seed}\n")
        cols = ["iteration", "stage", "rollout_steps", "crps_term", "kl_term", "total"]
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in result.records:
            w.writerow([r[c] if isinstance(r[c], int) else repr(float(r[c])) for c in cols])
    last = result.records[-1]
    print(f"train: {len(result.records)} iterations, final total {last['total']:.6f}")


# ---------------------------------------------------------------- forecast


def forecast_cases(meta, steps, cases):
    """Evenly spaced test-split initial indices with room for ``steps`` verifying frames."""
    lo, hi = meta["split"]["test"]
    ics = [i for i in range(lo, hi - 1) if i + 2 + steps <= meta["frames"]]
    if not ics:
        raise DataError(f"test split [{lo}, {hi}) has no room for {steps}-step forecasts")
    return ics[::max(1, len(ics) // cases)][:cases]


def _forecast_one(job):
    params, cube, members, steps, seed, offset, grid = job
    return rollout(params, cube, members, steps, seed, step_offset=offset, grid=grid)


def cmd_forecast(ctx: Context, args):
    cfg = ctx.cfg
    grid, frames, meta = _load_frames(ctx)
    params, _ = load_checkpoint(Path(args.checkpoint) if args.checkpoint else ctx.need("model", "checkpoint.ensc"))
    if (params.arch.nlat, params.arch.nlon) != grid.shape:
        raise DataError(f"checkpoint grid {params.arch.nlat}x{params.arch.nlon} does not match frames grid {grid.describe()}")
    f = cfg.forecast
    jobs = [(params, np.concatenate([frames[ic], frames[ic + 1]]), f.members, f.steps,
             _sub_seed(cfg.seed, ic, 5), ic + 1, grid) for ic in forecast_cases(meta, f.steps, f.cases)]
    if ctx.jobs > 1:
        with ProcessPoolExecutor(ctx.jobs) as pool:
            out = list(pool.map(_forecast_one, jobs))
    else:
        out = [_forecast_one(j) for j in jobs]
    for fc in out:
        fc.channel_names = CHANNELS
    dest = Path(args.out) if args.out else ctx.path("forecast", "forecasts.ense")
    save_ensembles(dest, out, {"meta": ctx.meta})
    print(f"forecast: {len(out)} cases x {f.members} members x {f.steps} steps -> {dest}")


# ---------------------------------------------------------------- verify


def build_climatology(frames, meta, levels) -> Climatology:
    lo, hi = meta["split"]["train"]
    strata = [frame_stratum(i, meta["frames_per_year"]) for i in range(lo, hi)]
    return climatology_percentiles(frames[lo:hi], strata, levels)


def evaluate(forecasts, truth_of, clim: Climatology, stratum_of, estimator="empirical") -> metrics.MetricAccumulator:
    """Accumulate scores over cases. ``truth_of(case, lead) -> (C, H, W)``; leads count from 1."""
    acc = metrics.MetricAccumulator()
    for fc in forecasts:
        w = latitude_weights(fc.grid)
        names = fc.channel_names or tuple(f"c{i}" for i in range(fc.fields.shape[2]))
        for s in range(fc.leads):
            lead = s + 1
            ens = fc.fields[:, s]
            truth = truth_of(fc, lead)
            valid = fc.init_time + lead
            key = stratum_of(valid)
            scores = {"rmse": metrics.rmse(ens.mean(axis=0), truth, w),
                      "crps": metrics.crps(ens, truth, w, estimator)}
            if fc.members >= 2:
                scores["spread"] = metrics.spread(ens, w)
            try:
                scores["acc"] = metrics.acc(ens.mean(axis=0), truth, clim.mean_for(key), w)
            except metrics.UndefinedMetricError:
                pass
            for lev in clim.levels:
                direction = "above" if lev >= 50 else "below"
                scores[f"bs_p{lev}"] = metrics.brier(ens, truth, clim.threshold(key, lev), direction, w)
            for metric, vals in scores.items():
                for c, name in enumerate(names):
                    acc.add(name, lead, metric, vals[c])
    return acc


def _verify(ctx: Context, forecast_path, truth_path=None) -> MetricReport:
    cfg = ctx.cfg
    grid, frames, meta = _load_frames(ctx, truth_path)
    forecasts, header = load_ensembles(forecast_path)
    fgrid = forecasts[0].grid
    if fgrid != grid:
        raise DataError(f"grid mismatch: forecast {forecast_path} is on {fgrid.describe()}, "
                        f"truth {truth_path or 'frames'} is on {grid.describe()}")
    clim_path = ctx.path("verify", "climatology.ensf")
    clim = build_climatology(frames, meta, cfg.verify.levels)
    clim.save(clim_path, grid)
    last = max(f.init_time + f.leads for f in forecasts)
    if last >= len(frames):
        raise DataError(f"truth has {len(frames)} frames; forecasts verify up to frame {last}")
    acc = evaluate(forecasts, lambda fc, lead: frames[fc.init_time + lead], clim,
                   lambda i: frame_stratum(i, meta["frames_per_year"]), cfg.verify.estimator)
    rep = MetricReport.from_accumulator(acc, {**ctx.meta, "forecast_hash": header.get("meta", {}).get("config_hash", ""),
                                              "cases": len(forecasts), "estimator": cfg.verify.estimator})
    return rep


def cmd_verify(ctx: Context, args):
    fpath = Path(args.forecast) if args.forecast else ctx.need("forecast", "forecasts.ense")
    rep = _verify(ctx, fpath, args.truth)
    rep.to_csv(ctx.path("verify", "metrics.csv"))
    rep.to_json(ctx.path("verify", "metrics.json"))
    ssr = {lead: rep.scores["x"][lead].get("ssr", math.nan) for lead in sorted(rep.scores.get("x", {}))}
    print("verify: SSR per lead " + " ".join(f"{k}:{v:.3f}" for k, v in ssr.items()))


# ---------------------------------------------------------------- track


def member_scenarios(truth: VortexScenario, members, heading_sd, speed_sd, seed, case):
    """Ensemble of vortices whose heading and speed are jittered around the truth."""
    out = []
    for m in range(members):
        rng = np.random.default_rng(_sub_seed(seed, case, m, 6))
        d = truth.to_dict()
        d["heading_deg"] = truth.heading_deg + heading_sd * rng.standard_normal()
        d["speed_kmh"] = max(1.0, truth.speed_kmh + speed_sd * rng.standard_normal())
        out.append(VortexScenario.from_dict(d))
    return out


def _track_case(job):
    sc, scenarios, grid, tcfg, leads = job
    tracks = []
    for m, msc in enumerate(scenarios):
        fields = lambda k, msc=msc: vortex_fields(msc, k * tcfg.step_hours, grid)
        tracks.append(track_storm(fields, sc.center(0.0), tcfg, member=m, n_leads=leads))
    return tracks


def cmd_track(ctx: Context, args):
    cfg = ctx.cfg
    v = cfg.data.vortex
    cases_path = ctx.need("data", "vortex", "cases.json")
    doc = json.loads(cases_path.read_text())
    grid = GridSpec.from_dict(doc["grid"])
    scenarios = load_scenarios(cases_path)
    best = read_best_tracks(args.best_track or ctx.need("data", "vortex", "best_track.csv"))
    tcfg = TrackerConfig(**cfg.tracker_kwargs())
    jobs = [(sc, member_scenarios(sc, v.members, v.heading_sd_deg, v.speed_sd_kmh, cfg.seed, i), grid, tcfg, v.leads)
            for i, sc in enumerate(scenarios)]
    if ctx.jobs > 1:
        with ProcessPoolExecutor(ctx.jobs) as pool:
            results = list(pool.map(_track_case, jobs))
    else:
        results = [_track_case(j) for j in jobs]
    all_tracks, stats, per_case = [], [], []
    for i, tracks in enumerate(results):
        sid = f"CASE{i:03d}"
        if sid not in best:
            raise DataError(f"best-track file has no storm {sid}")
        bt = best_track_from_records(best[sid], VORTEX_EPOCH)
        st = ensemble_track_stats(tracks, bt, cfg.track.min_fraction, cfg.track.step_hours, cfg.track.max_hours)
        stats.append(st)
        per_case.append({"case": sid, **st.to_dict()})
        for tr in tracks:
            tr.member = f"{sid}:{tr.member}"
        all_tracks += tracks
    comment = f"config_hash={cfg.hash} seed={cfg.seed}"
    write_tracks_csv(ctx.path("track", "tracks.csv"), all_tracks, comment)
    write_tracks_json(ctx.path("track", "tracks.json"), all_tracks, ctx.meta)
    agg = aggregate_track_stats(stats)
    _write_json(ctx.path("track", "track_stats.json"),
                json.loads(json.dumps({"meta": ctx.meta, "aggregate": agg, "cases": per_case})))
    rep = MetricReport(meta=dict(ctx.meta))
    for t in agg["leads"]:
        rep.set("tc_position", int(round(t)), "error_km", agg["error"][t])
        rep.set("tc_position", int(round(t)), "spread_km", agg["spread"][t])
    rep.to_csv(ctx.path("track", "track_metrics.csv"))
    print(f"track: {len(all_tracks)} member tracks over {len(scenarios)} cases; "
          f"{agg['excluded_cases']} case(s) below the detection gate")


# ---------------------------------------------------------------- report


def _report_input(ctx: Context, path) -> MetricReport:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing input {path}")
    if path.suffix == ".json":
        return MetricReport.from_json(path)
    return _verify(ctx, path)


def cmd_report(ctx: Context, args):
    a = _report_input(ctx, args.a or ctx.need("forecast", "forecasts.ense"))
    b = _report_input(ctx, args.b or ctx.need("forecast", "forecasts.ense"))
    a.add_normalized(b, name=str(args.b or "forecast/forecasts.ense"))
    a.meta.update(ctx.meta)
    a.to_csv(ctx.path("report", "report.csv"))
    a.to_json(ctx.path("report", "report.json"))
    nd = [v for _, _, m, v in a.rows() if m.startswith("nd_")]
    print(f"report: {len(nd)} normalized differences, max |nd| = {max(map(abs, nd), default=0.0):.4g}")


# ---------------------------------------------------------------- entry point

COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "forecast": cmd_forecast,
            "verify": cmd_verify, "track": cmd_track, "report": cmd_report}


def build_parser():
    p = argparse.ArgumentParser(prog="ensbench", description="Desk-scale ensemble forecasting workbench")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="experiment JSON (defaults apply when omitted)")
    p.add_argument("--workdir", default=os.environ.get("ENSBENCH_DATA_DIR", "runs"))
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.lam=0.5 (repeatable)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for forecast/track (default 1)")
    p.add_argument("--checkpoint", help="forecast: checkpoint path")
    p.add_argument("--forecast", help="verify: ensemble file")
    p.add_argument("--truth", help="verify: truth frames file")
    p.add_argument("--out", help="forecast: output path")
    p.add_argument("--best-track", help="track: best-track CSV")
    p.add_argument("--a", help="report: forecast set or metrics JSON under test")
    p.add_argument("--b", help="report: baseline forecast set or metrics JSON")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, overrides)
        ctx = Context(cfg, Path(args.workdir), args.jobs)
        COMMANDS[args.command](ctx, args)
    except ConfigError as exc:
        print(f"ensbench: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFault, TrainingDiverged, IntegrationFault, FloatingPointError) as exc:
        print(f"ensbench: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, GridError, MissingClimatologyError, TrackingError,
            metrics.MetricError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"ensbench: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
