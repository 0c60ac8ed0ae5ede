"""Command line pipeline: advisory, simulate, fit, update, eval, bench.

Every command validates all of its inputs before creating any output, writes
files atomically (temp file plus rename), and reports failures on stderr
with one of four exit codes: 0 on success, 2 for I/O problems, 3 for invalid
inputs or configuration, 4 for numerical failures (rank-deficient data,
diverging rollouts, infeasible routes).

A JSON configuration file supplies the physical and algorithmic parameters;
sections use the corresponding dataclass field names. Individual flags
override single values. A top-level seed drives every stochastic choice, and
per-driver seeds derive from it as seed + driver index, so one seed pins the
whole pipeline byte for byte.
"""

from __future__ import annotations

import argparse
import glob
import json
import math
import os
import sys

import numpy as np

from .advisory import (
    EcoDpConfig,
    PowertrainParams,
    RouteInfeasibleError,
    RouteSpec,
    resample_to_time,
    solve_eco_dp,
)
from .driversim import DriverParams, VehicleParams, make_distracted_segment, simulate_driver
from .edmd import FitConfig, RankDeficientDataError, fit_trajectories
from .evaluate import (
    OnlineSettings,
    bench_update,
    evaluate_horizons,
    format_reports,
    reports_to_csv,
)
from .model import (
    KoopmanModel,
    ModelFileError,
    RolloutDivergenceError,
    Trajectory,
    _atomic_write_text,
    _fmt,
)
from .rls import init_rls, snapshot_model, update_tick

ADVISORY_TIME_HEADER = "t_s,v_ref_mps"

_CONFIG_SECTIONS = ("seed", "sample_period", "vehicle", "driver", "drivers",
                    "fit", "rls", "eval", "advisory")


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: configuration must be a JSON object")
    unknown = sorted(set(cfg) - set(_CONFIG_SECTIONS))
    if unknown:
        raise ValueError(f"{path}: unknown configuration keys: {', '.join(unknown)}")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ValueError(f"configuration section '{name}' must be an object")
    return dict(sec)


def _build(cls, values: dict, section: str):
    fields = {f for f in cls.__dataclass_fields__}
    unknown = sorted(set(values) - fields)
    if unknown:
        raise ValueError(f"section '{section}': unknown keys: {', '.join(unknown)}")
    return cls(**values)


def _sample_period(cfg: dict) -> float:
    period = cfg.get("sample_period", 0.025)
    if not (isinstance(period, (int, float)) and period > 0):
        raise ValueError(f"sample_period must be positive, got {period!r}")
    return float(period)


def _expand_data_paths(paths) -> list[str]:
    out: list[str] = []
    for p in paths:
        if os.path.isdir(p):
            inside = sorted(glob.glob(os.path.join(p, "*.csv")))
            if not inside:
                raise FileNotFoundError(f"no .csv files in directory {p}")
            out.extend(inside)
        else:
            if not os.path.exists(p):
                raise FileNotFoundError(f"data file not found: {p}")
            out.append(p)
    return out


def _read_trajectories(paths) -> list[Trajectory]:
    return [Trajectory.read_csv(p) for p in paths]


# ---------------------------------------------------------------- advisory

def _eco_config(cfg: dict, gamma_override: float | None) -> EcoDpConfig:
    sec = _section(cfg, "advisory")
    pt = sec.pop("powertrain", None)
    if pt is not None:
        sec["powertrain"] = _build(PowertrainParams, pt, "advisory.powertrain")
    if gamma_override is not None:
        sec["gamma"] = gamma_override
    return _build(EcoDpConfig, sec, "advisory")


def cmd_advisory(args) -> int:
    cfg = _load_config(args.config)
    eco = _eco_config(cfg, args.gamma)
    period = _sample_period(cfg)
    if not os.path.exists(args.route):
        raise FileNotFoundError(f"route file not found: {args.route}")
    route = RouteSpec.read_csv(args.route)

    profile = solve_eco_dp(route, eco)
    t, v_ref = resample_to_time(profile, period)

    os.makedirs(args.out, exist_ok=True)
    profile.to_csv(os.path.join(args.out, "advisory_distance.csv"))
    lines = [ADVISORY_TIME_HEADER]
    lines.extend(f"{_fmt(ti)},{_fmt(vi)}" for ti, vi in zip(t, v_ref))
    _atomic_write_text(os.path.join(args.out, "advisory_time.csv"), "\n".join(lines) + "\n")
    meta = {
        "route": os.path.abspath(args.route),
        "gamma": eco.gamma,
        "total_cost": profile.total_cost,
        "duration_s": profile.duration,
        "soc_initial": eco.soc_initial,
        "soc_final": float(profile.soc[-1]),
        "engine_steps": int(np.sum(profile.engine_on)),
        "sample_period": period,
        "samples": len(t),
    }
    _atomic_write_text(os.path.join(args.out, "advisory_meta.json"),
                       json.dumps(meta, indent=2) + "\n")
    print(f"advisory: {profile.duration:.1f} s over {route.total_length:.0f} m, "
          f"cost {profile.total_cost:.3f}, final SoC {profile.soc[-1]:.3f}")
    return 0


def _read_advisory_time_csv(path: str, period: float) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != ADVISORY_TIME_HEADER:
            raise ValueError(f"{path}: expected header '{ADVISORY_TIME_HEADER}', found '{header}'")
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise ValueError(f"{path}: malformed advisory row: {exc}") from None
    if data.shape[0] < 2 or data.shape[1] != 2:
        raise ValueError(f"{path}: expected at least 2 rows of 2 columns, got {data.shape}")
    dt = np.diff(data[:, 0])
    if not np.allclose(dt, period, rtol=1e-9, atol=1e-9 * period):
        raise ValueError(
            f"{path}: advisory sample spacing {np.median(dt):.6f} s does not match "
            f"the configured sample period {period} s"
        )
    return data[:, 1]


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    if args.config is None:
        raise ValueError("simulate requires --config (vehicle parameters live there)")
    cfg = _load_config(args.config)
    period = _sample_period(cfg)
    vehicle = _build(VehicleParams, _section(cfg, "vehicle"), "vehicle")
    driver_base = _section(cfg, "driver")

    roster = _section(cfg, "drivers")
    count = args.drivers if args.drivers is not None else roster.get("count", 1)
    if not (isinstance(count, int) and count >= 1):
        raise ValueError(f"driver count must be a positive integer, got {count!r}")
    gain_jitter = roster.get("gain_jitter", 0.0)
    if not (isinstance(gain_jitter, (int, float)) and 0 <= gain_jitter < 1):
        raise ValueError(f"gain_jitter must lie in [0, 1), got {gain_jitter!r}")
    distracted = roster.get("distracted", [])
    if not isinstance(distracted, list):
        raise ValueError("drivers.distracted must be a list")

    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    if not isinstance(seed, int):
        raise ValueError(f"seed must be an integer, got {seed!r}")

    v_ref = _read_advisory_time_csv(args.advisory, period)

    drivers = []
    for i in range(count):
        params = dict(driver_base)
        if gain_jitter > 0:
            jrng = np.random.default_rng([seed + i, 17])
            for gain in ("kp", "ki"):
                base = params.get(gain, getattr(DriverParams, gain))
                params[gain] = base * (1.0 + gain_jitter * (2.0 * jrng.random() - 1.0))
        params["seed"] = seed + i
        driver = _build(DriverParams, params, "driver")
        for d in distracted:
            if not isinstance(d, dict) or "index" not in d:
                raise ValueError("each drivers.distracted entry needs an 'index'")
            if d["index"] == i:
                driver = make_distracted_segment(
                    driver, d["t_start"], d["t_end"],
                    compliance=d.get("compliance", 0.2),
                    noise_scale=d.get("noise_scale", 2.0),
                )
        drivers.append(driver)

    os.makedirs(args.out, exist_ok=True)
    width = max(2, len(str(count)))
    for i, driver in enumerate(drivers):
        traj = simulate_driver(vehicle, driver, v_ref, sample_period=period)
        traj.write_csv(os.path.join(args.out, f"driver_{i + 1:0{width}d}.csv"))
    print(f"simulate: wrote {count} trajectories of {len(v_ref)} samples to {args.out}")
    return 0


# ---------------------------------------------------------------- fit

def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    sec = _section(cfg, "fit")
    if args.ridge is not None:
        sec["ridge"] = args.ridge
    if args.degree is not None:
        sec["max_degree"] = args.degree
    if args.scaling is not None:
        sec["scaling"] = args.scaling
    if args.split is not None:
        sec["split"] = tuple(args.split)
    if "split" in sec:
        sec["split"] = tuple(sec["split"])
    fit_cfg = _build(FitConfig, sec, "fit")

    paths = _expand_data_paths(args.data)
    trajectories = _read_trajectories(paths)
    model, report = fit_trajectories(trajectories, fit_cfg)
    model.provenance["data_files"] = [os.path.basename(p) for p in paths]

    model.save(args.model_out)
    if args.report_out:
        _atomic_write_text(args.report_out, json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"fit: {report.split_pairs['train']} training pairs, "
          f"residual {report.residual_fro:.4g}, "
          f"condition {report.condition_number:.3g}, model -> {args.model_out}")
    return 0


# ---------------------------------------------------------------- update

def cmd_update(args) -> int:
    cfg = _load_config(args.config)
    rls_sec = _section(cfg, "rls")
    lam = args.lam if args.lam is not None else rls_sec.get("lam", 0.9)
    cadence = args.cadence if args.cadence is not None else rls_sec.get("cadence_s", 1.0)

    model = KoopmanModel.load(args.model)
    traj = Trajectory.read_csv(args.data)
    segment = traj.window(args.segment[0], args.segment[1])

    state = init_rls(model, lam)
    tick_steps = max(int(round(cadence / traj.sample_period)), 1)
    log_lines = ["tick,t_end_s,pairs,mean_err_norm"]
    pos = 0
    tick = 0
    while pos < len(segment) - 1:
        chunk_end = min(pos + tick_steps, len(segment) - 1)
        errs = update_tick(state, model.basis, segment.slice_samples(pos, chunk_end + 1),
                           cadence=cadence)
        tick += 1
        log_lines.append(
            f"{tick},{_fmt(segment.t[chunk_end])},{len(errs)},{_fmt(float(np.mean(errs)))}"
        )
        pos = chunk_end

    updated = snapshot_model(state, model.basis, model.sample_period,
                             provenance={**model.provenance,
                                         "updated_from": os.path.basename(args.model),
                                         "update_segment": list(args.segment),
                                         "cadence_s": cadence})
    updated.save(args.out)
    if args.log:
        _atomic_write_text(args.log, "\n".join(log_lines) + "\n")
    print(f"update: {state.update_count} updates over {tick} ticks, model -> {args.out}")
    return 0


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    eval_sec = _section(cfg, "eval")
    horizons = args.horizons or eval_sec.get("horizons_s", [50.0, 20.0, 10.0, 5.0])
    segment = args.segment or eval_sec.get("segment_s")
    if segment is None:
        raise ValueError("eval needs --segment (or eval.segment_s in the configuration)")

    model = KoopmanModel.load(args.model)
    traj = Trajectory.read_csv(args.data)

    reports = evaluate_horizons(traj, model, horizons, segment)
    if args.online:
        rls_sec = _section(cfg, "rls")
        lam = args.lam if args.lam is not None else rls_sec.get("lam", 0.9)
        cadence = args.cadence if args.cadence is not None else rls_sec.get("cadence_s", 1.0)
        reports += evaluate_horizons(traj, model, horizons, segment,
                                     online=OnlineSettings(lam=lam, cadence_s=cadence))
    print(format_reports(reports))
    if args.out:
        reports_to_csv(reports, args.out)
    return 0


# ---------------------------------------------------------------- bench

def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    horizons = args.horizons or _section(cfg, "eval").get("horizons_s", [50.0, 20.0, 10.0, 5.0])
    rls_sec = _section(cfg, "rls")
    lam = args.lam if args.lam is not None else rls_sec.get("lam", 0.9)
    cadence = args.cadence if args.cadence is not None else rls_sec.get("cadence_s", 1.0)

    model = KoopmanModel.load(args.model)
    paths = _expand_data_paths(args.data)
    trajectories = _read_trajectories(paths)

    report = bench_update(trajectories, model, horizons,
                          online=OnlineSettings(lam=lam, cadence_s=cadence))
    for h, off, tick, s in zip(report.horizons_s, report.offline_fit_s,
                               report.online_per_tick_s, report.speedup):
        print(f"horizon {h:>5.1f} s: refit {off * 1e3:8.1f} ms, "
              f"tick {tick * 1e6:8.1f} us, speedup {s:8.1f}x")
    if report.warning:
        print(f"warning: {report.warning}")
    if args.out:
        _atomic_write_text(args.out, json.dumps(report.to_dict(), indent=2) + "\n")
    return 0


# ---------------------------------------------------------------- wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="koopdrive",
        description="Identify, adapt, and exercise lifted linear driver-response models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("advisory", help="solve the eco-driving advisory for a route")
    p.add_argument("--route", required=True, help="route CSV (node limits, stops, grades)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--gamma", type=float, help="fuel/time trade-off override in [0, 1]")
    p.set_defaults(func=cmd_advisory)

    p = sub.add_parser("simulate", help="synthesize driver trajectories for an advisory")
    p.add_argument("--advisory", required=True, help="advisory time CSV from 'advisory'")
    p.add_argument("--out", required=True, help="output directory for driver CSVs")
    p.add_argument("--config", help="JSON configuration file (required)")
    p.add_argument("--drivers", type=int, help="number of drivers (overrides config)")
    p.add_argument("--seed", type=int, help="top-level seed (overrides config)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the lifted linear model offline")
    p.add_argument("--data", required=True, nargs="+",
                   help="trajectory CSV files or directories of them")
    p.add_argument("--model-out", required=True, help="model JSON output path")
    p.add_argument("--report-out", help="fit report JSON output path")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--ridge", type=float, help="ridge penalty override")
    p.add_argument("--degree", type=int, help="basis degree override")
    p.add_argument("--scaling", choices=["pow2", "none"], help="pre-scaler override")
    p.add_argument("--split", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                   help="split fractions override")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("update", help="adapt a model over a trajectory segment")
    p.add_argument("--model", required=True, help="model JSON to start from")
    p.add_argument("--data", required=True, help="trajectory CSV")
    p.add_argument("--segment", required=True, type=float, nargs=2, metavar=("T0", "T1"),
                   help="segment bounds in seconds")
    p.add_argument("--out", required=True, help="updated model JSON output path")
    p.add_argument("--log", help="per-tick log CSV output path")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--lam", type=float, help="forgetting factor override")
    p.add_argument("--cadence", type=float, help="tick cadence override in seconds")
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("eval", help="multi-horizon prediction accuracy report")
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--data", required=True, help="trajectory CSV")
    p.add_argument("--segment", type=float, nargs=2, metavar=("T0", "T1"),
                   help="segment bounds in seconds")
    p.add_argument("--horizons", type=float, nargs="+", help="horizons in seconds")
    p.add_argument("--online", action="store_true",
                   help="also evaluate the online-adapted predictor")
    p.add_argument("--lam", type=float, help="forgetting factor override")
    p.add_argument("--cadence", type=float, help="tick cadence override in seconds")
    p.add_argument("--out", help="report CSV output path")
    p.add_argument("--config", help="JSON configuration file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time full refits against streaming ticks")
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--data", required=True, nargs="+",
                   help="trajectory CSV files or directories of them")
    p.add_argument("--horizons", type=float, nargs="+", help="horizons in seconds")
    p.add_argument("--lam", type=float, help="forgetting factor override")
    p.add_argument("--cadence", type=float, help="tick cadence override in seconds")
    p.add_argument("--out", help="benchmark report JSON output path")
    p.add_argument("--config", help="JSON configuration file")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail(str(exc), 2)
    except (IsADirectoryError, PermissionError, OSError) as exc:
        return _fail(str(exc), 2)
    except (RouteInfeasibleError, RankDeficientDataError, RolloutDivergenceError) as exc:
        return _fail(str(exc), 4)
    except json.JSONDecodeError as exc:
        return _fail(f"malformed JSON: {exc}", 3)
    except ValueError as exc:
        return _fail(str(exc), 3)


if __name__ == "__main__":
    sys.exit(main())
