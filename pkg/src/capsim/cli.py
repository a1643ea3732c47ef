"""Command-line harness: scenario runs, the controller/environment grid,
invariant validation and one-shot pose queries."""
from __future__ import annotations

import csv
import io
import json
import os
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from . import checks
from .control import Gains, MpcConfig, ScenarioSet
from .environment import ENV_PRESETS, EnvironmentModel, MmcMode
from .magnetics import MagnetParams, solve_actuator_config
from .path import PRESETS
from .simloop import CONTROLLERS, ControllerSpec, RunResult, SimConfig, run_simulation

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2

STEPS_HEADER = ("t,px,py,pz,vx,vy,vz,hx,hy,hz,pdx,pdy,pdz,fx,fy,fz,d,alpha,beta,"
                "phase,R,pos_err,ori_err").split(",")
SUMMARY_METRICS = ("position_error_mm", "orientation_error_deg", "mean_speed_mm_s",
                   "completion_time_s")

# mean position error in mm for (controller, environment)
PAPER_TABLE = {
    ("pd", "env1"): 0.3, ("pd", "env2"): 0.5, ("pd", "env3"): 64.9, ("pd", "env4"): 66.5,
    ("ac", "env1"): 0.3, ("ac", "env2"): 0.3, ("ac", "env3"): 11.9, ("ac", "env4"): 13.9,
    ("mpc", "env1"): 13.1, ("mpc", "env2"): 12.6, ("mpc", "env3"): 20.1, ("mpc", "env4"): 32.0,
    ("rmmpc", "env1"): 7.7, ("rmmpc", "env2"): 8.1, ("rmmpc", "env3"): 8.5, ("rmmpc", "env4"): 8.3,
}
ENVIRONMENTS = ("env1", "env2", "env3", "env4")


class ConfigError(ValueError):
    pass


# --- scenario files -----------------------------------------------------------------

_SECTIONS = {
    "path": {"preset", "key_points"},
    "environment": {"preset", "rho_fric", "R_max", "rho_dist", "mmc_mode", "period"},
    "controller": {"name", "params"},
    "run": {"V_c", "f_c", "seed", "trials", "max_steps", "solve_pose"},
}
_CONTROLLER_PARAMS = {"K_P", "K_D", "gamma", "a_max", "N", "W_x", "W_N", "W_f", "f_min",
                      "f_max", "rho_fric", "max_iter", "tol", "scenario_R", "scenario_w"}


@dataclass
class Scenario:
    sim: SimConfig
    trials: int = 1


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed {sorted(allowed)}")


def _matrix(value, where):
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return float(a) * np.eye(3)
    if a.ndim == 1:
        return np.diag(a)
    if a.ndim == 2 and a.shape[0] == a.shape[1]:
        return a
    raise ConfigError(f"{where}: expected scalar, diagonal list or square matrix")


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    """Parse and validate a JSON scenario document. Raises ConfigError."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    _check_keys(doc, _SECTIONS, source)
    for name, allowed in _SECTIONS.items():
        _check_keys(doc.get(name, {}), allowed, f"{source}: {name}")
    try:
        return _build_scenario(doc)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _build_scenario(doc) -> Scenario:
    p = doc.get("path", {})
    if "preset" in p and "key_points" in p:
        raise ConfigError("path: give either preset or key_points")
    if "key_points" in p:
        path = np.asarray(p["key_points"], dtype=float)
        if path.ndim != 2 or path.shape[1] != 3 or len(path) < 2:
            raise ConfigError("path.key_points: need at least two [x, y, z] points")
    else:
        path = p.get("preset", "intestine_short")
        if path not in PRESETS:
            raise ConfigError(f"path.preset: unknown {path!r}; choose from {list(PRESETS)}")

    e = dict(doc.get("environment", {}))
    preset = e.pop("preset", None)
    if preset is not None and preset not in ENV_PRESETS:
        raise ConfigError(f"environment.preset: unknown {preset!r}; choose from {list(ENV_PRESETS)}")
    if e:
        kw = dict(ENV_PRESETS[preset]) if preset else {}
        kw.update(e)
        if "mmc_mode" in kw:
            kw["mmc_mode"] = MmcMode(kw["mmc_mode"])
        environment = EnvironmentModel(**kw)
    else:
        environment = preset or "env1"

    c = doc.get("controller", {})
    params = c.get("params", {})
    _check_keys(params, _CONTROLLER_PARAMS, "controller.params")
    name = c.get("name", "pd")
    if name not in CONTROLLERS:
        raise ConfigError(f"controller.name: unknown {name!r}; choose from {list(CONTROLLERS)}")
    spec = _controller_spec(name, params)

    r = doc.get("run", {})
    trials = int(r.get("trials", 1))
    if trials < 1:
        raise ConfigError("run.trials must be >= 1")
    sim = SimConfig(path=path, environment=environment, controller=spec,
                    V_c=float(r.get("V_c", 0.003)), f_c=float(r.get("f_c", 10.0)),
                    seed=int(r.get("seed", 0)), max_steps=r.get("max_steps"),
                    solve_pose=bool(r.get("solve_pose", True)))
    return Scenario(sim, trials)


def _controller_spec(name, params) -> ControllerSpec:
    g = Gains()
    gains = Gains(_matrix(params["K_P"], "K_P") if "K_P" in params else g.K_P,
                  _matrix(params["K_D"], "K_D") if "K_D" in params else g.K_D)
    mkw = {}
    for key in ("N", "max_iter"):
        if key in params:
            mkw[key] = int(params[key])
    for key in ("f_min", "f_max", "rho_fric", "tol"):
        if key in params:
            mkw[key] = float(params[key])
    for key in ("W_x", "W_N", "W_f"):
        if key in params:
            a = np.asarray(params[key], dtype=float)
            mkw[key] = np.diag(a) if a.ndim == 1 else (a * np.eye(6 if key != "W_f" else 3)
                                                        if a.ndim == 0 else a)
    scen = None
    if "scenario_R" in params or "scenario_w" in params:
        base = ScenarioSet.mmc()
        scen = ScenarioSet(tuple(params.get("scenario_R", base.R)),
                           tuple(params.get("scenario_w", base.w)))
    kw = {k: float(params[k]) for k in ("gamma", "a_max") if k in params}
    return ControllerSpec(name, gains, mpc=MpcConfig(**mkw) if mkw else None, scenarios=scen, **kw)


# --- outputs ----------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def steps_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEPS_HEADER)
    nan = float("nan")
    for lg in result.logs:
        act = (lg.actuator.d, lg.actuator.alpha, lg.actuator.beta) if lg.actuator else (nan,) * 3
        w.writerow([_fmt(lg.t), *map(_fmt, lg.p_c), *map(_fmt, lg.v_c), *map(_fmt, lg.heading),
                    *map(_fmt, lg.p_d), *map(_fmt, lg.f_d), *map(_fmt, act), str(lg.phase),
                    _fmt(lg.R), _fmt(lg.position_error), _fmt(lg.orientation_error)])
    return buf.getvalue()


def trial_summary(result: RunResult, seed: int) -> dict:
    ct = result.completion_time
    return {
        "seed": seed,
        "position_error_mm": {"mean": 1e3 * result.mean_position_error,
                              "max": 1e3 * result.max_position_error},
        "orientation_error_deg": {"mean": result.mean_orientation_error,
                                  "max": result.max_orientation_error},
        "mean_speed_mm_s": 1e3 * result.mean_speed,
        "completion_time_s": ct,
        "completed": result.completed,
        "diverged": result.diverged,
        "steps": len(result.logs),
    }


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None}
    a = np.asarray(vals, dtype=float)
    return {"mean": float(a.mean()), "std": float(a.std())}


def aggregate(trials: list[dict]) -> dict:
    return {
        "position_error_mm": _mean_std([t["position_error_mm"]["mean"] for t in trials]),
        "orientation_error_deg": _mean_std([t["orientation_error_deg"]["mean"] for t in trials]),
        "mean_speed_mm_s": _mean_std([t["mean_speed_mm_s"] for t in trials]),
        "completion_time_s": _mean_std([t["completion_time_s"] for t in trials]),
        "completed": sum(t["completed"] for t in trials),
        "diverged": sum(t["diverged"] for t in trials),
    }


def _describe(value):
    if isinstance(value, str):
        return value
    if isinstance(value, EnvironmentModel):
        return {"rho_fric": value.rho_fric, "R_max": value.R_max, "rho_dist": value.rho_dist,
                "mmc_mode": value.mmc_mode.value, "period": value.period}
    return {"key_points": np.asarray(value).tolist()}


def simulate(scenario: Scenario, out: Path) -> int:
    """Run all trials into a staging directory, then move it into place."""
    sim = scenario.sim
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".capsim-", dir=out.parent))
    try:
        trials = []
        for k in range(scenario.trials):
            seed = sim.seed + k
            cfg = SimConfig(**{**sim.__dict__, "seed": seed})
            res = run_simulation(cfg)
            sub = stage if scenario.trials == 1 else stage / f"trial_{k}"
            sub.mkdir(exist_ok=True)
            (sub / "steps.csv").write_text(steps_csv(res))
            trials.append(trial_summary(res, seed))
        summary = {
            "controller": sim.controller.name,
            "path": _describe(sim.path),
            "environment": _describe(sim.environment),
            "V_c": sim.V_c, "f_c": sim.f_c, "seed": sim.seed,
            "trials": trials,
            "aggregate": aggregate(trials),
        }
        (stage / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        if out.exists():
            shutil.rmtree(out)
        stage.rename(out)
    finally:
        if stage.exists():
            shutil.rmtree(stage)
    return EXIT_DIVERGED if any(t["diverged"] for t in trials) else EXIT_OK


# --- the controller / environment grid --------------------------------------------------

def run_grid(controllers=CONTROLLERS, environments=ENVIRONMENTS, seeds=range(5),
             path="intestine_short", progress=None) -> dict:
    """Mean position error (mm) per cell, with per-seed values and flags."""
    grid = {}
    for c in controllers:
        for e in environments:
            t0 = time.perf_counter()
            runs = [run_simulation(SimConfig(path=path, environment=e, controller=c, seed=s))
                    for s in seeds]
            errs = [1e3 * r.mean_position_error for r in runs]
            grid[(c, e)] = {
                "mean_mm": float(np.mean(errs)),
                "per_seed_mm": errs,
                "completed": sum(r.completed for r in runs),
                "diverged": sum(r.diverged for r in runs),
                "seconds": time.perf_counter() - t0,
            }
            if progress:
                progress(c, e, grid[(c, e)])
    return grid


def ordering_checks(grid: dict) -> list[tuple[str, bool]]:
    out = []

    def m(c, e):
        return grid[(c, e)]["mean_mm"] if (c, e) in grid else None

    for e in ("env3", "env4"):
        vals = [m(c, e) for c in ("rmmpc", "ac", "pd")]
        if None not in vals:
            out.append((f"{e}: RMMPC < AC < PD", vals[0] < vals[1] < vals[2]))
    if m("rmmpc", "env1") is not None and m("rmmpc", "env4") is not None:
        out.append(("RMMPC env4 within 2x env1", m("rmmpc", "env4") <= 2 * m("rmmpc", "env1")))
    return out


def format_table(grid: dict) -> str:
    cols = [e for e in ENVIRONMENTS if any(k[1] == e for k in grid)]
    rows = [c for c in CONTROLLERS if any(k[0] == c for k in grid)]
    head = f"{'controller':<10}" + "".join(f"{e + ' sim':>12}{e + ' ref':>10}" for e in cols)
    lines = [head]
    for c in rows:
        cells = ""
        for e in cols:
            cell = grid.get((c, e))
            val = f"{cell['mean_mm']:.3f}" + ("*" if cell and cell["diverged"] else "") if cell else "-"
            cells += f"{val:>12}{PAPER_TABLE[(c, e)]:>10.1f}"
        lines.append(f"{c:<10}{cells}")
    lines.append("mean position error in mm; sim = this model, ref = published values; "
                 "* = at least one diverged run")
    return "\n".join(lines)


# --- click commands ------------------------------------------------------------------

@click.group()
def main():
    """Magnetic capsule trajectory-following simulator."""


def _default_out() -> Path:
    return Path(os.environ.get("CAPSIM_OUT", "capsim_out"))


@main.command("simulate")
@click.option("--scenario", "scenario_file", type=click.Path(dir_okay=False), required=True)
@click.option("--controller", type=click.Choice(CONTROLLERS), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--trials", type=click.IntRange(min=1), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Output directory (default $CAPSIM_OUT or ./capsim_out).")
def cmd_simulate(scenario_file, controller, seed, trials, out):
    """Run a JSON scenario; writes steps.csv and summary.json."""
    try:
        text = Path(scenario_file).read_text(encoding="utf-8")
        scenario = parse_scenario(text, scenario_file)
        if controller is not None:
            spec = scenario.sim.controller
            scenario.sim.controller = ControllerSpec(controller, spec.gains, spec.a_max, spec.gamma,
                                                     spec.mpc, spec.scenarios)
        if seed is not None:
            scenario.sim.seed = seed
        if trials is not None:
            scenario.trials = trials
    except (OSError, UnicodeDecodeError, ConfigError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    code = simulate(scenario, Path(out) if out else _default_out())
    if code == EXIT_DIVERGED:
        click.echo("warning: at least one trial diverged", err=True)
    sys.exit(code)


@main.command("table1")
@click.option("--short/--full", default=True, help="0.3 m serpentine or the full intestine path.")
@click.option("--seeds", type=click.IntRange(min=1), default=5)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def cmd_table1(short, seeds, out):
    """Controller x environment grid of mean position errors."""
    path = "intestine_short" if short else "intestine"

    def progress(c, e, cell):
        click.echo(f"  {c:<6}{e}: {cell['mean_mm']:.4f} mm ({cell['seconds']:.0f} s)", err=True)

    grid = run_grid(seeds=range(seeds), path=path, progress=progress)
    click.echo(format_table(grid))
    checks_ = ordering_checks(grid)
    for label, ok in checks_:
        click.echo(f"[{'PASS' if ok else 'FAIL'}] {label}")
    out = Path(out) if out else _default_out()
    out.mkdir(parents=True, exist_ok=True)
    doc = {"path": path, "seeds": seeds,
           "cells": [{"controller": c, "environment": e, "reference_mm": PAPER_TABLE[(c, e)], **v}
                     for (c, e), v in grid.items()],
           "ordering": [{"check": label, "passed": ok} for label, ok in checks_]}
    (out / "table1.json").write_text(json.dumps(doc, indent=2) + "\n")


@main.command("validate")
@click.option("--filter", "suites", multiple=True, type=click.Choice(sorted(checks.SUITES)))
def cmd_validate(suites):
    """Run the invariant suite; exit 0 iff every check passes."""
    results = checks.run_suites(list(suites) or None)
    for r in results:
        click.echo(r.line())
    sys.exit(EXIT_OK if all(r.passed for r in results) else 1)


@main.command("solve-pose")
@click.option("--force", nargs=3, type=float, required=True, help="Desired force fx fy fz in N.")
@click.option("--heading", nargs=3, type=float, default=(1.0, 0.0, 0.0))
@click.option("--m-a", type=float, default=None, help="Actuator moment in A m^2.")
@click.option("--m-c", type=float, default=None, help="Capsule moment in A m^2.")
@click.option("--json", "as_json", is_flag=True)
def cmd_solve_pose(force, heading, m_a, m_c, as_json):
    """Invert the actuator force model for one (force, heading) pair."""
    h = np.asarray(heading, dtype=float)
    if not np.all(np.isfinite(h)) or np.linalg.norm(h) == 0:
        click.echo("error: heading must be a non-zero finite vector", err=True)
        sys.exit(EXIT_CONFIG)
    h = h / np.linalg.norm(h)
    kw = {k: v for k, v in (("m_a", m_a), ("m_c", m_c)) if v is not None}
    try:
        params = MagnetParams(**kw)
        cfg, res = solve_actuator_config(np.asarray(force), h, params)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if res > 1e-6:
        click.echo(f"warning: force not reachable within bounds, residual {res:.3e} N", err=True)
    if as_json:
        click.echo(json.dumps({"d": cfg.d, "alpha": cfg.alpha, "beta": cfg.beta,
                               "residual_N": res, "in_bounds": cfg.in_bounds()}))
    else:
        click.echo(f"d = {cfg.d:.6f} m  alpha = {cfg.alpha:.6f} deg  beta = {cfg.beta:.6f} deg  "
                   f"residual = {res:.3e} N")


if __name__ == "__main__":
    main()
