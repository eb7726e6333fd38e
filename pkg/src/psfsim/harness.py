"""Episode and suite orchestration.

One episode is a fixed-rate tick loop at the real-time filter rate; the
sensor, mapper+field solve, and predictive layer fire at their own (lower)
rates inside it. Mode wiring:

  predictive-only  apply the plan's first control; the real-time filter is
                   never invoked
  realtime-only    feed the desired command straight to the real-time
                   filter; the predictive layer never runs
  multistage       plan, then pass the plan's first control through the
                   real-time filter

Any layer failure flags the episode as errored but the loop keeps running
on the desired command, so every episode produces a full log.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics as metrics_mod
from . import predictive
from .grids import DomainError, GridSpec, save_grid, save_stack
from .mapping import MapperState, step_mapper
from .poisson import PsfSnapshot, SolverError, erode_free_space, solve_psf
from .qp import QpError
from .realtime import filter_command
from .simulation import (EpisodeLog, Scenario, WorldState, collision_check,
                         scan, step_world)

MODES = ("predictive", "realtime", "multistage")
_EPS = 1e-9


@dataclass(frozen=True)
class RunConfig:
    filter_mode: str = "multistage"
    repetitions: int = 1
    base_seed: int = 0
    sensor_hz: float = 15.0
    psf_hz: float = 15.0
    predictive_hz: float = 10.0
    realtime_hz: float = 100.0
    output_dir: Optional[str] = None
    dump_grids: bool = False
    dump_stacks: bool = False
    dump_plans: bool = False
    h_threshold: Optional[float] = None   # optional encounter window trigger

    def __post_init__(self):
        if self.filter_mode not in MODES:
            raise ValueError(f"filter_mode must be one of {MODES}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        for name in ("sensor_hz", "psf_hz", "predictive_hz", "realtime_hz"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        # The real-time layer is the fastest loop by construction; the
        # sensor bounds how often a fresh field can exist at all.
        if self.realtime_hz < self.predictive_hz or self.realtime_hz < self.psf_hz:
            raise ValueError("realtime_hz must be the highest rate")
        if self.psf_hz > self.sensor_hz:
            raise ValueError("psf_hz cannot exceed sensor_hz")


def _episode_rng(base_seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((base_seed, rep)))


def run_episode(scenario: Scenario, cfg: RunConfig, rep: int = 0,
                j_ideal: Optional[float] = None):
    """Run one episode; returns (EpisodeLog, EpisodeMetrics).

    When j_ideal is None the clairvoyant normalizer is computed here, which
    costs one whole-episode field schedule; batch callers should compute it
    once and pass it in.
    """
    mode = cfg.filter_mode
    rng = _episode_rng(cfg.base_seed, rep)
    grid = scenario.grid_spec()
    flat_grid = GridSpec(grid.origin_x, grid.origin_y, grid.resolution,
                         grid.nx, grid.ny, n_theta=1)

    dt = 1.0 / cfg.realtime_hz
    n_ticks = int(round(scenario.duration * cfg.realtime_hz))
    sensor_period = 1.0 / cfg.sensor_hz
    psf_period = 1.0 / cfg.psf_hz
    plan_period = 1.0 / cfg.predictive_hz
    plan_shift = max(1, int(round(plan_period / scenario.mpc.dt)))

    world = WorldState.initial(scenario)
    mapper = MapperState.initial(flat_grid, -sensor_period, scenario.mapper)
    snapshot: Optional[PsfSnapshot] = None
    prev_stack = None
    current_plan: Optional[predictive.Plan] = None
    warm_us = None
    next_sensor = 0.0
    next_psf = 0.0
    next_plan = 0.0
    psf_iters = 0
    psf_residual = 0.0
    episode_error = False

    dump_dir = None
    if cfg.output_dir and (cfg.dump_grids or cfg.dump_stacks or cfg.dump_plans):
        dump_dir = Path(cfg.output_dir) / f"{mode}-{rep:02d}-dumps"
        dump_dir.mkdir(parents=True, exist_ok=True)
    psf_count = 0
    plan_count = 0

    log = EpisodeLog()

    for k in range(n_ticks):
        t = k * dt
        tick_error = False

        if t >= next_sensor - _EPS:
            cloud = scan(scenario, world.chi, t, rng)
            mapper = step_mapper(mapper, cloud, scenario.mapper, flat_grid)
            next_sensor += sensor_period

        if t >= next_psf - _EPS:
            try:
                masks = erode_free_space(mapper.m_hat, scenario.robot.footprint,
                                         scenario.n_theta)
                stack, info = solve_psf(masks, scenario.poisson, timestamp=t,
                                        warm=prev_stack)
                snapshot = PsfSnapshot(stack, prev_stack)
                prev_stack = stack
                psf_iters = info.iterations
                psf_residual = info.max_residual
                if dump_dir is not None:
                    if cfg.dump_grids:
                        save_grid(mapper.m_hat, dump_dir / f"mhat-{psf_count:04d}")
                    if cfg.dump_stacks:
                        save_stack(stack, dump_dir / f"psf-{psf_count:04d}")
                psf_count += 1
            except SolverError:
                tick_error = True
            next_psf += psf_period

        mu_d = scenario.nominal_command(t)

        if mode != "realtime" and t >= next_plan - _EPS:
            if snapshot is None:
                tick_error = True
                current_plan = None
            else:
                mu_d_horizon = np.array(
                    [scenario.nominal_command(t + i * scenario.mpc.dt)
                     for i in range(scenario.mpc.horizon)])
                try:
                    current_plan = predictive.plan(world.chi, mu_d_horizon,
                                                   snapshot, scenario.mpc,
                                                   t0=t, warm=warm_us)
                    warm_us = predictive.shift_warm_start(
                        current_plan.us, plan_shift, mu_d_horizon[-1])
                    if dump_dir is not None and cfg.dump_plans:
                        _dump_plan(dump_dir / f"plan-{plan_count:04d}.json",
                                   current_plan, t)
                    plan_count += 1
                except (predictive.PlanInfeasibleError, QpError, DomainError):
                    tick_error = True
                    current_plan = None
                    warm_us = None
            next_plan += plan_period

        if mode == "realtime":
            mu_p = mu_d
        elif current_plan is not None:
            mu_p = current_plan.first_control
        else:
            tick_error = True
            mu_p = mu_d

        h_val = 0.0
        gnorm = 0.0
        dh_dt = 0.0
        rt_before = 0.0
        rt_after = 0.0
        rt_active = 0.0
        rt_degenerate = 0.0
        mu_s = mu_p
        if snapshot is None:
            tick_error = True
        elif mode == "predictive":
            try:
                h_val = snapshot.value(world.chi, t)
                g = snapshot.gradient(world.chi, t)
                gnorm = float(np.hypot(g.dx, g.dy))
                dh_dt = snapshot.time_slope(world.chi)
            except DomainError:
                tick_error = True
        else:
            try:
                fr = filter_command(mu_p, world.chi, snapshot, scenario.issf, t)
                mu_s = fr.mu_s
                h_val = fr.h_value
                gnorm = float(np.hypot(fr.grad[0], fr.grad[1]))
                dh_dt = fr.dh_dt
                rt_before = fr.margin_before
                rt_after = fr.margin_after
                rt_active = float(fr.active)
                rt_degenerate = float(fr.degenerate)
            except DomainError:
                tick_error = True
                mu_s = mu_p

        err = world.chi_dot - np.asarray(mu_s, dtype=float)
        barrier_b = h_val - scenario.monitor.beta * float(err @ err) / scenario.monitor.mu_bar
        collided = collision_check(scenario, world.chi, t)
        episode_error = episode_error or tick_error

        log.append(
            t=t, x=world.chi[0], y=world.chi[1], theta=world.chi[2],
            vx=world.chi_dot[0], vy=world.chi_dot[1], omega=world.chi_dot[2],
            mud_vx=mu_d[0], mud_vy=mu_d[1], mud_w=mu_d[2],
            mup_vx=mu_p[0], mup_vy=mu_p[1], mup_w=mu_p[2],
            mus_vx=mu_s[0], mus_vy=mu_s[1], mus_w=mu_s[2],
            h=h_val, grad_norm=gnorm, barrier_b=barrier_b,
            rt_margin_before=rt_before, rt_margin_after=rt_after,
            rt_active=rt_active, rt_degenerate=rt_degenerate,
            plan_cost=(current_plan.cost if current_plan is not None else 0.0),
            plan_sqp_iters=(current_plan.sqp_iters if current_plan is not None else 0.0),
            plan_min_margin=(current_plan.min_margin if current_plan is not None else 0.0),
            plan_converged=(float(current_plan.converged) if current_plan is not None else 0.0),
            psf_iterations=psf_iters, psf_residual=psf_residual,
            collision=float(collided), error_flag=float(tick_error),
        )

        world = step_world(scenario, world, mu_s, dt)

    if j_ideal is None:
        j_ideal = metrics_mod.ideal_cost(scenario)
    em = metrics_mod.score_episode(log, mode, j_ideal, scenario.mpc.R,
                                   error=episode_error,
                                   h_threshold=cfg.h_threshold)
    return log, em


def _dump_plan(path: Path, p: predictive.Plan, t: float):
    payload = {
        "t": t, "cost": p.cost, "sqp_iters": p.sqp_iters,
        "converged": p.converged, "min_margin": p.min_margin,
        "us": p.us.tolist(), "xs": p.xs.tolist(),
        "dcbf_margins": p.dcbf_margins.tolist(),
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def suite_payload(scenario: Scenario, cfg: RunConfig, all_metrics: list,
                  summary: dict, j_ideal: float) -> dict:
    return {
        "scenario": scenario.name,
        "base_seed": cfg.base_seed,
        "repetitions": cfg.repetitions,
        "j_ideal": j_ideal,
        "episodes": [m.to_dict() for m in all_metrics],
        "aggregate": summary,
    }


def run_suite(scenario: Scenario, cfg: RunConfig, modes=MODES):
    """All mode x repetition combinations against one scenario, scored with
    a single shared clairvoyant normalizer. Returns (payload, logs) where
    payload is the JSON-stable suite summary and logs maps
    (mode, rep) -> EpisodeLog. Writes the output bundle when cfg.output_dir
    is set."""
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
    j_ideal = metrics_mod.ideal_cost(scenario)

    all_metrics = []
    logs = {}
    for mode in modes:
        mode_cfg = replace(cfg, filter_mode=mode)
        for rep in range(cfg.repetitions):
            log, em = run_episode(scenario, mode_cfg, rep, j_ideal=j_ideal)
            logs[(mode, rep)] = log
            all_metrics.append(em)

    summary = metrics_mod.aggregate(all_metrics)
    payload = suite_payload(scenario, cfg, all_metrics, summary, j_ideal)

    if cfg.output_dir:
        write_suite_outputs(Path(cfg.output_dir), scenario, cfg, payload,
                            all_metrics, logs, modes)
    return payload, logs


def dumps_metrics(payload: dict) -> str:
    """Canonical serialization of a suite summary; identical runs must
    produce identical bytes."""
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_suite_outputs(out: Path, scenario: Scenario, cfg: RunConfig,
                        payload: dict, all_metrics: list, logs: dict, modes):
    from .scenarios import save_scenario

    out.mkdir(parents=True, exist_ok=True)
    save_scenario(scenario, out / "scenario.json")
    (out / "metrics.json").write_text(dumps_metrics(payload))

    idx = 0
    for mode in modes:
        for rep in range(cfg.repetitions):
            log = logs[(mode, rep)]
            stem = f"{mode}-{rep:02d}"
            log.to_csv(out / f"{stem}.csv")
            (out / f"{stem}.metrics.json").write_text(
                dumps_metrics(all_metrics[idx].to_dict()))
            idx += 1

    _write_plot_bundle(out, payload, modes)


def _write_plot_bundle(out: Path, payload: dict, modes):
    lines = ["mode,rep,j_robustness,j_optimality,success"]
    per_mode_rep = {}
    for m in payload["episodes"]:
        r = per_mode_rep.setdefault(m["filter_mode"], 0)
        per_mode_rep[m["filter_mode"]] += 1
        lines.append(f"{m['filter_mode']},{r},{m['j_robustness']:.17g},"
                     f"{m['j_optimality']:.17g},{int(m['success'])}")
    (out / "pareto_points.csv").write_text("\n".join(lines) + "\n")

    bars = ["mode,n_success,n_failure"]
    for mode in modes:
        agg = payload["aggregate"].get(mode)
        if agg:
            bars.append(f"{mode},{agg['n_success']},{agg['n_failure']}")
    (out / "success_bars.csv").write_text("\n".join(bars) + "\n")

    for mode in modes:
        agg = payload["aggregate"].get(mode)
        if not agg or not agg.get("ellipse"):
            continue
        pts = metrics_mod.ellipse_polyline(agg["ellipse"])
        rows = ["j_robustness,j_optimality"]
        rows += [f"{p[0]:.17g},{p[1]:.17g}" for p in pts]
        (out / f"ellipse_{mode}.csv").write_text("\n".join(rows) + "\n")
