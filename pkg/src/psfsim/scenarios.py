"""Scenario presets, the seeded random-world generator, and JSON
(de)serialization with schema validation.

Presets:
  ball-1.0     ball rolled at the robot at 1.0 m/s, first-order tracking
  ball-1.25    faster ball plus actuator saturation (model-mismatch variant)
  corridor     head-on wall benchmark for the predictive layer
  mapper-wall  stationary robot staring at a thin bar, mapper convergence
  empty        obstacle-free arena, pass-through sanity runs
"""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .grids import RobotFootprint
from .mapping import MapperConfig
from .poisson import PoissonConfig
from .predictive import MpcConfig
from .realtime import IssfConfig
from .simulation import (MonitorConfig, MovingDisc, NominalSegment, RobotConfig,
                         Scenario, SensorConfig, StaticDisc, TrackingConfig)

_BALL_ARENA = (0.0, 6.0, 0.0, 4.0)
_BALL_FOOTPRINT = {"type": "rectangle", "length": 0.7, "width": 0.31}


def _footprint_to_dict(fp: RobotFootprint) -> dict:
    if fp.rectangle_size is not None:
        length, width = fp.rectangle_size
        return {"type": "rectangle", "length": length, "width": width}
    return {"type": "points", "points": np.asarray(fp.body_points).tolist()}


def _footprint_from_dict(d: dict) -> RobotFootprint:
    if d["type"] == "rectangle":
        return RobotFootprint.rectangle(d["length"], d["width"])
    return RobotFootprint(body_points=np.asarray(d["points"], dtype=float))


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "name": s.name,
        "arena": list(s.arena),
        "resolution": s.resolution,
        "n_theta": s.n_theta,
        "duration": s.duration,
        "seed": s.seed,
        "robot": {
            "footprint": _footprint_to_dict(s.robot.footprint),
            "start": list(s.robot.start),
            "tracking": {"mode": s.robot.tracking.mode,
                         "time_constant": s.robot.tracking.time_constant},
            "command_limits": (list(s.robot.command_limits)
                               if s.robot.command_limits is not None else None),
        },
        "static_polygons": [np.asarray(p).tolist() for p in s.static_polygons],
        "static_discs": [{"center": list(d.center), "radius": d.radius}
                         for d in s.static_discs],
        "moving_discs": [{"radius": d.radius, "start": list(d.start),
                          "velocity": list(d.velocity), "start_time": d.start_time}
                         for d in s.moving_discs],
        "nominal": [{"t_start": seg.t_start, "mu": list(seg.mu)} for seg in s.nominal],
        "sensor": {"rate": s.sensor.rate, "n_rays": s.sensor.n_rays,
                   "max_range": s.sensor.max_range, "noise_std": s.sensor.noise_std,
                   "dropout": s.sensor.dropout},
        "mapper": {"kernel_radius": s.mapper.kernel_radius,
                   "kernel_sigma": s.mapper.kernel_sigma,
                   "switch": s.mapper.switch,
                   "beta_minus": s.mapper.beta_minus,
                   "beta_plus": s.mapper.beta_plus,
                   "tau_high": s.mapper.tau_high,
                   "tau_low": s.mapper.tau_low,
                   "gamma_init": s.mapper.gamma_init},
        "poisson": {"forcing": s.poisson.forcing, "sor_omega": s.poisson.sor_omega,
                    "tol": s.poisson.tol, "max_iters": s.poisson.max_iters,
                    "warm_start": s.poisson.warm_start},
        "mpc": {"horizon": s.mpc.horizon, "dt": s.mpc.dt, "rho": s.mpc.rho,
                "weight": list(s.mpc.weight), "slack_penalty": s.mpc.slack_penalty,
                "trust_radius": s.mpc.trust_radius, "qp_tol": s.mpc.qp_tol,
                "sqp_max_iters": s.mpc.sqp_max_iters,
                "input_lower": (list(s.mpc.input_lower)
                                if s.mpc.input_lower is not None else None),
                "input_upper": (list(s.mpc.input_upper)
                                if s.mpc.input_upper is not None else None)},
        "issf": {"alpha": s.issf.alpha, "epsilon": s.issf.epsilon,
                 "grad_floor": s.issf.grad_floor},
        "monitor": {"mu_bar": s.monitor.mu_bar, "beta": s.monitor.beta},
    }


def scenario_from_dict(d: dict) -> Scenario:
    validate_scenario_dict(d)
    robot = d["robot"]
    return Scenario(
        name=d["name"],
        arena=tuple(d["arena"]),
        resolution=d.get("resolution", 0.05),
        n_theta=d.get("n_theta", 8),
        duration=d["duration"],
        seed=d.get("seed", 0),
        robot=RobotConfig(
            footprint=_footprint_from_dict(robot["footprint"]),
            start=tuple(robot["start"]),
            tracking=TrackingConfig(**robot.get("tracking", {"mode": "perfect",
                                                             "time_constant": 0.1})),
            command_limits=(tuple(robot["command_limits"])
                            if robot.get("command_limits") is not None else None),
        ),
        static_polygons=tuple(tuple(map(tuple, p)) for p in d.get("static_polygons", [])),
        static_discs=tuple(StaticDisc(center=tuple(x["center"]), radius=x["radius"])
                           for x in d.get("static_discs", [])),
        moving_discs=tuple(MovingDisc(radius=x["radius"], start=tuple(x["start"]),
                                      velocity=tuple(x["velocity"]),
                                      start_time=x.get("start_time", 0.0))
                           for x in d.get("moving_discs", [])),
        nominal=tuple(NominalSegment(t_start=seg["t_start"], mu=tuple(seg["mu"]))
                      for seg in d.get("nominal", [{"t_start": 0.0, "mu": [0, 0, 0]}])),
        sensor=SensorConfig(**d.get("sensor", {})),
        mapper=MapperConfig(**d.get("mapper", {})),
        poisson=PoissonConfig(**d.get("poisson", {})),
        mpc=MpcConfig(**{**d.get("mpc", {}),
                         "weight": tuple(d["mpc"]["weight"]) if "mpc" in d and "weight" in d["mpc"] else (1.0, 1.0, 0.2),
                         "input_lower": (tuple(d["mpc"]["input_lower"])
                                         if d.get("mpc", {}).get("input_lower") is not None else None),
                         "input_upper": (tuple(d["mpc"]["input_upper"])
                                         if d.get("mpc", {}).get("input_upper") is not None else None)}),
        issf=IssfConfig(**d.get("issf", {})),
        monitor=MonitorConfig(**d.get("monitor", {})),
    )


def _schema() -> dict:
    text = resources.files("psfsim").joinpath("schemas/scenario.schema.json").read_text()
    return json.loads(text)


def validate_scenario_dict(d: dict):
    jsonschema.validate(d, _schema())


def save_scenario(s: Scenario, path):
    d = scenario_to_dict(s)
    validate_scenario_dict(d)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scenario file not found: {path}")
    return scenario_from_dict(json.loads(path.read_text()))


def _ball_scenario(name: str, speed: float, limits) -> Scenario:
    # Ball aimed slightly above the robot center so the dodge direction is
    # determined by geometry, not tie-breaking.
    mpc_kwargs = {}
    if limits is not None:
        mpc_kwargs = {"input_lower": tuple(-v for v in limits), "input_upper": tuple(limits)}
    return Scenario(
        name=name,
        arena=_BALL_ARENA,
        resolution=0.05,
        n_theta=8,
        duration=6.0,
        robot=RobotConfig(
            footprint=RobotFootprint.rectangle(0.7, 0.31),
            start=(3.0, 2.0, 0.0),
            tracking=TrackingConfig(mode="first_order", time_constant=0.1),
            command_limits=limits,
        ),
        moving_discs=(MovingDisc(radius=0.11, start=(5.6, 2.07),
                                 velocity=(-speed, 0.0), start_time=0.6),),
        nominal=(NominalSegment(0.0, (0.0, 0.0, 0.0)),),
        sensor=SensorConfig(rate=15.0, n_rays=360, max_range=8.0,
                            noise_std=0.01, dropout=0.05),
        mpc=MpcConfig(**mpc_kwargs),
        # epsilon keeps the robustness term small away from obstacles and
        # mu_bar = 5 still clears the rate gate: with the 0.1 s tracking
        # constant lambda = 20 >= alpha + epsilon mu_bar / 4 = 17.
        issf=IssfConfig(alpha=2.0, epsilon=12.0),
        monitor=MonitorConfig(mu_bar=5.0, beta=1.0),
    )


def _corridor_scenario() -> Scenario:
    return Scenario(
        name="corridor",
        arena=(-1.0, 3.0, -2.0, 2.0),
        resolution=0.05,
        n_theta=1,
        duration=2.0,
        robot=RobotConfig(
            footprint=RobotFootprint(body_points=np.zeros((1, 2))),
            # Off the cell lattice so rollout states do not ride the
            # interpolation kinks of the sampled field.
            start=(0.013, 0.004, 0.0),
        ),
        static_polygons=(((2.0, -2.0), (2.6, -2.0), (2.6, 2.0), (2.0, 2.0)),),
        nominal=(NominalSegment(0.0, (1.0, 0.0, 0.0)),),
        sensor=SensorConfig(rate=15.0, n_rays=360, max_range=8.0,
                            noise_std=0.0, dropout=0.0),
        mpc=MpcConfig(weight=(1.0, 1.0, 1.0)),
    )


def _mapper_wall_scenario() -> Scenario:
    # One-cell-thick bar two meters ahead; the slow spin sweeps the ray
    # pattern across the bar so every surface cell collects returns.
    return Scenario(
        name="mapper-wall",
        arena=(0.0, 4.0, 0.0, 3.0),
        resolution=0.05,
        n_theta=1,
        duration=1.5,
        robot=RobotConfig(
            footprint=RobotFootprint(body_points=np.zeros((1, 2))),
            start=(1.0, 1.5, 0.0),
        ),
        static_polygons=(((2.99, 1.0), (3.03, 1.0), (3.03, 2.0), (2.99, 2.0)),),
        nominal=(NominalSegment(0.0, (0.0, 0.0, 0.2)),),
        sensor=SensorConfig(rate=15.0, n_rays=200, max_range=8.0,
                            noise_std=0.004, dropout=0.02),
    )


def _empty_scenario() -> Scenario:
    return Scenario(
        name="empty",
        arena=(0.0, 4.0, 0.0, 3.0),
        resolution=0.05,
        n_theta=4,
        duration=2.0,
        robot=RobotConfig(
            footprint=RobotFootprint.rectangle(0.4, 0.3),
            start=(1.0, 1.5, 0.0),
        ),
        nominal=(NominalSegment(0.0, (0.3, 0.0, 0.0)),),
        sensor=SensorConfig(rate=15.0, n_rays=120, max_range=8.0,
                            noise_std=0.01, dropout=0.05),
    )


PRESETS = {
    "ball-1.0": lambda: _ball_scenario("ball-1.0", 1.0, None),
    "ball-1.25": lambda: _ball_scenario("ball-1.25", 1.25, (1.0, 1.0, 1.5)),
    "corridor": _corridor_scenario,
    "mapper-wall": _mapper_wall_scenario,
    "empty": _empty_scenario,
}


def preset(name: str) -> Scenario:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None


def make_random_static(seed: int, n_discs: int = 3) -> Scenario:
    """Seeded static world: discs scattered ahead of a robot driving right.
    Placement keeps every disc clear of the start pose, the walls, and the
    other discs so the start is strictly safe and a dodge path exists."""
    rng = np.random.default_rng(seed)
    start_xy = np.array([0.8, 2.0])
    discs = []
    guard = 0
    while len(discs) < n_discs:
        guard += 1
        if guard > 1000:
            raise RuntimeError("disc placement failed; relax constraints")
        r = float(rng.uniform(0.25, 0.4))
        c = np.array([rng.uniform(2.0, 5.2), rng.uniform(0.7, 3.3)])
        if np.linalg.norm(c - start_xy) < 1.2 + r:
            continue
        if c[1] - r < 0.35 or c[1] + r > 3.65:
            continue
        if any(np.linalg.norm(c - np.asarray(d.center)) < r + d.radius + 0.9
               for d in discs):
            continue
        discs.append(StaticDisc(center=(float(c[0]), float(c[1])), radius=r))
    return Scenario(
        name=f"static-{seed}",
        arena=_BALL_ARENA,
        resolution=0.05,
        n_theta=8,
        duration=8.0,
        seed=seed,
        robot=RobotConfig(
            footprint=RobotFootprint.rectangle(0.4, 0.3),
            start=(float(start_xy[0]), float(start_xy[1]), 0.0),
        ),
        static_discs=tuple(discs),
        nominal=(NominalSegment(0.0, (0.55, 0.0, 0.0)),),
        sensor=SensorConfig(rate=15.0, n_rays=240, max_range=8.0,
                            noise_std=0.01, dropout=0.05),
        issf=IssfConfig(alpha=2.0, epsilon=12.0),
        monitor=MonitorConfig(mu_bar=5.0, beta=1.0),
    )
