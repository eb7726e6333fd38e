"""Command line front end.

  psfsim run     one episode of a scenario in one filter mode
  psfsim suite   all modes x repetitions, aggregate metrics and plot data
  psfsim psf     one-shot field solve for an occupancy grid or image
  psfsim verify  fast invariant self-test battery

Exit code 0 only when the requested work finished without errors (and, for
verify, with every check green).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, harness, mapping, metrics, predictive, qp, realtime
from .grids import (GridSpec, PsfStack, RobotFootprint, ScalarGrid2D,
                    load_grid, sample_trilinear, save_stack)
from .poisson import PoissonConfig, FreeSpaceMasks, erode_free_space, solve_psf
from .scenarios import load_scenario, preset, PRESETS
from .simulation import Scenario


def _out_dir(value):
    return os.environ.get("PSFSIM_OUT", value)


def _load_scenario_arg(args) -> Scenario:
    if args.scenario:
        return load_scenario(args.scenario)
    return preset(args.preset)


def _add_scenario_args(p: argparse.ArgumentParser):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="scenario JSON file")
    src.add_argument("--preset", choices=sorted(PRESETS),
                     help="built-in scenario preset")


def _add_rate_args(p: argparse.ArgumentParser):
    p.add_argument("--sensor-hz", type=float, default=15.0)
    p.add_argument("--psf-hz", type=float, default=15.0)
    p.add_argument("--predictive-hz", type=float, default=10.0)
    p.add_argument("--realtime-hz", type=float, default=100.0)


def _run_config(args, mode: str, repetitions: int) -> harness.RunConfig:
    return harness.RunConfig(
        filter_mode=mode,
        repetitions=repetitions,
        base_seed=args.base_seed,
        sensor_hz=args.sensor_hz,
        psf_hz=args.psf_hz,
        predictive_hz=args.predictive_hz,
        realtime_hz=args.realtime_hz,
        output_dir=_out_dir(args.out),
        dump_grids=getattr(args, "dump_grids", False),
        dump_stacks=getattr(args, "dump_stacks", False),
        dump_plans=getattr(args, "dump_plans", False),
    )


def cmd_run(args) -> int:
    scenario = _load_scenario_arg(args)
    cfg = _run_config(args, args.mode, 1)
    j_ideal = 0.0 if args.skip_ideal else None
    log, em = harness.run_episode(scenario, cfg, rep=args.rep, j_ideal=j_ideal)
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{args.mode}-{args.rep:02d}"
        log.to_csv(out / f"{stem}.csv")
        (out / f"{stem}.metrics.json").write_text(harness.dumps_metrics(em.to_dict()))
    print(f"scenario={scenario.name} mode={args.mode} rep={args.rep} "
          f"ticks={len(log)} success={em.success} "
          f"j_robustness={em.j_robustness:.4f} j_optimality={em.j_optimality:.4f}"
          f"{' (unnormalized)' if em.unnormalized else ''}")
    return 0 if not em.error else 1


def cmd_suite(args) -> int:
    scenario = _load_scenario_arg(args)
    modes = tuple(args.modes.split(","))
    cfg = _run_config(args, modes[0], args.repetitions)
    t0 = time.perf_counter()
    payload, _ = harness.run_suite(scenario, cfg, modes=modes)
    elapsed = time.perf_counter() - t0
    for mode in modes:
        agg = payload["aggregate"][mode]
        mean = agg["mean"]
        mean_txt = (f"mean=({mean[0]:.4f}, {mean[1]:.4f})"
                    if mean is not None else "mean=n/a")
        print(f"{mode}: {agg['n_success']}/{agg['n_runs']} ok, {mean_txt}")
    print(f"suite finished in {elapsed:.1f} s"
          + (f", outputs in {cfg.output_dir}" if cfg.output_dir else ""))
    any_error = any(m["error"] for m in payload["episodes"])
    return 1 if any_error else 0


def _load_occupancy(path: Path, resolution: float) -> ScalarGrid2D:
    if path.suffix == ".json":
        return load_grid(path.with_suffix(""))
    try:
        from PIL import Image
    except ImportError:
        raise SystemExit("reading image occupancy needs the pillow package; "
                         "pass a .json grid instead")
    img = np.asarray(Image.open(path).convert("L"), dtype=float)
    # Image rows scan top-down; the grid's y axis points up.
    occ = (img.T[:, ::-1] > 127).astype(float)
    spec = GridSpec(0.0, 0.0, resolution, occ.shape[0], occ.shape[1])
    return ScalarGrid2D(spec, occ)


def cmd_psf(args) -> int:
    grid = _load_occupancy(Path(args.input), args.resolution)
    if args.footprint_rect:
        fp = RobotFootprint.rectangle(*args.footprint_rect)
    else:
        fp = RobotFootprint(body_points=np.zeros((1, 2)))
    cfg = PoissonConfig(forcing=args.forcing, tol=args.tol)
    masks = erode_free_space(grid, fp, args.n_theta)
    t0 = time.perf_counter()
    stack, info = solve_psf(masks, cfg, timestamp=0.0)
    elapsed = time.perf_counter() - t0
    out = _out_dir(args.out)
    save_stack(stack, out)
    free = masks.free
    interior_max = float(stack.values[free].max()) if free.any() else 0.0
    print(f"solved {stack.values.shape} in {info.iterations} sweeps "
          f"({elapsed:.2f} s), residual {info.max_residual:.2e}, "
          f"max h {interior_max:.4f}; wrote {out}.json/.bin")
    if info.any_empty:
        print(f"empty layers: {list(info.empty_layers)}")
    return 0


def _check(name: str, fn) -> bool:
    try:
        fn()
        print(f"PASS {name}")
        return True
    except AssertionError as exc:
        print(f"FAIL {name}: {exc}")
        return False
    except Exception as exc:   # noqa: BLE001 - battery must report, not crash
        print(f"FAIL {name}: unexpected {type(exc).__name__}: {exc}")
        return False


def _verify_kernel():
    cfg = mapping.MapperConfig(kernel_radius=1, kernel_sigma=1.0)
    k = mapping.gaussian_kernel(cfg)
    assert abs(k[1, 1] - 1.0) < 1e-15, "center weight"
    assert abs(k[0, 1] - np.exp(-0.5)) < 1e-12, "edge weight"
    assert abs(k[0, 0] - np.exp(-1.0)) < 1e-12, "diagonal weight"


def _verify_confidence():
    spec = GridSpec(0.0, 0.0, 0.1, 3, 3)
    cfg = mapping.MapperConfig(beta_minus=2.0, beta_plus=3.0, switch=0.5)
    g = ScalarGrid2D(spec, np.full((3, 3), 0.5))
    low = mapping.update_confidence(g, ScalarGrid2D(spec, np.zeros((3, 3))), cfg, 0.1)
    assert abs(low.values[0, 0] - 0.5 * np.exp(-0.2)) < 1e-12, "decay arithmetic"
    g0 = ScalarGrid2D(spec, np.zeros((3, 3)))
    up = mapping.update_confidence(g0, ScalarGrid2D(spec, np.ones((3, 3))), cfg, 0.1)
    assert abs(up.values[0, 0] - (1.0 - np.exp(-0.3))) < 1e-12, "growth arithmetic"


def _verify_hysteresis():
    spec = GridSpec(0.0, 0.0, 0.1, 3, 3)
    cfg = mapping.MapperConfig()
    m_hat = ScalarGrid2D(spec, np.zeros((3, 3)))
    transitions = 0
    rng = np.random.default_rng(7)
    for _ in range(100):
        gamma = ScalarGrid2D(spec, rng.uniform(0.31, 0.59, (3, 3)))
        nxt = mapping.threshold_hysteresis(gamma, m_hat, cfg)
        transitions += int((nxt.values != m_hat.values).sum())
        m_hat = nxt
    assert transitions == 0, f"{transitions} transitions inside the dead band"


def _verify_poisson():
    rng = np.random.default_rng(11)
    spec = GridSpec(0.0, 0.0, 0.05, 41, 31)
    occ = (rng.random((41, 31)) < 0.08).astype(float)
    fp = RobotFootprint(body_points=np.zeros((1, 2)))
    masks = erode_free_space(ScalarGrid2D(spec, occ), fp, 1)
    cfg = PoissonConfig()
    stack, info = solve_psf(masks, cfg, timestamp=0.0)
    free = masks.free
    assert info.max_residual < cfg.tol, "residual over tolerance"
    assert stack.values[~free].max() == 0.0 and stack.values[~free].min() == 0.0, \
        "boundary cells not exactly zero"
    if free.any():
        assert stack.values[free].min() > 0.0, "interior not positive"


def _verify_issf_oracle():
    rng = np.random.default_rng(23)
    worst = 0.0
    for _ in range(200):
        cfgf = realtime.IssfConfig(alpha=float(rng.uniform(0.5, 4.0)),
                                   epsilon=float(rng.uniform(0.5, 8.0)))
        a = rng.normal(size=3)
        h = float(rng.uniform(-0.2, 1.0))
        dh = float(rng.normal(0.0, 0.3))
        mu_p = rng.normal(size=3)
        b = -cfgf.alpha * h - dh + float(a @ a) / cfgf.epsilon
        if float(a @ mu_p) >= b:
            continue
        mu = realtime.project_halfspace(mu_p, a, b)
        H = 2.0 * np.eye(3)
        g = -2.0 * mu_p
        C = a[None, :]
        d = np.array([b])
        x0 = a * (b + abs(b) + 1.0) / float(a @ a)
        res = qp.solve_qp(H, g, C, d, x0)
        worst = max(worst, float(np.abs(res.x - mu).max()))
    assert worst < 1e-9, f"worst deviation {worst:.2e}"


def _verify_sampling():
    rng = np.random.default_rng(5)
    spec = GridSpec(0.0, 0.0, 0.1, 7, 6, n_theta=4)
    vals = rng.random((4, 7, 6))
    stack = PsfStack(spec, vals, 0.0)
    for _ in range(20):
        k = rng.integers(0, 4)
        ix = rng.integers(0, 7)
        iy = rng.integers(0, 6)
        q = (spec.origin_x + ix * 0.1, spec.origin_y + iy * 0.1,
             k * spec.theta_step)
        got = sample_trilinear(stack, q)
        assert abs(got - vals[k, ix, iy]) < 1e-12, "cell-center sample mismatch"


def _verify_determinism():
    from .scenarios import preset as get_preset
    scenario = get_preset("empty")
    cfg = harness.RunConfig(filter_mode="realtime", realtime_hz=50.0)
    rows = []
    for _ in range(2):
        log, em = harness.run_episode(scenario, cfg, rep=0, j_ideal=0.0)
        rows.append((tuple(log.rows), em.to_dict()["j_robustness"]))
    assert rows[0] == rows[1], "repeated episode differs"


def cmd_verify(_args) -> int:
    checks = [
        ("mapper kernel weights", _verify_kernel),
        ("confidence integration", _verify_confidence),
        ("hysteresis dead band", _verify_hysteresis),
        ("field solve residual/positivity", _verify_poisson),
        ("realtime filter vs QP", _verify_issf_oracle),
        ("stack sampling", _verify_sampling),
        ("episode determinism", _verify_determinism),
    ]
    ok = True
    for name, fn in checks:
        ok = _check(name, fn) and ok
    print("verify: all checks passed" if ok else "verify: FAILURES above")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psfsim",
                                description="layered safety filter simulator")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run one episode")
    _add_scenario_args(pr)
    pr.add_argument("--mode", choices=harness.MODES, default="multistage")
    pr.add_argument("--rep", type=int, default=0, help="repetition index (seeds the episode)")
    pr.add_argument("--base-seed", type=int, default=0)
    pr.add_argument("--out", default=None, help="output directory")
    pr.add_argument("--skip-ideal", action="store_true",
                    help="skip the clairvoyant solve; optimality stays unnormalized")
    pr.add_argument("--dump-grids", action="store_true")
    pr.add_argument("--dump-stacks", action="store_true")
    pr.add_argument("--dump-plans", action="store_true")
    _add_rate_args(pr)
    pr.set_defaults(fn=cmd_run)

    ps = sub.add_parser("suite", help="run all modes x repetitions")
    _add_scenario_args(ps)
    ps.add_argument("--modes", default=",".join(harness.MODES))
    ps.add_argument("--repetitions", type=int, default=10)
    ps.add_argument("--base-seed", type=int, default=0)
    ps.add_argument("--out", default=None)
    _add_rate_args(ps)
    ps.set_defaults(fn=cmd_suite)

    pp = sub.add_parser("psf", help="solve the field for a stored occupancy grid")
    pp.add_argument("--input", required=True,
                    help=".json grid header (with its .bin) or a black/white image")
    pp.add_argument("--out", default="psf-out", help="output stack base path")
    pp.add_argument("--resolution", type=float, default=0.02,
                    help="cell size for image input")
    pp.add_argument("--n-theta", type=int, default=1)
    pp.add_argument("--forcing", type=float, default=-4.0)
    pp.add_argument("--tol", type=float, default=1e-6)
    pp.add_argument("--footprint-rect", type=float, nargs=2, default=None,
                    metavar=("LENGTH", "WIDTH"))
    pp.set_defaults(fn=cmd_psf)

    pv = sub.add_parser("verify", help="fast invariant self-tests")
    pv.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, metrics.UnscorableScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
