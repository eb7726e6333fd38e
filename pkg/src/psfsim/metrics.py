"""Episode scoring and aggregation: robustness (minimum safety-field value
seen during the run), optimality (measured deviation effort normalized by
the clairvoyant ideal effort), and per-mode summaries with a Hotelling-T^2
confidence ellipse for the population mean of (robustness, optimality).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import f as f_dist

from . import predictive
from .grids import ScalarGrid2D
from .poisson import ScheduledField, erode_free_space, solve_psf
from .simulation import EpisodeLog, Scenario, true_occupancy

ELLIPSE_CONFIDENCE = 0.85
_SINGULAR_EIG = 1e-18


class UnscorableScenarioError(RuntimeError):
    """The clairvoyant problem is infeasible, so no ideal cost exists."""


@dataclass(frozen=True)
class EpisodeMetrics:
    j_robustness: float
    j_optimality: float
    j_ideal: float
    measured_cost: float
    success: bool
    error: bool
    filter_mode: str
    unnormalized: bool

    def to_dict(self) -> dict:
        return {
            "j_robustness": self.j_robustness,
            "j_optimality": self.j_optimality,
            "j_ideal": self.j_ideal,
            "measured_cost": self.measured_cost,
            "success": self.success,
            "error": self.error,
            "filter_mode": self.filter_mode,
            "unnormalized": self.unnormalized,
        }


def _window(log: EpisodeLog, h_threshold: Optional[float]) -> slice:
    # Optional encounter windowing: restrict scoring to the span where the
    # field dipped below the trigger. Whole episode when never triggered.
    if h_threshold is None:
        return slice(None)
    h = log.column("h")
    below = np.flatnonzero(h < h_threshold)
    if len(below) == 0:
        return slice(None)
    return slice(int(below[0]), int(below[-1]) + 1)


def robustness(log: EpisodeLog, h_threshold: Optional[float] = None) -> float:
    if len(log) == 0:
        raise ValueError("empty episode log")
    return float(log.column("h")[_window(log, h_threshold)].min())


def measured_cost(log: EpisodeLog, R, h_threshold: Optional[float] = None) -> float:
    """Sum over real-time ticks of (mu_s - mu_d)^T R (mu_s - mu_d), using the
    applied and nominal commands recorded in the log."""
    if len(log) == 0:
        raise ValueError("empty episode log")
    w = _window(log, h_threshold)
    mu_s = log.columns("mus_vx", "mus_vy", "mus_w")[w]
    mu_d = log.columns("mud_vx", "mud_vy", "mud_w")[w]
    dev = mu_s - mu_d
    R = np.asarray(R, dtype=float)
    return float(np.einsum("ij,jk,ik->", dev, R, dev))


def clairvoyant_field(scenario: Scenario, t_grid, warm_iters_out: Optional[list] = None):
    """Ground-truth safety field over the episode: occupancy rasterized from
    the known obstacle paths at each knot time, eroded and solved into a
    stack, stitched into a piecewise-linear schedule."""
    grid = scenario.grid_spec()
    stacks = []
    warm = None
    for t in t_grid:
        occ = true_occupancy(scenario, grid, float(t))
        occ_grid = ScalarGrid2D(grid, occ.astype(float))
        masks = erode_free_space(occ_grid, scenario.robot.footprint, scenario.n_theta)
        stack, info = solve_psf(masks, scenario.poisson, timestamp=float(t), warm=warm)
        if warm_iters_out is not None:
            warm_iters_out.append(info.iterations)
        warm = stack
        stacks.append(stack)
    return ScheduledField(stacks)


def ideal_cost(scenario: Scenario, mpc_cfg: Optional[predictive.MpcConfig] = None) -> float:
    """Clairvoyant optimum: one hard-constrained plan over the whole episode
    against the true future field, starting from the scenario start. The
    optimizer's cost is the normalizer J_ideal; infeasibility means the
    scenario cannot be scored."""
    base = mpc_cfg if mpc_cfg is not None else scenario.mpc
    n_steps = int(round(scenario.duration / base.dt))
    cfg = predictive.MpcConfig(
        horizon=n_steps,
        dt=base.dt,
        rho=base.rho,
        weight=base.weight,
        slack_penalty=0.0,
        trust_radius=base.trust_radius,
        qp_tol=base.qp_tol,
        sqp_max_iters=max(base.sqp_max_iters, 60),
        input_lower=base.input_lower,
        input_upper=base.input_upper,
    )
    t_grid = cfg.dt * np.arange(n_steps + 1)
    field = clairvoyant_field(scenario, t_grid)
    chi0 = np.asarray(scenario.robot.start, dtype=float)
    mu_d = np.array([scenario.nominal_command(t) for t in t_grid[:-1]])
    try:
        plan = predictive.plan(chi0, mu_d, field, cfg, t0=0.0)
    except predictive.PlanInfeasibleError as exc:
        raise UnscorableScenarioError(
            f"clairvoyant plan infeasible for scenario {scenario.name!r}: {exc}") from exc
    # dt-weighting cancels in the optimality ratio; keep the raw QP objective
    # so the measured cost (plain tick sum) and the normalizer use the same
    # per-sample convention at their respective rates.
    return float(plan.cost)


def score_episode(log: EpisodeLog, mode: str, j_ideal: float, R,
                  error: bool = False,
                  h_threshold: Optional[float] = None) -> EpisodeMetrics:
    collided = bool(np.any(log.column("collision") > 0.5)) if len(log) else True
    errored = error or (bool(np.any(log.column("error_flag") > 0.5)) if len(log) else True)
    cost = measured_cost(log, R, h_threshold)
    if j_ideal > 0.0:
        j_opt = cost / j_ideal
        unnormalized = False
    else:
        j_opt = cost
        unnormalized = True
    return EpisodeMetrics(
        j_robustness=robustness(log, h_threshold),
        j_optimality=j_opt,
        j_ideal=float(j_ideal),
        measured_cost=cost,
        success=not collided and not errored,
        error=errored,
        filter_mode=mode,
        unnormalized=unnormalized,
    )


def hotelling_ellipse(points: np.ndarray, confidence: float = ELLIPSE_CONFIDENCE):
    """Confidence ellipse for the population mean of n 2-D samples:
    n (xbar - mu)^T S^{-1} (xbar - mu) <= p(n-1)/(n-p) F_{p,n-p}(confidence).
    Returns a dict (center, semi_axes, angle, confidence, degenerate) or None
    when the covariance is singular but the points are not all identical."""
    pts = np.asarray(points, dtype=float)
    n, p = pts.shape
    if n <= p:
        return None
    mean = pts.mean(axis=0)
    if float(np.abs(pts - mean).max()) < 1e-15:
        return {"center": mean.tolist(), "semi_axes": [0.0, 0.0], "angle": 0.0,
                "confidence": confidence, "degenerate": True}
    cov = np.cov(pts, rowvar=False, ddof=1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if float(eigvals.min()) < _SINGULAR_EIG:
        return None
    scale = p * (n - 1) / (n - p) * float(f_dist.ppf(confidence, p, n - p))
    semi = np.sqrt(eigvals * scale / n)
    # Major axis first; angle of the major axis against +x.
    order = np.argsort(semi)[::-1]
    semi = semi[order]
    major = eigvecs[:, order[0]]
    angle = float(np.arctan2(major[1], major[0]))
    return {"center": mean.tolist(), "semi_axes": semi.tolist(), "angle": angle,
            "confidence": confidence, "degenerate": False}


def ellipse_polyline(ellipse: dict, n: int = 64) -> np.ndarray:
    """Sample the ellipse boundary as an (n, 2) closed polyline for plotting."""
    theta = np.linspace(0.0, 2.0 * np.pi, n)
    a, b = ellipse["semi_axes"]
    unit = np.stack([a * np.cos(theta), b * np.sin(theta)], axis=1)
    c, s = np.cos(ellipse["angle"]), np.sin(ellipse["angle"])
    rot = np.array([[c, -s], [s, c]])
    return unit @ rot.T + np.asarray(ellipse["center"])


def aggregate(runs) -> dict:
    """Per-mode summary: success/failure counts over all runs, mean and
    sample covariance of (j_robustness, j_optimality) over successful runs,
    and the 85% Hotelling ellipse when at least 3 successes exist and the
    covariance is nonsingular. Failed episodes never enter the scatter."""
    summary = {}
    modes = sorted({r.filter_mode for r in runs})
    for mode in modes:
        mode_runs = [r for r in runs if r.filter_mode == mode]
        good = [r for r in mode_runs if r.success]
        entry = {
            "n_runs": len(mode_runs),
            "n_success": len(good),
            "n_failure": len(mode_runs) - len(good),
            "unnormalized": any(r.unnormalized for r in mode_runs),
            "mean": None,
            "covariance": None,
            "ellipse": None,
            "ellipse_singular": False,
            "points": [[r.j_robustness, r.j_optimality] for r in good],
        }
        if good:
            pts = np.array(entry["points"])
            entry["mean"] = pts.mean(axis=0).tolist()
            if len(good) >= 2:
                entry["covariance"] = np.cov(pts, rowvar=False, ddof=1).tolist()
            if len(good) >= 3:
                ell = hotelling_ellipse(pts)
                if ell is None:
                    entry["ellipse_singular"] = True
                else:
                    entry["ellipse"] = ell
        summary[mode] = entry
    return summary
