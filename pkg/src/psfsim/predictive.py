"""Predictive safety layer: a finite-horizon filter that bends a constant
desired command into a safe velocity plan using discrete-time CBF
constraints on the safety field,

    min   sum_i (u_i - mu_d)' R (u_i - mu_d)
    s.t.  x_{i+1} = x_i + u_i dt
          h(x_{i+1}, t_{i+1}) >= rho h(x_i, t_i)        (DCBF, 0 < rho < 1)

solved by SQP: roll the current control sequence out, linearize every DCBF
row through the field gradient, solve a dense QP in the control increments
with a trust region and soft slacks, then damp the update with a merit line
search (cost + penalty * violation, monotone across accepted iterates).

The horizon uses N controls and N+1 states; the plan's first control is the
filtered command. If the nominal rollout is already safe with margin the
planner returns it untouched, so the filter is exactly inactive away from
obstacles.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np

from .grids import DomainError
from .qp import solve_qp

# Merit contribution of a rollout state that leaves the field's domain; one
# full field unit, comfortably larger than any real DCBF violation we allow.
DOMAIN_VIOLATION = 1.0
# Hard mode runs the same l1-penalised subproblems, starting here and
# escalating tenfold if the converged iterate still violates. The cap keeps
# the subproblems in the range the QP solver resolves accurately.
_HARD_PENALTY = 1e4
_HARD_PENALTY_CAP = 1e5


class PlanInfeasibleError(RuntimeError):
    """Hard-constrained plan (slacks disabled) could not be made feasible."""


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20
    dt: float = 0.1
    rho: float = 0.9
    weight: tuple = (1.0, 1.0, 0.2)   # diagonal of R over (vx, vy, omega)
    slack_penalty: float = 1000.0     # merit weight per unit violation; 0 = hard
    trust_radius: float = 0.5         # per-component step bound per SQP iterate
    qp_tol: float = 1e-8
    sqp_max_iters: int = 30
    input_lower: Optional[tuple] = None
    input_upper: Optional[tuple] = None

    def __post_init__(self):
        if self.horizon < 1 or self.dt <= 0.0:
            raise ValueError("need horizon >= 1 and dt > 0")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if len(self.weight) != 3 or any(w <= 0 for w in self.weight):
            raise ValueError("weight must be 3 positive diagonal entries")
        if self.slack_penalty < 0.0:
            raise ValueError("slack_penalty must be >= 0")
        if self.trust_radius <= 0.0 or self.qp_tol <= 0.0 or self.sqp_max_iters < 1:
            raise ValueError("bad SQP limits")
        if (self.input_lower is None) != (self.input_upper is None):
            raise ValueError("input bounds must be set together")
        if self.input_lower is not None:
            lo = np.asarray(self.input_lower, dtype=float)
            hi = np.asarray(self.input_upper, dtype=float)
            if lo.shape != (3,) or hi.shape != (3,) or np.any(lo >= hi):
                raise ValueError("input bounds must satisfy lower < upper componentwise")

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.weight)

    @property
    def hard(self) -> bool:
        return self.slack_penalty == 0.0

    @property
    def penalty(self) -> float:
        return _HARD_PENALTY if self.hard else self.slack_penalty


@dataclass
class Plan:
    xs: np.ndarray            # (N+1, 3) predicted states
    us: np.ndarray            # (N, 3) controls
    ts: np.ndarray            # (N+1,) knot times
    dcbf_margins: np.ndarray  # (N,) true margins h_{i+1} - rho h_i at the solution
    lin_margins: np.ndarray   # (N,) margins the final QP step predicted
    slack_used: np.ndarray    # (N,) max(0, -margin)
    cost: float
    sqp_iters: int
    converged: bool
    mu_d: np.ndarray = dataclass_field(default_factory=lambda: np.zeros(3))

    @property
    def first_control(self) -> np.ndarray:
        return self.us[0]

    @property
    def min_margin(self) -> float:
        return float(np.min(self.dcbf_margins)) if len(self.dcbf_margins) else np.inf


@dataclass
class PlanCheck:
    margins: np.ndarray
    satisfied: np.ndarray       # margins >= -10 * qp_tol
    lin_error: np.ndarray       # |true - linear-model| margin gap
    lin_flagged: np.ndarray     # lin_error > qp_tol


def rollout(chi, us: np.ndarray, dt: float) -> np.ndarray:
    xs = np.empty((len(us) + 1, 3))
    xs[0] = np.asarray(chi, dtype=float)
    np.cumsum(us * dt, axis=0, out=xs[1:])
    xs[1:] += xs[0]
    return xs


def _clip(us: np.ndarray, cfg: MpcConfig) -> np.ndarray:
    if cfg.input_lower is None:
        return us
    return np.clip(us, np.asarray(cfg.input_lower), np.asarray(cfg.input_upper))


def _evaluate(xs: np.ndarray, ts: np.ndarray, field):
    """Sample h and grad h at every rollout state. Returns (h, grads,
    in_domain); sampling stops being attempted after the first exit."""
    fn = getattr(field, "evaluate_many", None)
    if fn is not None:
        return fn(xs, ts)
    n = len(xs)
    h = np.full(n, np.nan)
    grads = np.zeros((n, 3))
    ok = np.zeros(n, dtype=bool)
    for i in range(n):
        try:
            h[i] = field.value(xs[i], ts[i])
            grads[i] = field.gradient(xs[i], ts[i]).as_array()
            ok[i] = True
        except DomainError:
            break
    return h, grads, ok


def _margins(h: np.ndarray, ok: np.ndarray, rho: float):
    """True DCBF margins; rows touching an out-of-domain state count as a
    full violation."""
    n = len(h) - 1
    m = np.empty(n)
    for i in range(n):
        if ok[i] and ok[i + 1]:
            m[i] = h[i + 1] - rho * h[i]
        else:
            m[i] = -DOMAIN_VIOLATION
    return m


def _cost(us: np.ndarray, mu_d: np.ndarray, R: np.ndarray) -> float:
    dev = us - mu_d
    return float(np.einsum("ij,jk,ik->", dev, R, dev))


def _merit(us, mu_d, R, margins, penalty) -> float:
    viol = np.maximum(0.0, -margins)
    return _cost(us, mu_d, R) + penalty * float(viol.sum())


def plan(chi, mu_d, field, cfg: MpcConfig, t0: float,
         warm: Optional[np.ndarray] = None) -> Plan:
    """Run the SQP filter from the current state.

    mu_d is the desired command, either one (3,) vector held over the
    horizon or an (N, 3) per-step schedule. warm, if given, is a (N, 3)
    control sequence used as the starting iterate (typically the previous
    plan shifted by one step). Raises PlanInfeasibleError only in hard mode
    (slack_penalty = 0) when the constraints cannot be met.
    """
    chi = np.asarray(chi, dtype=float)
    N = cfg.horizon
    mu_d = np.asarray(mu_d, dtype=float)
    if mu_d.ndim == 1:
        mu_d = np.tile(mu_d, (N, 1))
    if mu_d.shape != (N, 3):
        raise ValueError(f"mu_d shape {mu_d.shape} is neither (3,) nor ({N}, 3)")
    R = cfg.R
    ts = t0 + cfg.dt * np.arange(N + 1)

    def make_plan(us, margins, lin_margins, iters, converged):
        return Plan(xs=rollout(chi, us, cfg.dt), us=us.copy(), ts=ts,
                    dcbf_margins=margins, lin_margins=lin_margins,
                    slack_used=np.maximum(0.0, -margins),
                    cost=_cost(us, mu_d, R), sqp_iters=iters,
                    converged=converged, mu_d=mu_d.copy())

    # Nominal shortcut: desired command already safe along the horizon.
    us_nom = _clip(mu_d.copy(), cfg)
    h, _, ok = _evaluate(rollout(chi, us_nom, cfg.dt), ts, field)
    m_nom = _margins(h, ok, cfg.rho)
    if ok.all() and m_nom.min() > cfg.qp_tol:
        return make_plan(us_nom, m_nom, m_nom.copy(), 0, True)

    us = _clip(np.array(warm, dtype=float), cfg) if warm is not None else us_nom.copy()
    if us.shape != (N, 3):
        raise ValueError(f"warm start shape {us.shape} != ({N}, 3)")

    # Accepted iterates are monotone in the merit function, so the control
    # sequence held in `us` when the loop ends is also the best one seen.
    # The trust radius adapts: a rejected step means the linearization broke
    # inside the current ball (the field curves at the forcing rate), so the
    # ball shrinks and the QP re-solves rather than just damping the step.
    penalty = cfg.penalty
    hard_tol = max(10.0 * cfg.qp_tol, 1e-6)
    lin_margins = None
    converged = False
    total_iters = 0
    qp_warm = None

    while True:
        radius = cfg.trust_radius
        for _ in range(cfg.sqp_max_iters):
            total_iters += 1
            xs = rollout(chi, us, cfg.dt)
            h, grads, ok = _evaluate(xs, ts, field)
            margins = _margins(h, ok, cfg.rho)
            merit = _merit(us, mu_d, R, margins, penalty)

            dz, lin_pred, qp_warm = _sqp_step(us, mu_d, cfg, R, grads,
                                              margins, ok, penalty, radius,
                                              qp_warm)
            if np.abs(dz).max(initial=0.0) < cfg.qp_tol:
                converged = True
                break

            accepted = False
            for k in range(7):
                alpha = 0.5 ** k
                cand = _clip(us + alpha * dz, cfg)
                h_c, _, ok_c = _evaluate(rollout(chi, cand, cfg.dt), ts, field)
                m_c = _margins(h_c, ok_c, cfg.rho)
                if _merit(cand, mu_d, R, m_c, penalty) <= merit + 1e-12:
                    us = cand
                    lin_margins = margins + alpha * lin_pred
                    accepted = True
                    break
            if accepted:
                radius = min(cfg.trust_radius, 2.0 * radius)
            else:
                radius *= 0.25
                if radius < 1e-6 * cfg.trust_radius:
                    break

        h, _, ok = _evaluate(rollout(chi, us, cfg.dt), ts, field)
        margins = _margins(h, ok, cfg.rho)
        # An l1 penalty reproduces the hard optimum only once it exceeds
        # the binding multipliers; a converged iterate that still violates
        # means the penalty was too small, so raise it and keep going.
        if (not cfg.hard or margins.min(initial=0.0) >= -hard_tol
                or penalty >= _HARD_PENALTY_CAP):
            break
        penalty *= 10.0
        converged = False

    if lin_margins is None:
        lin_margins = margins.copy()

    result = make_plan(us, margins, lin_margins, total_iters, converged)

    if cfg.hard and result.min_margin < -hard_tol:
        raise PlanInfeasibleError(
            f"hard-constrained plan violates DCBF by {-result.min_margin:.3e}")
    return result


def _sqp_step(us, mu_d, cfg: MpcConfig, R, grads, margins, ok, penalty,
              radius: Optional[float] = None, qp_warm=None):
    """Build and solve one QP subproblem. Returns (du, lin_pred, qp_warm)
    where lin_pred[i] is the margin change row i's linearization predicts
    for the full step du and qp_warm carries the solved active set to seed
    the next step's QP (opaque; pass it back in)."""
    N = cfg.horizon
    dt = cfg.dt
    nu = 3 * N
    if radius is None:
        radius = cfg.trust_radius

    # d h_{i+1} / d u_j = dt grad_{i+1} for j <= i; the rho h_i term pulls
    # out dt rho grad_i for j <= i - 1.
    okpair = ok[:-1] & ok[1:]
    row_idx = np.flatnonzero(okpair)
    tri = np.tril(np.ones((N, N)))
    tris = np.tril(np.ones((N, N)), -1)
    rows3 = (tri[:, :, None] * (dt * grads[1:])[:, None, :]
             - tris[:, :, None] * (dt * cfg.rho * grads[:-1])[:, None, :])
    rows = rows3.reshape(N, nu)[row_idx]
    rhs = -margins[row_idx]

    ns = len(rows)
    n = nu + ns
    # Slacks enter in penalty-scaled units (sigma = penalty * violation)
    # with unit linear and quadratic cost, so the subproblem stays O(1)
    # no matter how large the penalty is. In violation units the slack
    # cost is penalty * v + (penalty * v)^2 / 2; its slope at zero is the
    # penalty, which is what the exact-penalty argument needs.
    H = np.zeros((n, n))
    H[:nu, :nu] = np.kron(np.eye(N), 2.0 * R)
    H[nu:, nu:] = np.eye(ns)
    g = np.zeros(n)
    g[:nu] = (2.0 * (us - mu_d) @ R).ravel()
    g[nu:] = 1.0

    blocks = []
    d_parts = []
    # DCBF rows with their slack column.
    dcbf = np.zeros((ns, n))
    dcbf[:, :nu] = rows
    dcbf[np.arange(ns), nu + np.arange(ns)] = 1.0 / penalty
    blocks.append(dcbf)
    d_parts.append(rhs)
    # Slack nonnegativity.
    sl = np.zeros((ns, n))
    sl[np.arange(ns), nu + np.arange(ns)] = 1.0
    blocks.append(sl)
    d_parts.append(np.zeros(ns))
    # Trust region as a box on the control increments.
    eye_u = np.zeros((nu, n))
    eye_u[np.arange(nu), np.arange(nu)] = 1.0
    blocks.append(eye_u)
    d_parts.append(np.full(nu, -radius))
    blocks.append(-eye_u)
    d_parts.append(np.full(nu, -radius))
    # Input bounds on the updated controls.
    if cfg.input_lower is not None:
        flat = us.ravel()
        blocks.append(eye_u)
        d_parts.append(np.tile(np.asarray(cfg.input_lower), N) - flat)
        blocks.append(-eye_u)
        d_parts.append(flat - np.tile(np.asarray(cfg.input_upper), N))
    C = np.concatenate(blocks, axis=0)
    d = np.concatenate(d_parts)

    # The active set moves little between SQP steps; seed the QP with the
    # previous one when the row layout matches (same in-domain pattern).
    working0 = qp_warm[1] if qp_warm is not None and qp_warm[0] == ns else None
    sol = solve_qp(H, g, C, d, working0=working0)
    du = sol.x[:nu].reshape(N, 3)

    lin_pred = np.zeros(N)
    lin_pred[row_idx] = rows @ sol.x[:nu]
    return du, lin_pred, (ns, sol.active)


def shift_warm_start(us: np.ndarray, steps: int, mu_d) -> np.ndarray:
    """Advance a previous plan by `steps` control intervals, repeating the
    desired command at the tail."""
    if steps <= 0:
        return us.copy()
    N = len(us)
    out = np.tile(np.asarray(mu_d, dtype=float), (N, 1))
    if steps < N:
        out[:N - steps] = us[steps:]
    return out


def check_plan(p: Plan, field, cfg: MpcConfig) -> PlanCheck:
    """Re-evaluate a plan's DCBF margins directly on the field and compare
    with what the final QP linearization promised."""
    h, _, ok = _evaluate(p.xs, p.ts, field)
    margins = _margins(h, ok, cfg.rho)
    lin_error = np.abs(margins - p.lin_margins)
    return PlanCheck(margins=margins,
                     satisfied=margins >= -10.0 * cfg.qp_tol,
                     lin_error=lin_error,
                     lin_flagged=lin_error > cfg.qp_tol)
