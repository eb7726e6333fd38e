"""Real-time safety filter: closed-form solution of the ISSf CBF-QP on the
single-integrator model chi_dot = mu,

    mu_s = argmin_mu ||mu - mu_p||^2
           s.t.  grad_h . mu + dh/dt >= -alpha h + (1/epsilon) ||grad_h||^2,

which is the Euclidean projection of mu_p onto a half-space: inactive when
the constraint already holds (mu_p returned untouched), otherwise

    mu_s = mu_p + grad_h (b - grad_h . mu_p) / ||grad_h||^2,

with b the constraint offset. The (1/epsilon)||grad_h||^2 term buys
input-to-state safety margin against disturbance; epsilon -> inf recovers
the plain CBF-QP.

Also hosts the tracking-layer barrier bookkeeping: the composite barrier
B = h - V/mu_bar certified by the rate condition lambda >= alpha +
epsilon mu_bar / (4 beta) when the tracking Lyapunov function satisfies
V >= beta ||chi_dot - chi_dot_cmd||^2 and V_dot <= -lambda V.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class IssfConfig:
    alpha: float = 2.0        # class-K slope on h
    epsilon: float = 5.0      # ISSf gain; larger = less conservative
    grad_floor: float = 1e-6  # below this gradient norm the filter cannot act

    def __post_init__(self):
        if self.alpha <= 0.0 or self.epsilon <= 0.0 or self.grad_floor <= 0.0:
            raise ValueError("alpha, epsilon, grad_floor must be positive")


@dataclass(frozen=True)
class FilterResult:
    mu_s: np.ndarray
    active: bool
    degenerate: bool
    margin_before: float      # constraint value at mu_p (>= 0 means safe as-is)
    margin_after: float       # constraint value at mu_s
    h_value: float
    grad: np.ndarray
    dh_dt: float

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def project_halfspace(mu_p: np.ndarray, a: np.ndarray, b: float) -> np.ndarray:
    """Nearest point to mu_p satisfying a . mu >= b; assumes ||a|| > 0 and
    the constraint violated at mu_p."""
    return mu_p + a * ((b - float(a @ mu_p)) / float(a @ a))


def filter_command(mu_p, chi, field, cfg: IssfConfig, t: float) -> FilterResult:
    """Project the proposed command onto the ISSf CBF half-space at (chi, t).

    field must expose value/gradient/time_slope (PsfSnapshot or
    ScheduledField). The inactive branch returns mu_p itself, bit for bit.
    The degenerate branch (vanishing gradient with the constraint violated)
    commands zero velocity, the only safe fallback with no usable descent
    direction.
    """
    mu_p = np.asarray(mu_p, dtype=float)
    h = field.value(chi, t)
    grad = field.gradient(chi, t).as_array()
    dh_dt = field.time_slope(chi, t)
    gn2 = float(grad @ grad)

    b = -cfg.alpha * h - dh_dt + gn2 / cfg.epsilon
    margin_before = float(grad @ mu_p) - b

    if margin_before >= 0.0:
        return FilterResult(mu_s=mu_p, active=False, degenerate=False,
                            margin_before=margin_before, margin_after=margin_before,
                            h_value=h, grad=grad, dh_dt=dh_dt)

    if np.sqrt(gn2) < cfg.grad_floor:
        mu_s = np.zeros_like(mu_p)
        return FilterResult(mu_s=mu_s, active=True, degenerate=True,
                            margin_before=margin_before,
                            margin_after=float(grad @ mu_s) - b,
                            h_value=h, grad=grad, dh_dt=dh_dt)

    mu_s = project_halfspace(mu_p, grad, b)
    return FilterResult(mu_s=mu_s, active=True, degenerate=False,
                        margin_before=margin_before,
                        margin_after=float(grad @ mu_s) - b,
                        h_value=h, grad=grad, dh_dt=dh_dt)


def theorem1_gate(lam: float, alpha: float, epsilon: float, mu_bar: float,
                  beta: float) -> bool:
    """Rate condition under which B = h - V/mu_bar is a valid barrier for
    the tracking closed loop: lambda >= alpha + epsilon mu_bar / (4 beta)."""
    if min(lam, alpha, epsilon, mu_bar, beta) <= 0.0:
        raise ValueError("all gate parameters must be positive")
    return lam >= alpha + epsilon * mu_bar / (4.0 * beta)


def composite_barrier(h_value: float, v_value: float, mu_bar: float) -> float:
    """B = h - V / mu_bar. Nonnegative B certifies the tracking system is
    inside the region the reduced-order filter keeps safe."""
    if mu_bar <= 0.0:
        raise ValueError("mu_bar must be positive")
    return h_value - v_value / mu_bar
