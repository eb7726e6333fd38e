"""Dense active-set solver for strictly convex QPs

    min  0.5 x' H x + g' x   s.t.  C x >= d.

The problem is reduced to least-distance form by the change of variables
w = L'x + inv(L) g with H = L L' (the objective becomes 0.5 ||w||^2 up to
a constant), and the least-distance problem is solved through a single
nonnegative least squares run in the Lawson-Hanson manner: stack
A = [E'; f'] for the transformed constraints E w >= f, solve
min ||A z - e_{n+1}|| over z >= 0, and read the primal point out of the
residual. The NNLS active set grows one column at a time, stays full
rank by construction, and terminates finitely, which makes the solver
deterministic: identical inputs give identical iterates (ties broken by
lowest column index).

The residual read-out loses digits when the unconstrained optimum sits
far from the feasible set, so the answer is always finished in x space:
an equality re-solve on the identified set, walked until the full KKT
certificate holds. A run whose certificate still fails is retried with
exact least squares inner solves before giving up.

Constraint rows are normalized before the reduction; that rescales the
dual variables only, so the reported active set is unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg


class QpError(RuntimeError):
    pass


@dataclass
class QpResult:
    x: np.ndarray
    active: list
    iterations: int
    converged: bool


def _nnls(A: np.ndarray, b: np.ndarray, max_iters: int, tol: float,
          exact: bool = False, support0=None):
    """min ||A z - b|| s.t. z >= 0. Returns (z, iterations, converged).

    With exact=False the passive-set solves run on the normal equations
    (columns are unit-norm, so the Gram matrix is well scaled), falling
    back to lstsq when a solve fails its least squares optimality check.
    exact=True uses lstsq throughout; it is slower but resolves steps
    near the noise floor that the fast path cannot.

    support0 seeds the passive set (columns with negative coefficients are
    shed before the main loop); a good seed saves most of the column adds,
    a bad one only costs the shedding.
    """
    m = A.shape[1]
    z = np.zeros(m)
    passive = np.zeros(m, dtype=bool)
    blocked = np.zeros(m, dtype=bool)
    resid = b.copy()
    eps = np.finfo(float).eps
    if not exact:
        G = A.T @ A
        Atb = A.T @ b

    def _ls(cols):
        Ac = A[:, cols]
        if not exact:
            try:
                s = np.linalg.solve(G[np.ix_(cols, cols)], Atb[cols])
            except np.linalg.LinAlgError:
                pass
            else:
                # The normal equations square the conditioning and the
                # solve does not complain when that bites, so check
                # least squares optimality against the columns.
                opt = Ac.T @ (b - Ac @ s)
                if float(np.abs(opt).max(initial=0.0)) \
                        <= 1e-10 + 1e-12 * float(np.abs(s).sum()):
                    return s
        return np.linalg.lstsq(Ac, b, rcond=None)[0]

    it = 0
    if support0 is not None:
        sup = np.asarray([i for i in support0 if 0 <= i < m], dtype=np.intp)
        passive[sup] = True
        while passive.any():
            it += 1
            cols = np.flatnonzero(passive)
            s = _ls(cols)
            neg = s <= 0.0
            if not neg.any():
                z[cols] = s
                resid = b - A[:, cols] @ z[cols]
                break
            passive[cols[neg]] = False
        else:
            resid = b.copy()

    while it < max_iters:
        w = A.T @ resid
        w[passive | blocked] = -np.inf
        j = int(np.argmax(w))
        # In the least-distance form the gradient of column j is the last
        # residual coordinate times row j's normalized violation, so the
        # optimality test has to shrink with that coordinate or columns
        # whose rows are still badly violated look converged. The second
        # term floors the test at the noise of the residual update.
        thr = max(tol * max(float(resid[-1]), 0.0),
                  50.0 * eps * (1.0 + float(z.sum())))
        if w[j] <= thr:
            return z, it, not bool(blocked.any())
        it += 1
        passive[j] = True
        z_prev = z.copy()
        while True:
            cols = np.flatnonzero(passive)
            s = _ls(cols)
            if s.min(initial=np.inf) > 0.0:
                z[:] = 0.0
                z[cols] = s
                break
            # Back off along the segment to the first coefficient that
            # hits zero, then retire those columns.
            zp = z[cols]
            neg = s <= 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(neg, zp / (zp - s), np.inf)
            alpha = float(ratios.min())
            z[cols] = zp + alpha * (s - zp)
            drop = cols[(neg & (ratios <= alpha + 1e-14)) | (z[cols] <= 0.0)]
            z[drop] = 0.0
            passive[drop] = False
            if not passive.any():
                break
        if not passive[j] and np.array_equal(z, z_prev):
            # Adding j moved nothing and dropped j straight back out: at
            # this noise level the column cannot make progress, so stop
            # retrying it. Any later real step clears the blocks.
            blocked[j] = True
            continue
        blocked[:] = False
        cols = np.flatnonzero(passive)
        resid = b - A[:, cols] @ z[cols]
    return z, it, False


def solve_qp(H: np.ndarray, g: np.ndarray, C: np.ndarray, d: np.ndarray,
             x0: Optional[np.ndarray] = None, max_iters: int = 500,
             tol: float = 1e-10,
             working0: Optional[Sequence[int]] = None) -> QpResult:
    """x0 is accepted for interface stability; the reduction does not need
    a feasible start. working0 (constraint row indices expected active,
    e.g. QpResult.active from a related solve) seeds the first pass."""
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = len(g)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise QpError(f"H is not positive definite: {exc}") from exc
    hinv_g = scipy.linalg.cho_solve((L, True), g, check_finite=False)

    if C is None or len(C) == 0:
        return QpResult(x=-hinv_g, active=[], iterations=0, converged=True)
    C = np.asarray(C, dtype=float)
    d = np.asarray(d, dtype=float)

    # E = C inv(L'), f = d + C inv(H) g, rows normalized.
    E = scipy.linalg.solve_triangular(L, C.T, lower=True,
                                      check_finite=False).T
    f = d + C @ hinv_g
    scale = np.sqrt(np.einsum("ij,ij->i", E, E) + f * f)
    scale[scale == 0.0] = 1.0
    E /= scale[:, None]
    f = f / scale

    A = np.empty((n + 1, len(f)))
    A[:n] = E.T
    A[n] = f
    b = np.zeros(n + 1)
    b[n] = 1.0

    z, iterations, _ = _nnls(A, b, max_iters, tol, support0=working0)
    cand = _recover(L, hinv_g, H, g, C, d, scale, A, b, z)
    if cand is not None and cand[2]:
        return QpResult(x=cand[0], active=cand[1], iterations=iterations,
                        converged=True)

    # The fast pass missed its certificate, which happens when progress
    # stalls within noise of a degenerate face. Retry cold with exact
    # inner solves and keep the better of the two answers.
    z2, it2, _ = _nnls(A, b, max_iters, tol, exact=True)
    iterations += it2
    cand2 = _recover(L, hinv_g, H, g, C, d, scale, A, b, z2)
    if cand is None and cand2 is None:
        raise QpError("constraints are infeasible")
    pick = _better(H, g, C, d, scale, cand, cand2)
    return QpResult(x=pick[0], active=pick[1], iterations=iterations,
                    converged=pick[2])


_FEAS_TOL = 1e-7   # on row-normalized slacks
_DUAL_TOL = 1e-8


def _objective(H, g, x) -> float:
    return float(0.5 * x @ H @ x + g @ x)


def _recover(L, hinv_g, H, g, C, d, scale, A, b, z):
    """Map an NNLS iterate back to the primal and polish it. Returns
    (x, active, certified), or None when the iterate says infeasible."""
    n = len(hinv_g)
    r = A @ z - b
    rn = float(r[n])
    if rn >= -1e-12:
        return None
    w = -r[:n] / rn
    x = scipy.linalg.solve_triangular(L, w, trans="T", lower=True,
                                      check_finite=False) - hinv_g
    support = [int(i) for i in np.flatnonzero(z > 0.0)]
    return _polish(H, g, C, d, scale, support, x)


def _better(H, g, C, d, scale, cand, cand2):
    if cand is None:
        return cand2
    if cand2 is None:
        return cand
    if cand2[2] != cand[2]:
        return cand2 if cand2[2] else cand
    fe1 = float(((C @ cand[0] - d) / scale).min())
    fe2 = float(((C @ cand2[0] - d) / scale).min())
    if min(fe1, fe2) < -_FEAS_TOL:
        return cand if fe1 >= fe2 else cand2
    if _objective(H, g, cand2[0]) < _objective(H, g, cand[0]):
        return cand2
    return cand


def _kkt_resolve(H, g, Ca, da):
    """Equality-constrained solve on the rows (Ca, da). Returns (x, lam)
    with lam the inequality multipliers (optimal needs lam >= 0)."""
    na, nx = Ca.shape
    if na == 0:
        return np.linalg.solve(H, -g), np.zeros(0)
    kkt = np.zeros((nx + na, nx + na))
    kkt[:nx, :nx] = H
    kkt[:nx, nx:] = Ca.T
    kkt[nx:, :nx] = Ca
    rhs = np.concatenate([-g, da])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:nx], -sol[nx:]


def _polish(H, g, C, d, scale, support, x_raw, max_steps: int = 50):
    """Finish the solve in x space from the NNLS support. Each step pins
    the current set as equalities; a violated row joins the set, a row
    with a negative multiplier leaves it, and the first point that passes
    the full KKT certificate is returned as (x, active, True). If the walk
    cycles or runs out of steps, the best feasible point seen wins."""
    S = sorted(support)
    seen = set()
    best_x = None
    best_obj = np.inf
    feas_raw = float(((C @ x_raw - d) / scale).min())
    if feas_raw >= -_FEAS_TOL:
        best_x = x_raw
        best_obj = _objective(H, g, x_raw)

    for _ in range(max_steps):
        key = tuple(S)
        if key in seen:
            break
        seen.add(key)
        xs, lam = _kkt_resolve(H, g, C[S], d[S])
        slack = (C @ xs - d) / scale
        feas = float(slack.min())
        if feas >= -_FEAS_TOL:
            obj = _objective(H, g, xs)
            if obj < best_obj:
                best_x, best_obj = xs, obj
        if feas < -_FEAS_TOL:
            jworst = int(np.argmin(slack))
            if jworst in S:
                break   # rank-deficient set cannot reach its own row
            S = sorted(S + [jworst])
            continue
        if S and float(lam.min(initial=0.0)) < -_DUAL_TOL:
            del S[int(np.argmin(lam))]
            continue
        drift = np.abs(slack[S]) if S else np.zeros(0)
        if drift.size and float(drift.max()) > _FEAS_TOL:
            # lstsq compromise on a rank-deficient set: retire the row
            # that drifted furthest off its equality
            del S[int(np.argmax(drift))]
            continue
        return xs, list(S), True

    if best_x is None:
        return x_raw, sorted(support), False
    return best_x, sorted(support), False
