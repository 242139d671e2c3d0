"""Dense SQP solver for equality-constrained least-squares with box bounds.

Solves

    minimize    0.5 * || r(z) ||^2
    subject to  c(z) = 0
                lb <= z <= ub
                C z <= d          (optional fixed linear rows)

with a Gauss-Newton Hessian (J^T J plus a small Levenberg shift), a
null-space solve of the equality-constrained QP subproblem, box constraints
handled by an active-set loop that pins variables at their bounds, and a
backtracking line search on an l1 merit function.

The shape of the tracking transcription drives the design: the objective is
a genuine least-squares form, the equality block (collocation plus initial
pin) is full row rank as long as enough controls stay free, and between
receding-horizon steps the active set barely changes, so warm starts resolve
in one or two iterations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla

CONVERGED = "converged"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"

_ARMIJO = 1e-4
_BACKTRACK_MAX = 30
_RANK_TOL = 1e-11


@dataclass
class NlpFunctions:
    """Callable bundle describing one NLP instance.

    ``residuals``/``jac_residuals`` define the least-squares objective,
    ``constraints``/``jac_constraints`` the equality block.  ``c_rows`` and
    ``d_rows``, when present, are fixed linear inequality rows C z <= d.
    """

    residuals: Callable[[np.ndarray], np.ndarray]
    jac_residuals: Callable[[np.ndarray], np.ndarray]
    constraints: Callable[[np.ndarray], np.ndarray]
    jac_constraints: Callable[[np.ndarray], np.ndarray]
    lb: np.ndarray
    ub: np.ndarray
    c_rows: np.ndarray | None = None
    d_rows: np.ndarray | None = None

    def objective(self, z: np.ndarray) -> float:
        r = self.residuals(z)
        return 0.5 * float(r @ r)


@dataclass
class SqpResult:
    z: np.ndarray
    objective: float
    status: str
    iterations: int
    constraint_violation: float
    eq_multipliers: np.ndarray
    working_set: "QpWorkingSet | None" = None


@dataclass
class QpWorkingSet:
    """Pinned bounds (-1 lower, +1 upper, 0 free) and active inequality rows."""

    pins: np.ndarray
    rows: np.ndarray

    def copy(self) -> "QpWorkingSet":
        return QpWorkingSet(self.pins.copy(), self.rows.copy())


def _empty_rows(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros((0, n)), np.zeros(0)


def solve_box_eq_qp(
    h: np.ndarray,
    g: np.ndarray,
    a_eq: np.ndarray,
    b_eq: np.ndarray,
    lb: np.ndarray,
    ub: np.ndarray,
    c_in: np.ndarray | None = None,
    d_in: np.ndarray | None = None,
    warm: QpWorkingSet | None = None,
    tol: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, QpWorkingSet, str]:
    """Strictly convex QP with equality rows, box bounds and linear rows.

        min 0.5 x^T H x + g^T x   s.t.  A x = b,  lb <= x <= ub,  C x <= d

    Active-set scheme: the working set (pinned bounds plus active C rows) is
    treated as equalities and the resulting subproblem is solved exactly by a
    null-space method; the most violated inactive constraint is added, and
    wrong-signed multipliers are released, until the KKT conditions hold.

    Returns (x, eq_multipliers, row_multipliers, working_set, status).
    """
    n = g.size
    if c_in is None or c_in.shape[0] == 0:
        c_in, d_in = _empty_rows(n)
    m_eq = a_eq.shape[0]
    k_in = c_in.shape[0]

    ws = warm.copy() if warm is not None else QpWorkingSet(
        np.zeros(n, dtype=int), np.zeros(k_in, dtype=bool)
    )
    if ws.pins.shape != (n,) or ws.rows.shape != (k_in,):
        ws = QpWorkingSet(np.zeros(n, dtype=int), np.zeros(k_in, dtype=bool))
    # Pins on infinite bounds make no sense; drop them defensively.
    ws.pins[(ws.pins < 0) & ~np.isfinite(lb)] = 0
    ws.pins[(ws.pins > 0) & ~np.isfinite(ub)] = 0

    scale = max(1.0, float(np.max(np.abs(g))), float(np.max(np.abs(h))))
    blocked: set[tuple[str, int, int]] = set()
    drop_counts: dict[tuple[str, int], int] = {}
    max_sweeps = n + k_in + 60
    x = np.zeros(n)
    nu_all = np.zeros(m_eq)
    mu_rows = np.zeros(k_in)

    for _ in range(max_sweeps):
        fixed = ws.pins != 0
        x_fix = np.where(ws.pins < 0, lb, np.where(ws.pins > 0, ub, 0.0))
        free = ~fixed
        n_free = int(free.sum())

        # An active row whose support is entirely pinned is a constant: as a
        # working-set equality it would add a zero row over the free
        # variables, so retire it (the violation scan skips such rows too).
        if k_in:
            vacuous = ws.rows & (np.abs(c_in[:, free]).sum(axis=1) == 0.0)
            ws.rows[vacuous] = False

        a_act = np.vstack([a_eq, c_in[ws.rows]])
        rhs = np.concatenate([b_eq, d_in[ws.rows]])
        m_act = a_act.shape[0]

        a_f = a_act[:, free]
        rhs_eff = rhs - a_act[:, fixed] @ x_fix[fixed]
        g_f = g[free] + h[np.ix_(free, fixed)] @ x_fix[fixed]
        h_ff = h[np.ix_(free, free)]

        drop_last = False
        if m_act > n_free:
            drop_last = True
        if not drop_last and m_act > 0:
            q_full, r_full = sla.qr(a_f.T, mode="full")
            diag = np.abs(np.diag(r_full[:m_act, :m_act])) if m_act else np.array([])
            if m_act and (diag.size < m_act or np.min(diag) < _RANK_TOL * max(1.0, diag.max() if diag.size else 1.0)):
                drop_last = True
        if drop_last:
            # The working set over-constrains the equality block: release the
            # most recently added element and remember not to re-add it
            # until the set changes again.
            released = _release_one(ws, blocked)
            if not released:
                return x, nu_all, mu_rows, ws, "qp-singular"
            continue

        if m_act == 0:
            x_f = _chol_solve(h_ff, -g_f, scale)
            q2 = None
        else:
            q1 = q_full[:, :m_act]
            q2 = q_full[:, m_act:]
            r1 = r_full[:m_act, :m_act]
            y = sla.solve_triangular(r1.T, rhs_eff, lower=True)
            x_part = q1 @ y
            if q2.shape[1] == 0:
                x_f = x_part
            else:
                h_red = q2.T @ h_ff @ q2
                g_red = q2.T @ (g_f + h_ff @ x_part)
                w = _chol_solve(h_red, -g_red, scale)
                x_f = x_part + q2 @ w

        x = x_fix.copy()
        x[free] = x_f

        # Violated inactive bounds and rows, most violated first.  Bounds are
        # activated in small batches (cheap, rank-guarded by the release
        # path); general rows one at a time.
        tol_v = tol * scale
        free_idx = np.flatnonzero(free)
        pin_cands: list[tuple[float, int, int]] = []
        for i, xi in zip(free_idx, x_f):
            if np.isfinite(lb[i]) and lb[i] - xi > tol_v and ("pin", i, -1) not in blocked:
                pin_cands.append((lb[i] - xi, i, -1))
            if np.isfinite(ub[i]) and xi - ub[i] > tol_v and ("pin", i, 1) not in blocked:
                pin_cands.append((xi - ub[i], i, 1))
        row_cand: tuple[float, int] | None = None
        if k_in:
            resid = c_in @ x - d_in
            row_live = np.abs(c_in[:, free]).sum(axis=1) > 0.0
            for j in np.flatnonzero(~ws.rows & row_live):
                if resid[j] > tol_v and ("row", j, 0) not in blocked:
                    if row_cand is None or resid[j] > row_cand[0]:
                        row_cand = (resid[j], j)
        if pin_cands or row_cand is not None:
            worst_pin = max(pin_cands)[0] if pin_cands else -np.inf
            if row_cand is not None and row_cand[0] > worst_pin:
                ws.rows[row_cand[1]] = True
            else:
                pin_cands.sort(reverse=True)
                for _, i, side in pin_cands[:8]:
                    ws.pins[i] = side
            continue

        # Multipliers of the working set.
        grad = h @ x + g
        if m_act:
            nu_act = sla.solve_triangular(r1, q1.T @ (-grad[free]), lower=False)
        else:
            nu_act = np.zeros(0)
        nu_all = nu_act[:m_eq]
        lag = grad + a_act.T @ nu_act
        row_mults = nu_act[m_eq:]
        mu_rows = np.zeros(k_in)
        for pos, j in enumerate(np.flatnonzero(ws.rows)):
            mu_rows[j] = row_mults[pos]

        worst_drop, worst_opt = None, -tol * scale
        for i in np.flatnonzero(fixed):
            if drop_counts.get(("pin", int(i)), 0) >= 2:
                continue
            mult = lag[i] * (1 if ws.pins[i] < 0 else -1)
            if mult < worst_opt:
                worst_drop, worst_opt = ("pin", int(i)), mult
        for pos, j in enumerate(np.flatnonzero(ws.rows)):
            if drop_counts.get(("row", int(j)), 0) >= 2:
                continue
            if row_mults[pos] < worst_opt:
                worst_drop, worst_opt = ("row", int(j)), row_mults[pos]
        if worst_drop is None:
            return x, nu_all, mu_rows, ws, "optimal"
        kind, idx = worst_drop
        # An element repeatedly re-activated after a drop is thrashing; the
        # drop budget above then freezes it for the rest of this call.
        drop_counts[(kind, idx)] = drop_counts.get((kind, idx), 0) + 1
        if kind == "pin":
            ws.pins[idx] = 0
        else:
            ws.rows[idx] = False
        blocked.clear()

    return x, nu_all, mu_rows, ws, "qp-max-iter"


def _activate(ws: QpWorkingSet, kind: str, idx: int, side: int) -> None:
    if kind == "pin":
        ws.pins[idx] = side
    else:
        ws.rows[idx] = True


def _release_one(ws: QpWorkingSet, blocked: set) -> bool:
    """Release an arbitrary active element to restore working-set rank."""
    rows_on = np.flatnonzero(ws.rows)
    if rows_on.size:
        j = int(rows_on[-1])
        ws.rows[j] = False
        blocked.add(("row", j, 0))
        return True
    pins_on = np.flatnonzero(ws.pins != 0)
    if pins_on.size:
        i = int(pins_on[-1])
        blocked.add(("pin", i, int(ws.pins[i])))
        ws.pins[i] = 0
        return True
    return False


def _chol_solve(h: np.ndarray, rhs: np.ndarray, scale: float) -> np.ndarray:
    """Cholesky solve with escalating diagonal regularization."""
    if h.size == 0:
        return np.zeros(0)
    shift = 0.0
    base = 1e-12 * max(1.0, float(np.max(np.abs(np.diag(h)))))
    for _ in range(6):
        try:
            cf = sla.cho_factor(h + shift * np.eye(h.shape[0]), lower=True)
            return sla.cho_solve(cf, rhs)
        except np.linalg.LinAlgError:
            shift = base if shift == 0.0 else shift * 100.0
    return np.linalg.lstsq(h, rhs, rcond=None)[0]


def projected_gradient(
    z: np.ndarray, grad_lag: np.ndarray, lb: np.ndarray, ub: np.ndarray, tol: float
) -> np.ndarray:
    """First-order optimality measure under box bounds.

    At a lower bound only a non-negative Lagrangian gradient is optimal, at
    an upper bound only a non-positive one; elsewhere it must vanish.
    """
    pg = grad_lag.copy()
    at_lb = np.isfinite(lb) & (z <= lb + tol)
    at_ub = np.isfinite(ub) & (z >= ub - tol)
    pg[at_lb] = np.minimum(pg[at_lb], 0.0)
    pg[at_ub] = np.maximum(pg[at_ub], 0.0)
    return pg


def solve_sqp(
    nlp: NlpFunctions,
    z0: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 200,
    warm: QpWorkingSet | None = None,
) -> SqpResult:
    """Gauss-Newton SQP with l1 merit line search.

    The initial point is clipped into the box; every trial point stays in the
    box (and on the feasible side of any linear rows already satisfied)
    because QP steps respect them and the feasible set is convex.
    """
    z = np.clip(np.asarray(z0, dtype=float), nlp.lb, nlp.ub)
    n = z.size
    c_rows = nlp.c_rows if nlp.c_rows is not None else np.zeros((0, n))
    d_rows = nlp.d_rows if nlp.d_rows is not None else np.zeros(0)

    rho = 1.0
    ws = warm
    nu = np.zeros(0)
    status = MAX_ITER
    iterations = 0
    theta = np.inf
    recent_merit: list[float] = []
    lam_boost = 1.0

    for it in range(1, max_iter + 1):
        iterations = it
        r = nlp.residuals(z)
        jac = nlp.jac_residuals(z)
        c = nlp.constraints(z)
        a = nlp.jac_constraints(z)
        g = jac.T @ r
        theta = float(np.max(np.abs(c))) if c.size else 0.0
        lam_base = 1e-8 * max(1.0, float(np.trace(jac.T @ jac)) / n)

        # Levenberg-style outer loop: flat objective directions can make the
        # raw Gauss-Newton step wild; on a failed line search the diagonal
        # shift grows and the step is recomputed until it becomes acceptable.
        accepted = False
        converged_here = False
        z_try = z
        merit_try = np.inf
        for _ in range(4):
            lam = lam_base * lam_boost
            h = jac.T @ jac + lam * np.eye(n)
            dz, nu, mu_rows, ws, qp_status = solve_box_eq_qp(
                h,
                g,
                a,
                -c,
                nlp.lb - z,
                nlp.ub - z,
                c_rows if c_rows.shape[0] else None,
                (d_rows - c_rows @ z) if c_rows.shape[0] else None,
                warm=ws,
            )

            grad_lag = g + (a.T @ nu if nu.size else 0.0)
            if mu_rows.size:
                grad_lag = grad_lag + c_rows.T @ mu_rows
            pg = projected_gradient(
                z, grad_lag, nlp.lb, nlp.ub, 1e-9 * max(1.0, float(np.max(np.abs(z))))
            )
            if theta <= tol and float(np.max(np.abs(pg))) <= tol:
                converged_here = True
                break
            if float(np.max(np.abs(dz))) <= 1e-14:
                converged_here = True
                break

            rho = max(rho, 2.0 * (float(np.max(np.abs(nu))) if nu.size else 0.0) + 1.0)
            merit0 = 0.5 * float(r @ r) + rho * float(np.sum(np.abs(c)))
            descent = float(g @ dz) - rho * float(np.sum(np.abs(c)))

            alpha = 1.0
            for _ in range(_BACKTRACK_MAX):
                z_cand = np.clip(z + alpha * dz, nlp.lb, nlp.ub)
                r_try = nlp.residuals(z_cand)
                c_try = nlp.constraints(z_cand)
                merit_try = 0.5 * float(r_try @ r_try) + rho * float(np.sum(np.abs(c_try)))
                if merit_try <= merit0 + _ARMIJO * alpha * min(descent, 0.0):
                    accepted = True
                    z_try = z_cand
                    break
                alpha *= 0.5
            if accepted:
                if alpha >= 0.5:
                    lam_boost = max(1.0, lam_boost / 10.0)
                break
            lam_boost *= 100.0

        if converged_here:
            status = CONVERGED if theta <= tol else INFEASIBLE
            break
        if not accepted:
            status = MAX_ITER if qp_status == "optimal" else INFEASIBLE
            break
        z = z_try

        # Stall cut: five iterations without meaningful merit progress.
        recent_merit.append(merit_try)
        if len(recent_merit) > 5:
            recent_merit.pop(0)
            if recent_merit[0] - merit_try <= 1e-10 * (1.0 + abs(merit_try)):
                status = MAX_ITER
                break

    r = nlp.residuals(z)
    c = nlp.constraints(z)
    theta = float(np.max(np.abs(c))) if c.size else 0.0
    if status == CONVERGED and theta > 10 * tol:
        status = INFEASIBLE
    return SqpResult(
        z=z,
        objective=0.5 * float(r @ r),
        status=status,
        iterations=iterations,
        constraint_violation=theta,
        eq_multipliers=nu,
        working_set=ws,
    )
