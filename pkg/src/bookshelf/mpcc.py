"""Augmented-Lagrangian solver for the complementarity relaxation.

Mode binaries are relaxed to [0, 1] and tied to the vertices of the cube
through x_j (1 - x_j) <= eps, while product definitions x_r = x_p x_q stay
exact equality constraints.  The outer loop is a classic augmented
Lagrangian: multipliers advance when feasibility improves enough, the
penalty grows tenfold when it stalls.  Inner minimization is
bound-constrained L-BFGS-B on the smooth augmented Lagrangian.

Linear rows use the shifted-projection form, so two-sided rows, one-sided
rows and equality rows all go through the same expression
(rho/2) dist(A x + y/rho, [lo, hi])^2 with a signed row multiplier y.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np
import scipy.optimize as sopt
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import (MODE_ANGLES, MODE_UPRIGHT, Pose, ProblemFormulation,
                    SceneBook, assemble_vector, vertex_positions)

logger = logging.getLogger(__name__)

_MULT_CAP = 1e10  # multiplier safeguard


@dataclass
class MpccOptions:
    tau_feas: float = 1e-6
    pg_tol: float = 1e-5
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_cap: float = 1e8
    inner_iters: int = 500
    outer_iters: int = 30
    time_limit: float | None = None


@dataclass
class MpccProblem:
    """Relaxed problem data: diagonal objective, rows, products, binaries."""

    weight: np.ndarray        # diagonal of the objective quadratic
    target: np.ndarray        # objective pulls x toward this point
    A: sp.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    bil_r: np.ndarray         # x[bil_r] = x[bil_p] * x[bil_q]
    bil_p: np.ndarray
    bil_q: np.ndarray
    binary_indices: np.ndarray
    eps: float = 1e-8

    def __post_init__(self):
        if self.eps <= 0.0:
            raise ValueError("complementarity relaxation eps must be positive")
        j = self.binary_indices
        if j.size and (np.any(self.lb[j] < 0.0) or np.any(self.ub[j] > 1.0)):
            raise ValueError("relaxed binaries must stay within [0, 1]")

    @classmethod
    def from_formulation(cls, f: ProblemFormulation,
                         families: frozenset[str] | set[str] | None = None,
                         weight: np.ndarray | None = None,
                         target: np.ndarray | None = None,
                         complementarity: bool = True,
                         eps: float = 1e-8) -> "MpccProblem":
        """Build from a lifted formulation, optionally keeping only some
        row families (binaries keep complementarity unless dropped)."""
        if families is None:
            keep = np.ones(f.rows.shape[0], dtype=bool)
        else:
            keep = np.array([fam in families for fam in f.row_family])
        jj = f.binary_indices if complementarity else np.zeros(0, dtype=int)
        return cls(
            weight=np.asarray(f.q_diag if weight is None else weight, float),
            target=np.asarray(f.x_goal if target is None else target, float),
            A=f.rows[keep].tocsr(),
            row_lo=f.row_lo[keep], row_hi=f.row_hi[keep],
            lb=f.lb.copy(), ub=f.ub.copy(),
            bil_r=np.array([t.r for t in f.bilinear], dtype=int),
            bil_p=np.array([t.p for t in f.bilinear], dtype=int),
            bil_q=np.array([t.q for t in f.bilinear], dtype=int),
            binary_indices=np.asarray(jj, dtype=int), eps=eps)

    def with_objective(self, weight: np.ndarray,
                       target: np.ndarray) -> "MpccProblem":
        """Same constraints, different pull (shares the row matrix)."""
        return replace(self, weight=np.asarray(weight, float),
                       target=np.asarray(target, float))

    @property
    def dim(self) -> int:
        return self.lb.shape[0]

    def objective(self, x: np.ndarray) -> float:
        d = x - self.target
        return float(self.weight @ (d * d))

    def max_violation(self, x: np.ndarray) -> float:
        """Worst constraint violation: rows, products, complementarity, box."""
        worst = 0.0
        if self.A.shape[0]:
            ax = self.A @ x
            worst = float(np.maximum(
                np.maximum(ax - self.row_hi, self.row_lo - ax), 0.0).max())
        if self.bil_r.size:
            h = x[self.bil_r] - x[self.bil_p] * x[self.bil_q]
            worst = max(worst, float(np.abs(h).max()))
        j = self.binary_indices
        if j.size:
            comp = x[j] * (1.0 - x[j]) - self.eps
            worst = max(worst, float(np.maximum(comp, 0.0).max()))
        box = np.maximum(np.maximum(x - self.ub, self.lb - x), 0.0)
        return max(worst, float(box.max()))


@dataclass
class NlpResult:
    x: np.ndarray
    status: str               # feasible_optimal | infeasible_stall | max_iter
    max_violation: float
    objective: float
    inner_iterations: int
    outer_iterations: int


def _al_value_grad(p: MpccProblem, x: np.ndarray, y: np.ndarray,
                   lam: np.ndarray, mu: np.ndarray,
                   rho: float) -> tuple[float, np.ndarray]:
    """Augmented Lagrangian and its gradient at x."""
    d = x - p.target
    val = float(p.weight @ (d * d))
    grad = 2.0 * p.weight * d
    if p.A.shape[0]:
        v = p.A @ x + y / rho
        dv = v - np.clip(v, p.row_lo, p.row_hi)
        val += 0.5 * rho * float(dv @ dv)
        grad += rho * (p.A.T @ dv)
    if p.bil_r.size:
        h = x[p.bil_r] - x[p.bil_p] * x[p.bil_q]
        c = lam + rho * h
        val += float(lam @ h) + 0.5 * rho * float(h @ h)
        np.add.at(grad, p.bil_r, c)
        np.add.at(grad, p.bil_p, -c * x[p.bil_q])
        np.add.at(grad, p.bil_q, -c * x[p.bil_p])
    j = p.binary_indices
    if j.size:
        comp = x[j] * (1.0 - x[j]) - p.eps
        t = np.maximum(0.0, mu + rho * comp)
        val += float((t * t - mu * mu).sum()) / (2.0 * rho)
        grad[j] += t * (1.0 - 2.0 * x[j])
    return val, grad


def _projected_gradient(p: MpccProblem, x: np.ndarray,
                        grad: np.ndarray) -> float:
    return float(np.abs(x - np.clip(x - grad, p.lb, p.ub)).max())


def _kkt_projected_gradient(p: MpccProblem, x: np.ndarray,
                            atol: float) -> float:
    """Stationarity at x with least-squares multipliers over the active set.

    The augmented gradient certifies optimality only once the iterated
    multipliers have settled; near-feasible points mid-oscillation need a
    fresh estimate.  Fits multipliers to the active constraint gradients
    and returns the projected norm of what is left.
    """
    g0 = 2.0 * p.weight * (x - p.target)
    blocks = []
    if p.A.shape[0]:
        ax = p.A @ x
        act = (ax >= p.row_hi - atol) | (ax <= p.row_lo + atol)
        if act.any():
            blocks.append(p.A[act])
    if p.bil_r.size:
        s = np.arange(p.bil_r.size)
        rows = np.concatenate([s, s, s])
        cols = np.concatenate([p.bil_r, p.bil_p, p.bil_q])
        vals = np.concatenate(
            [np.ones(s.size), -x[p.bil_q], -x[p.bil_p]])
        blocks.append(sp.csr_matrix(
            (vals, (rows, cols)), shape=(s.size, p.dim)))
    j = p.binary_indices
    if j.size:
        comp_act = j[x[j] * (1.0 - x[j]) >= p.eps - atol]
        if comp_act.size:
            s = np.arange(comp_act.size)
            blocks.append(sp.csr_matrix(
                ((1.0 - 2.0 * x[comp_act]), (s, comp_act)),
                shape=(comp_act.size, p.dim)))
    pinned = (p.ub - p.lb) <= 2.0 * atol
    free = (x > p.lb + atol) & (x < p.ub - atol) & ~pinned
    if blocks:
        c_mat = sp.vstack(blocks, format="csc")
        cf = c_mat[:, free]
        nu = spla.lsqr(cf.T, -g0[free], atol=1e-12, btol=1e-12)[0]
        r = g0 + c_mat.T @ nu
    else:
        r = g0
    worst = float(np.abs(r[free]).max()) if free.any() else 0.0
    at_lo = ~free & ~pinned & (x <= p.lb + atol)
    at_hi = ~free & ~pinned & (x >= p.ub - atol)
    if at_lo.any():
        worst = max(worst, float(np.maximum(-r[at_lo], 0.0).max()))
    if at_hi.any():
        worst = max(worst, float(np.maximum(r[at_hi], 0.0).max()))
    return worst


def _restore_feasibility(p: MpccProblem, x0: np.ndarray,
                         iters: int = 2) -> np.ndarray:
    """Newton steps onto the constraint manifold (min-norm via lsqr).

    Used when the iterate is stationary on its active manifold but sits a
    few tau above feasibility: equalities, product definitions and any
    violated inequalities are linearized and the smallest correcting step
    is taken, so stationarity is preserved to first order.
    """
    x = x0.copy()
    eq = np.isfinite(p.row_lo) & np.isfinite(p.row_hi) \
        & (np.abs(p.row_hi - p.row_lo) < 1e-12)
    for _ in range(iters):
        blocks, res = [], []
        if p.A.shape[0]:
            ax = p.A @ x
            over = ax - p.row_hi
            under = p.row_lo - ax
            fix = eq | (over > 0.0) | (under > 0.0)
            if fix.any():
                blocks.append(p.A[fix])
                res.append(np.where(
                    eq[fix], (ax - p.row_lo)[fix],
                    np.where(over[fix] > 0.0, over[fix], -under[fix])))
        if p.bil_r.size:
            s = np.arange(p.bil_r.size)
            rows = np.concatenate([s, s, s])
            cols = np.concatenate([p.bil_r, p.bil_p, p.bil_q])
            vals = np.concatenate(
                [np.ones(s.size), -x[p.bil_q], -x[p.bil_p]])
            blocks.append(sp.csr_matrix(
                (vals, (rows, cols)), shape=(s.size, p.dim)))
            res.append(x[p.bil_r] - x[p.bil_p] * x[p.bil_q])
        j = p.binary_indices
        if j.size:
            comp = x[j] * (1.0 - x[j]) - p.eps
            bad = j[comp > 0.0]
            if bad.size:
                s = np.arange(bad.size)
                blocks.append(sp.csr_matrix(
                    ((1.0 - 2.0 * x[bad]), (s, bad)),
                    shape=(bad.size, p.dim)))
                res.append(x[bad] * (1.0 - x[bad]) - p.eps)
        if not blocks:
            break
        c_mat = sp.vstack(blocks, format="csr")
        rhs = np.concatenate(res)
        if float(np.abs(rhs).max()) < 1e-14:
            break
        dx = spla.lsqr(c_mat, -rhs, atol=1e-12, btol=1e-12)[0]
        x = np.clip(x + dx, p.lb, p.ub)
    return x


def _round_binaries(p: MpccProblem, x: np.ndarray) -> np.ndarray:
    xr = x.copy()
    j = p.binary_indices
    if j.size:
        xr[j] = np.where(x[j] >= 0.5, 1.0, 0.0)
    return xr


def solve_mpcc(p: MpccProblem, x0: np.ndarray,
               opts: MpccOptions | None = None) -> NlpResult:
    """Augmented-Lagrangian loop around bound-constrained L-BFGS-B.

    Success requires max_violation <= tau_feas and a projected augmented
    Lagrangian gradient <= pg_tol, then binaries are rounded to {0, 1} and
    the point is re-verified (with one pinned re-solve if rounding broke
    feasibility).  The penalty exceeding its cap without reaching
    feasibility reports infeasible_stall.
    """
    opts = opts or MpccOptions()
    if x0.shape != (p.dim,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({p.dim},)")
    t0 = time.monotonic()
    x = np.clip(np.asarray(x0, float), p.lb, p.ub)
    y = np.zeros(p.A.shape[0])
    lam = np.zeros(p.bil_r.size)
    mu = np.zeros(p.binary_indices.size)
    rho = opts.penalty_init
    bounds = sopt.Bounds(p.lb, p.ub)
    inner_total = 0
    best_x, best_viol, best_obj = x.copy(), p.max_violation(x), p.objective(x)
    viol_prev = np.inf
    status = "max_iter"
    outer = 0

    def minimize(xs: np.ndarray, box: sopt.Bounds) -> np.ndarray:
        res = sopt.minimize(
            lambda v: _al_value_grad(p, v, y, lam, mu, rho), xs,
            jac=True, method="L-BFGS-B", bounds=box,
            options={"maxiter": opts.inner_iters, "ftol": 1e-14,
                     "gtol": min(1e-7, 0.1 * opts.pg_tol)})
        nonlocal inner_total
        inner_total += res.nit
        return res.x

    for outer in range(1, opts.outer_iters + 1):
        x = minimize(x, bounds)
        viol = p.max_violation(x)
        obj = p.objective(x)
        if viol < best_viol or (viol <= opts.tau_feas and obj < best_obj):
            best_x, best_viol, best_obj = x.copy(), viol, obj
        _, grad = _al_value_grad(p, x, y, lam, mu, rho)
        pg = _projected_gradient(p, x, grad)
        if viol <= opts.tau_feas and pg > opts.pg_tol:
            pg = min(pg, _kkt_projected_gradient(p, x, opts.tau_feas))
        if viol <= opts.tau_feas and pg <= opts.pg_tol:
            xr = _round_binaries(p, x)
            if p.max_violation(xr) <= opts.tau_feas:
                return NlpResult(xr, "feasible_optimal", p.max_violation(xr),
                                 p.objective(xr), inner_total, outer)
            # Rounding broke a row: re-solve with the binaries pinned.
            j = p.binary_indices
            lbp, ubp = p.lb.copy(), p.ub.copy()
            lbp[j] = ubp[j] = xr[j]
            xp = minimize(xr, sopt.Bounds(lbp, ubp))
            if p.max_violation(xp) <= opts.tau_feas:
                return NlpResult(xp, "feasible_optimal", p.max_violation(xp),
                                 p.objective(xp), inner_total, outer)
        # Multipliers advance every round (safeguarded); the penalty grows
        # only when feasibility progress is insufficient.  Growing while
        # multipliers are frozen escalates rho so far that the augmented
        # gradient cannot be evaluated to pg_tol in double precision.
        if p.A.shape[0]:
            v = p.A @ x + y / rho
            y = np.clip(rho * (v - np.clip(v, p.row_lo, p.row_hi)),
                        -_MULT_CAP, _MULT_CAP)
        if lam.size:
            lam = np.clip(
                lam + rho * (x[p.bil_r] - x[p.bil_p] * x[p.bil_q]),
                -_MULT_CAP, _MULT_CAP)
        if mu.size:
            jj = p.binary_indices
            mu = np.minimum(np.maximum(
                0.0, mu + rho * (x[jj] * (1.0 - x[jj]) - p.eps)), _MULT_CAP)
        # Slow-but-steady multiplier convergence (coupled rows sharing
        # coordinates contract at ~0.7 per round) must not trip the growth;
        # only a near-flat violation does.
        if viol > max(0.9 * viol_prev, opts.tau_feas):
            rho *= opts.penalty_growth
            if rho > opts.penalty_cap:
                status = "infeasible_stall"
                break
        viol_prev = viol
        if opts.time_limit is not None \
                and time.monotonic() - t0 > opts.time_limit:
            break

    return NlpResult(best_x, status, best_viol, best_obj, inner_total, outer)


def manual_guess(scene) -> np.ndarray:
    """Initial guess read off the scene itself: stored books keep their
    poses and the mode their angle is closest to, the inserted book starts
    upright at the shelf center, and each separating plane is the unit
    normal between the two books' vertex centroids.

    Accepts a formulation or anything carrying one as ``.formulation``.
    """
    f: ProblemFormulation = getattr(scene, "formulation", scene)
    params = f.params
    books = []
    for sb in params.stored:
        mode = min(MODE_ANGLES, key=lambda m: abs(MODE_ANGLES[m] - sb.pose.theta))
        books.append(SceneBook(sb.geom, sb.pose, mode))
    new = params.new_book
    books.append(SceneBook(new, Pose(0.0, new.height / 2.0, 0.0),
                           MODE_UPRIGHT))
    verts = [vertex_positions(b.pose, b.geom) for b in books]
    planes = {}
    for pr in f.pairs:
        c_left = verts[pr.left].mean(axis=0)
        c_right = verts[pr.right].mean(axis=0)
        d = c_right - c_left
        nrm = math.hypot(*d)
        a = d / nrm if nrm > 1e-9 else np.array([1.0, 0.0])
        planes[pr.index] = (a[0], a[1], float(a @ (c_left + c_right) / 2.0))
    return assemble_vector(f, books, planes)
