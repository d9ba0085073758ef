"""Operator-splitting QP solver.

Solves

    minimize   0.5 x' P x + q' x
    subject to lo <= A x <= hi

with a scaled ADMM iteration on the quasi-definite KKT system
[[P + sigma I, A'], [A, -diag(1/rho)]].  Supports warm starts, primal/dual
infeasibility certificates, an active-set polish step, and a reusable
workspace so families of problems sharing the same matrices (branch-and-bound
nodes, warm-started trial sequences) pay for one factorization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

_RHO_MIN = 1e-6
_RHO_MAX = 1e6
_RHO_EQ_SCALE = 1e3  # stiffer penalty on equality rows


@dataclass
class QpOptions:
    rho: float = 0.01
    sigma: float = 1e-6
    alpha: float = 1.6               # relaxation
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_infeas: float = 1e-5
    max_iter: int = 20000
    adaptive_rho: bool = True
    adaptive_interval: int = 200     # iterations between rho updates
    adaptive_tol: float = 5.0        # refactor when rho moves this much
    polish: bool = True
    polish_delta: float = 1e-7
    scaling_iters: int = 10


@dataclass
class Qp:
    """Quadratic program in operator-splitting form."""

    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    lo: np.ndarray
    hi: np.ndarray
    const: float = 0.0  # objective offset, reported but not optimized

    def with_row_bounds(self, lo: np.ndarray, hi: np.ndarray) -> "Qp":
        """Same matrices, different row bounds (shares P/q/A)."""
        return Qp(self.P, self.q, self.A, lo, hi, self.const)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.const)


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str            # optimal | primal_infeasible | dual_infeasible | max_iter
    iterations: int
    objective: float
    pri_res: float
    dua_res: float


class QpWorkspace:
    """Caches Ruiz scaling and the KKT factorization.

    Reuse is keyed on the identity of the P and A matrices, so callers that
    mutate only q / lo / hi (branching, trial fixing) keep the factorization.
    """

    def __init__(self) -> None:
        self.key: tuple[int, int] | None = None
        self.d: np.ndarray | None = None     # variable scaling
        self.e: np.ndarray | None = None     # row scaling
        self.P_sc: sp.csc_matrix | None = None
        self.A_sc: sp.csc_matrix | None = None
        self.rho_vec: np.ndarray | None = None
        self.factor = None

    def matches(self, qp: Qp) -> bool:
        return self.key == (id(qp.P), id(qp.A))


def _ruiz_scale(P: sp.csc_matrix, A: sp.csc_matrix,
                iters: int) -> tuple[np.ndarray, np.ndarray]:
    n = P.shape[0]
    m = A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    P_sc = P.copy()
    A_sc = A.copy()
    for _ in range(iters):
        cp = np.abs(P_sc).max(axis=0).toarray().ravel() if P_sc.nnz else np.zeros(n)
        ca = np.abs(A_sc).max(axis=0).toarray().ravel() if A_sc.nnz else np.zeros(n)
        cn = np.sqrt(np.maximum(cp, ca))
        cn[cn < 1e-10] = 1.0
        rn = (np.sqrt(np.abs(A_sc).max(axis=1).toarray().ravel())
              if A_sc.nnz else np.zeros(m))
        rn[rn < 1e-10] = 1.0
        d /= cn
        e /= rn
        dc = sp.diags(1.0 / cn)
        P_sc = (dc @ P_sc @ dc).tocsc()
        A_sc = (sp.diags(1.0 / rn) @ A_sc @ dc).tocsc()
    return d, e


def _setup_workspace(qp: Qp, opts: QpOptions, ws: QpWorkspace) -> None:
    n = qp.P.shape[0]
    m = qp.A.shape[0]
    d, e = _ruiz_scale(qp.P, qp.A, opts.scaling_iters)
    ws.d, ws.e = d, e
    ws.P_sc = (sp.diags(d) @ qp.P @ sp.diags(d)).tocsc()
    ws.A_sc = (sp.diags(e) @ qp.A @ sp.diags(d)).tocsc() if m else qp.A.copy()
    lo_sc = e * qp.lo if m else qp.lo
    hi_sc = e * qp.hi if m else qp.hi
    eq = np.isfinite(lo_sc) & np.isfinite(hi_sc) & (np.abs(hi_sc - lo_sc) < 1e-12)
    rho = np.full(m, opts.rho)
    rho[eq] = np.clip(opts.rho * _RHO_EQ_SCALE, _RHO_MIN, _RHO_MAX)
    ws.rho_vec = rho
    ws.key = (id(qp.P), id(qp.A))
    _factorize(ws, opts)


def _factorize(ws: QpWorkspace, opts: QpOptions) -> None:
    n = ws.P_sc.shape[0]
    m = ws.A_sc.shape[0]
    if m:
        kkt = sp.bmat(
            [[ws.P_sc + opts.sigma * sp.eye(n), ws.A_sc.T],
             [ws.A_sc, -sp.diags(1.0 / ws.rho_vec)]], format="csc")
    else:
        kkt = (ws.P_sc + opts.sigma * sp.eye(n)).tocsc()
    ws.factor = spla.splu(kkt)


def _polish(qp: Qp, x: np.ndarray, y: np.ndarray, z: np.ndarray,
            opts: QpOptions) -> tuple[np.ndarray, np.ndarray] | None:
    """Active-set re-solve on the unscaled data; None if not applicable.

    Equality rows (lo == hi) are always active and their multipliers are
    free-signed.  An inequality row counts as active only when its dual
    magnitude exceeds its primal slack, and the guess is only trusted if
    the re-solved multipliers keep their signs (lower-active push up,
    upper-active push down) beyond noise level.
    """
    m = qp.A.shape[0]
    if m == 0:
        return None
    eq = np.isfinite(qp.lo) & np.isfinite(qp.hi) \
        & (np.abs(qp.hi - qp.lo) < 1e-12)
    low = np.isfinite(qp.lo) & ~eq & (z - qp.lo < -y)
    upp = np.isfinite(qp.hi) & ~eq & (qp.hi - z < y)
    n_act = int(eq.sum() + low.sum() + upp.sum())
    if n_act == 0:
        return None
    A_act = sp.vstack([qp.A[eq], qp.A[low], qp.A[upp]], format="csc")
    b_act = np.concatenate([qp.lo[eq], qp.lo[low], qp.hi[upp]])
    delta = opts.polish_delta
    n = qp.P.shape[0]
    kkt = sp.bmat(
        [[qp.P + delta * sp.eye(n), A_act.T],
         [A_act, -delta * sp.eye(n_act)]], format="csc")
    rhs = np.concatenate([-qp.q, b_act])
    try:
        factor = spla.splu(kkt)
    except RuntimeError:
        return None
    sol = factor.solve(rhs)
    # Iterative refinement against the unregularized system.
    kkt_exact = sp.bmat(
        [[qp.P, A_act.T], [A_act, None]], format="csc")
    for _ in range(3):
        resid = rhs - kkt_exact @ sol
        sol = sol + factor.solve(resid)
    x_pol = sol[:n]
    n_eq, n_low = int(eq.sum()), int(low.sum())
    y_pol = np.zeros(m)
    y_pol[eq] = sol[n:n + n_eq]
    y_pol[low] = sol[n + n_eq:n + n_eq + n_low]
    y_pol[upp] = sol[n + n_eq + n_low:]
    if not (np.all(np.isfinite(x_pol)) and np.all(np.isfinite(y_pol))):
        return None
    # Weakly active rows may land just on the wrong side; only a clearly
    # wrong-signed multiplier discredits the active-set guess.
    tol = 1e-9 * (1.0 + float(np.abs(y_pol).max()))
    if np.any(y_pol[low] > tol) or np.any(y_pol[upp] < -tol):
        return None
    return x_pol, y_pol


def _residuals(qp: Qp, x: np.ndarray, y: np.ndarray,
               opts: QpOptions) -> tuple[float, float, float, float,
                                         float, float]:
    ax = qp.A @ x if qp.A.shape[0] else np.zeros(0)
    pri = float(np.maximum(np.maximum(ax - qp.hi, qp.lo - ax), 0.0).max()) \
        if ax.size else 0.0
    px = qp.P @ x
    aty = qp.A.T @ y if ax.size else np.zeros_like(x)
    dua = float(np.abs(px + qp.q + aty).max()) if x.size else 0.0
    pri_norm = max(
        float(np.abs(ax).max()) if ax.size else 0.0,
        float(np.abs(np.where(np.isfinite(qp.hi), qp.hi, 0.0)).max()) if ax.size else 0.0)
    dua_norm = max(
        float(np.abs(px).max()) if px.size else 0.0,
        float(np.abs(qp.q).max()) if qp.q.size else 0.0,
        float(np.abs(aty).max()) if aty.size else 0.0)
    eps_pri = opts.eps_abs + opts.eps_rel * pri_norm
    eps_dua = opts.eps_abs + opts.eps_rel * dua_norm
    return pri, dua, eps_pri, eps_dua, pri_norm, dua_norm


def _check_primal_infeasible(qp: Qp, dy: np.ndarray, eps: float) -> bool:
    norm = float(np.abs(dy).max()) if dy.size else 0.0
    if norm < 1e-12:
        return False
    v = dy / norm
    pos = np.maximum(v, 0.0)
    neg = np.minimum(v, 0.0)
    # A certificate cannot push against a missing bound.
    if np.any(pos[~np.isfinite(qp.hi)] > eps):
        return False
    if np.any(-neg[~np.isfinite(qp.lo)] > eps):
        return False
    atv = float(np.abs(qp.A.T @ v).max())
    hi = np.where(np.isfinite(qp.hi), qp.hi, 0.0)
    lo = np.where(np.isfinite(qp.lo), qp.lo, 0.0)
    support = float(hi @ pos + lo @ neg)
    return atv <= eps and support <= -eps


def _check_dual_infeasible(qp: Qp, dx: np.ndarray, eps: float) -> bool:
    norm = float(np.abs(dx).max()) if dx.size else 0.0
    if norm < 1e-12:
        return False
    v = dx / norm
    if float(np.abs(qp.P @ v).max()) > eps:
        return False
    if float(qp.q @ v) > -eps:
        return False
    if qp.A.shape[0]:
        av = qp.A @ v
        up_ok = np.isfinite(qp.hi)
        lo_ok = np.isfinite(qp.lo)
        if np.any(av[up_ok] > eps) or np.any(av[lo_ok] < -eps):
            return False
    return True


def solve_qp(qp: Qp, opts: QpOptions | None = None,
             warm_start: tuple[np.ndarray, np.ndarray] | None = None,
             workspace: QpWorkspace | None = None) -> QpSolution:
    """Solve one QP; ``warm_start`` is an unscaled (x, y) pair."""
    opts = opts or QpOptions()
    n = qp.P.shape[0]
    m = qp.A.shape[0]
    if qp.q.shape != (n,):
        raise ValueError(f"q has shape {qp.q.shape}, expected ({n},)")
    if qp.lo.shape != (m,) or qp.hi.shape != (m,):
        raise ValueError("row bound shapes do not match A")
    if np.any(qp.lo > qp.hi + 1e-12):
        return QpSolution(
            x=np.zeros(n), y=np.zeros(m), status="primal_infeasible",
            iterations=0, objective=np.nan, pri_res=np.inf, dua_res=np.inf)

    ws = workspace if workspace is not None else QpWorkspace()
    if not ws.matches(qp):
        _setup_workspace(qp, opts, ws)
    d, e = ws.d, ws.e
    lo = e * qp.lo if m else qp.lo.copy()
    hi = e * qp.hi if m else qp.hi.copy()
    q_sc = d * qp.q
    rho = ws.rho_vec

    if warm_start is not None:
        x = warm_start[0] / d
        y = warm_start[1] / e if m else np.zeros(0)
        z = np.clip(ws.A_sc @ x, lo, hi) if m else np.zeros(0)
    else:
        x = np.zeros(n)
        y = np.zeros(m)
        z = np.clip(np.zeros(m), lo, hi) if m else np.zeros(0)

    status = "max_iter"
    iters = opts.max_iter
    pri = dua = np.inf
    rho_bar = opts.rho
    for k in range(1, opts.max_iter + 1):
        if m:
            rhs = np.concatenate([opts.sigma * x - q_sc, z - y / rho])
            sol = ws.factor.solve(rhs)
            x_t = sol[:n]
            nu = sol[n:]
            z_t = z + (nu - y) / rho
            x_new = opts.alpha * x_t + (1.0 - opts.alpha) * x
            z_rel = opts.alpha * z_t + (1.0 - opts.alpha) * z
            z_new = np.clip(z_rel + y / rho, lo, hi)
            y_new = y + rho * (z_rel - z_new)
        else:
            x_new = ws.factor.solve(opts.sigma * x - q_sc)
            z_new = z
            y_new = y

        dx = x_new - x
        dy = y_new - y
        x, y, z = x_new, y_new, z_new

        # Termination and certificates on unscaled quantities.
        x_u = d * x
        y_u = e * y if m else y
        pri, dua, eps_pri, eps_dua, pri_nrm, dua_nrm = _residuals(
            qp, x_u, y_u, opts)
        if pri <= eps_pri and dua <= eps_dua:
            status = "optimal"
            iters = k
            break
        if m and _check_primal_infeasible(qp, e * dy, opts.eps_infeas):
            return QpSolution(
                x=x_u, y=y_u, status="primal_infeasible", iterations=k,
                objective=np.nan, pri_res=pri, dua_res=dua)
        if _check_dual_infeasible(qp, d * dx, opts.eps_infeas):
            return QpSolution(
                x=x_u, y=y_u, status="dual_infeasible", iterations=k,
                objective=np.nan, pri_res=pri, dua_res=dua)

        if opts.adaptive_rho and m and k % opts.adaptive_interval == 0:
            # Balance the scaled residuals relative to their own norms;
            # the scaled geometry is the one the iteration runs in.
            ax_s = ws.A_sc @ x
            px_s = ws.P_sc @ x
            aty_s = ws.A_sc.T @ y
            pri_s = float(np.abs(ax_s - z).max())
            dua_s = float(np.abs(px_s + q_sc + aty_s).max())
            pn = max(float(np.abs(ax_s).max()), float(np.abs(z).max()), 1e-12)
            dn = max(float(np.abs(px_s).max()), float(np.abs(q_sc).max()),
                     float(np.abs(aty_s).max()), 1e-12)
            scale = np.sqrt((pri_s / pn) / max(dua_s / dn, 1e-12))
            new_rho = float(np.clip(rho_bar * scale, _RHO_MIN, _RHO_MAX))
            if (new_rho > rho_bar * opts.adaptive_tol
                    or new_rho < rho_bar / opts.adaptive_tol):
                ratio = new_rho / rho_bar
                rho_bar = new_rho
                ws.rho_vec = np.clip(rho * ratio, _RHO_MIN, _RHO_MAX)
                rho = ws.rho_vec
                _factorize(ws, opts)

    x_u = d * x
    y_u = e * y if m else y
    if status == "optimal" and opts.polish:
        pol = _polish(qp, x_u, y_u, qp.A @ x_u if m else np.zeros(0), opts)
        if pol is not None:
            xp, yp = pol
            p_pri, p_dua, _, _, _, _ = _residuals(qp, xp, yp, opts)
            if max(p_pri, p_dua) < max(pri, dua):
                x_u, y_u = xp, yp
                pri, dua = p_pri, p_dua
    return QpSolution(
        x=x_u, y=y_u, status=status, iterations=iters,
        objective=qp.objective(x_u), pri_res=pri, dua_res=dua)


def box_rows(n: int, lb: np.ndarray, ub: np.ndarray) -> tuple[sp.csc_matrix,
                                                              np.ndarray,
                                                              np.ndarray]:
    """Identity constraint block enforcing lb <= x <= ub as rows."""
    return sp.eye(n, format="csc"), np.asarray(lb, float), np.asarray(ub, float)
