"""QP engine checks against closed forms and an active-set oracle.

The oracle enumerates every lower/upper/inactive row assignment, solves the
equality-constrained KKT system for each, and keeps the best candidate whose
multiplier signs and slack feasibility check out.  For strictly convex
problems this finds the exact optimum independently of the iterative engine.
"""

import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from bookshelf.qpsolve import (Qp, QpOptions, QpWorkspace, box_rows, solve_qp)


def dense_qp(P, q, A, lo, hi):
    return Qp(sp.csc_matrix(np.atleast_2d(P)), np.asarray(q, float),
              sp.csc_matrix(np.atleast_2d(A)), np.asarray(lo, float),
              np.asarray(hi, float))


def enumerate_qp(P, q, A, lo, hi):
    """Exact optimum by active-set enumeration; assumes P positive definite
    and a unique optimizer.  Returns None when no assignment checks out."""
    P = np.atleast_2d(np.asarray(P, float))
    A = np.atleast_2d(np.asarray(A, float))
    m = A.shape[0]
    best = None
    for assign in itertools.product((-1, 0, 1), repeat=m):
        act = [k for k, a in enumerate(assign) if a != 0]
        rhs_act = [lo[k] if assign[k] < 0 else hi[k] for k in act]
        if any(not np.isfinite(v) for v in rhs_act):
            continue
        n = P.shape[0]
        kkt = np.zeros((n + len(act), n + len(act)))
        kkt[:n, :n] = P
        if act:
            kkt[:n, n:] = A[act].T
            kkt[n:, :n] = A[act]
        rhs = np.concatenate([-q, rhs_act])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        lam = sol[n:]
        ax = A @ x
        if np.any(ax > hi + 1e-8) or np.any(ax < lo - 1e-8):
            continue
        ok = all((assign[k] < 0 and lam[t] <= 1e-8)
                 or (assign[k] > 0 and lam[t] >= -1e-8)
                 for t, k in enumerate(act))
        if not ok:
            continue
        obj = 0.5 * x @ P @ x + q @ x
        if best is None or obj < best[0] - 1e-12:
            best = (obj, x)
    return best


class TestClosedForms:
    def test_unconstrained(self):
        qp = Qp(sp.csc_matrix(2.0 * np.eye(2)), np.array([-2.0, -4.0]),
                sp.csc_matrix((0, 2)), np.zeros(0), np.zeros(0))
        sol = solve_qp(qp)
        assert sol.status == "optimal"
        assert sol.x == pytest.approx([1.0, 2.0], abs=1e-5)

    def test_active_upper_bound(self):
        # min (x-2)^2 on [0,1]: optimum pinned at 1 with multiplier 2.
        qp = dense_qp([[2.0]], [-4.0], [[1.0]], [0.0], [1.0])
        sol = solve_qp(qp)
        assert sol.status == "optimal"
        assert sol.x == pytest.approx([1.0], abs=1e-6)
        assert sol.y == pytest.approx([2.0], abs=1e-4)
        assert sol.pri_res <= 1e-8

    def test_equality_row(self):
        qp = dense_qp(2.0 * np.eye(2), [0.0, 0.0], [[1.0, 1.0]], [2.0], [2.0])
        sol = solve_qp(qp)
        assert sol.x == pytest.approx([1.0, 1.0], abs=1e-6)
        assert sol.objective == pytest.approx(2.0, abs=1e-6)

    def test_objective_matches_recomputation(self):
        qp = dense_qp(2.0 * np.eye(2), [1.0, -1.0],
                      [[1.0, 0.0], [0.0, 1.0]], [-1.0, -1.0], [1.0, 1.0])
        sol = solve_qp(qp)
        assert sol.objective == pytest.approx(qp.objective(sol.x), abs=1e-9)


class TestInfeasibility:
    def test_contradictory_rows(self):
        qp = dense_qp([[2.0]], [0.0], [[1.0], [1.0]],
                      [-np.inf, 1.0], [-1.0, np.inf])
        sol = solve_qp(qp)
        assert sol.status == "primal_infeasible"

    def test_crossed_bounds_short_circuit(self):
        qp = dense_qp([[2.0]], [0.0], [[1.0]], [1.0], [-1.0])
        sol = solve_qp(qp)
        assert sol.status == "primal_infeasible"
        assert sol.iterations == 0

    def test_unbounded_direction(self):
        # No curvature, objective pushes x up, rows only bound from below.
        qp = dense_qp([[0.0]], [-1.0], [[1.0]], [0.0], [np.inf])
        sol = solve_qp(qp)
        assert sol.status == "dual_infeasible"


class TestWarmStart:
    def test_restart_at_optimum_is_cheap(self):
        rng = np.random.default_rng(0)
        r = rng.normal(size=(4, 4))
        P = r.T @ r + np.eye(4)
        A = rng.normal(size=(6, 4))
        x0 = rng.normal(size=4)
        qp = dense_qp(P, rng.normal(size=4), A, A @ x0 - 1.0, A @ x0 + 1.0)
        cold = solve_qp(qp)
        assert cold.status == "optimal"
        warm = solve_qp(qp, warm_start=(cold.x, cold.y))
        assert warm.status == "optimal"
        assert warm.iterations <= 25
        assert warm.x == pytest.approx(cold.x, abs=1e-5)

    def test_workspace_reuse_keeps_factorization(self):
        rng = np.random.default_rng(1)
        r = rng.normal(size=(5, 5))
        P = sp.csc_matrix(r.T @ r + np.eye(5))
        A, lo, hi = box_rows(5, -np.ones(5), np.ones(5))
        q = rng.normal(size=5)
        qp = Qp(P, q, A, lo, hi)
        opts = QpOptions(adaptive_rho=False)
        ws = QpWorkspace()
        base = solve_qp(qp, opts, workspace=ws)
        factor = ws.factor
        for j in range(5):
            lo2, hi2 = lo.copy(), hi.copy()
            lo2[j] = hi2[j] = 0.5  # pin one variable via its bound row
            pinned = qp.with_row_bounds(lo2, hi2)
            shared = solve_qp(pinned, opts, workspace=ws)
            fresh = solve_qp(pinned, opts)
            assert shared.status == fresh.status == "optimal"
            assert shared.x == pytest.approx(fresh.x, abs=1e-6)
            assert shared.x[j] == pytest.approx(0.5, abs=1e-7)
        assert ws.factor is factor
        again = solve_qp(qp, opts, workspace=ws)
        assert again.x == pytest.approx(base.x, abs=1e-6)


class TestAgainstEnumeration:
    def test_random_battery(self):
        rng = np.random.default_rng(42)
        checked = 0
        for trial in range(150):
            n = int(rng.integers(2, 5))
            m = int(rng.integers(1, 6))
            r = rng.normal(size=(n, n))
            P = r.T @ r + np.eye(n)
            q = rng.normal(size=n)
            A = rng.normal(size=(m, n))
            x0 = rng.normal(size=n)
            ax0 = A @ x0
            lo = ax0 - rng.uniform(0.1, 1.0, size=m)
            hi = ax0 + rng.uniform(0.1, 1.0, size=m)
            for k in range(m):
                u = rng.uniform()
                if u < 0.15:
                    lo[k] = -np.inf
                elif u < 0.3:
                    hi[k] = np.inf
                elif u < 0.4:
                    lo[k] = hi[k] = ax0[k]
            oracle = enumerate_qp(P, q, A, lo, hi)
            if oracle is None:
                continue
            tight = QpOptions(eps_abs=1e-9, eps_rel=1e-9, max_iter=200_000)
            sol = solve_qp(dense_qp(P, q, A, lo, hi), tight)
            assert sol.status == "optimal", f"trial {trial}"
            ax = A @ sol.x
            viol = max(np.maximum(ax - hi, 0.0).max(),
                       np.maximum(lo - ax, 0.0).max())
            assert viol <= 1e-7, f"trial {trial}"
            # Achievable objective accuracy degrades with the dual norm
            # (a feasibility slip of eps moves the objective by ~|y| eps).
            slack = 1e-7 * (1.0 + np.abs(sol.y).sum()) + 1e-6 * abs(oracle[0])
            assert abs(sol.objective - oracle[0]) <= slack, f"trial {trial}"
            assert sol.x == pytest.approx(
                oracle[1], abs=1e-5 + np.sqrt(2.0 * slack)), f"trial {trial}"
            # The default tolerance still has to deliver acceptance-level
            # relative objective accuracy.
            loose = solve_qp(dense_qp(P, q, A, lo, hi))
            assert loose.status == "optimal"
            slack_l = 2e-5 * (1.0 + np.abs(loose.y).sum() + abs(oracle[0]))
            assert abs(loose.objective - oracle[0]) <= slack_l, f"trial {trial}"
            checked += 1
        assert checked >= 120
