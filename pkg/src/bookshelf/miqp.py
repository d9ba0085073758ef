"""Piecewise-linear envelope reformulation and branch-and-bound MIQP solver.

Every bilinear product x_r = x_p * x_q is replaced by a gridded convex
combination: weights alpha over the p-breakpoints, beta over the
q-breakpoints, and a joint weight table gamma whose marginals are alpha and
beta.  The active grid cell is selected by log-many binaries delta through a
reflected-Gray incidence, which keeps alpha and beta in sos2 (at most two
adjacent nonzeros).  A point feasible for the block satisfies
|x_r - x_p x_q| <= dp*dq/4 for the active cell widths, with equality-free
exactness whenever both factors sit on breakpoints.

The MIQP is solved by best-first branch-and-bound over the QP engine; the
interval-fixing reduction pins every binary from a candidate solution and
leaves a single QP.
"""

from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .model import (DecisionVector, ProblemFormulation, Shelf,
                    evaluate_constraints)
from .qpsolve import Qp, QpOptions, QpSolution, QpWorkspace, solve_qp
from .report import SolveReport

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    """Uniform segmentation of one scalar range into n cells."""

    lo: float
    hi: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("grid needs at least one segment")
        if not self.lo < self.hi:
            raise ValueError("grid range is empty")

    def breakpoints(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n + 1)

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n

    def locate(self, value: float, tol: float = 1e-9) -> int:
        """Cell index whose right-closed interval holds value.

        A value on a breakpoint maps to the cell whose lower edge equals it,
        so replays are deterministic.
        """
        if value < self.lo - tol or value > self.hi + tol:
            raise ValueError(
                f"value {value} outside grid range [{self.lo}, {self.hi}]")
        bp = self.breakpoints()
        idx = int(np.searchsorted(bp, value, side="right")) - 1
        return min(max(idx, 0), self.n - 1)


@dataclass(frozen=True)
class GridSpec:
    """Per-kind grids for the bilinear variables."""

    grids: dict[str, Grid]

    def lookup(self, kind: str) -> Grid:
        try:
            return self.grids[kind]
        except KeyError:
            raise ValueError(
                f"grid specification missing bilinear variable kind {kind!r}")

    @classmethod
    def table_default(cls, shelf: Shelf | None = None) -> "GridSpec":
        """Default segmentation: 8 cells on rotation/plane entries, 4 on
        vertex coordinates over the shelf box."""
        shelf = shelf or Shelf()
        return cls({
            "rot_cos": Grid(0.0, 1.0, 8),
            "rot_sin": Grid(-1.0, 1.0, 8),
            "plane": Grid(-1.0, 1.0, 8),
            "vert_x": Grid(-shelf.width / 2.0, shelf.width / 2.0, 4),
            "vert_y": Grid(0.0, shelf.height, 4),
        })

    @classmethod
    def uniform(cls, shelf: Shelf | None = None, n: int = 4) -> "GridSpec":
        """Same ranges as the default but n cells everywhere."""
        shelf = shelf or Shelf()
        return cls({
            "rot_cos": Grid(0.0, 1.0, n),
            "rot_sin": Grid(-1.0, 1.0, n),
            "plane": Grid(-1.0, 1.0, n),
            "vert_x": Grid(-shelf.width / 2.0, shelf.width / 2.0, n),
            "vert_y": Grid(0.0, shelf.height, n),
        })

    def describe(self) -> str:
        parts = [f"{k}={g.lo:g}:{g.hi:g}:{g.n}" for k, g in sorted(self.grids.items())]
        return ",".join(parts)


def n_delta(n_p: int, n_q: int) -> int:
    """Binary budget per term: ceil(log2((n_p+1)(n_q+1)))."""
    return math.ceil(math.log2((n_p + 1) * (n_q + 1)))


def _axis_bits(n: int) -> int:
    return math.ceil(math.log2(n)) if n > 1 else 0


def _gray(i: int) -> int:
    return i ^ (i >> 1)


def _axis_incidence(n: int, bit: int) -> tuple[list[int], list[int]]:
    """Breakpoints whose every incident cell has the given Gray bit 0 / 1."""
    zeros, ones = [], []
    for i in range(n + 1):
        cells = [c for c in (i - 1, i) if 0 <= c < n]
        vals = {(_gray(c) >> bit) & 1 for c in cells}
        if vals == {0}:
            zeros.append(i)
        elif vals == {1}:
            ones.append(i)
    return zeros, ones


@dataclass
class TermBlock:
    """Offsets of one product's envelope variables inside the MIQP vector."""

    term_index: int
    r: int
    p: int
    q: int
    grid_p: Grid
    grid_q: Grid
    alpha: int
    beta: int
    gamma: int      # row-major (n_p+1) x (n_q+1)
    delta: int
    n_delta: int
    bits_p: int
    bits_q: int

    @property
    def n_alpha(self) -> int:
        return self.grid_p.n + 1

    @property
    def n_beta(self) -> int:
        return self.grid_q.n + 1

    def delta_code(self, cell_p: int, cell_q: int) -> np.ndarray:
        """Binary assignment selecting the given cell pair (surplus bits 0)."""
        code = np.zeros(self.n_delta)
        gp = _gray(cell_p)
        gq = _gray(cell_q)
        for b in range(self.bits_p):
            code[b] = (gp >> b) & 1
        for b in range(self.bits_q):
            code[self.bits_p + b] = (gq >> b) & 1
        return code


@dataclass
class MiqpProblem:
    """Envelope MIQP: quadratic objective, all constraints as rows.

    The leading n_total rows of qp.A form an identity block carrying the
    variable bounds, so fixing variables (branching, interval pinning) only
    rewrites entries of the row-bound vectors and the KKT factorization is
    shared across the whole search.
    """

    formulation: ProblemFormulation
    qp: Qp
    n_base: int
    n_total: int
    binary_indices: np.ndarray
    exclusive_groups: list[np.ndarray]
    blocks: list[TermBlock]

    @property
    def n_binaries(self) -> int:
        return int(self.binary_indices.size)

    def base_x(self, x: np.ndarray) -> np.ndarray:
        return x[:self.n_base]


class _MiqpRows:
    def __init__(self) -> None:
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []
        self.lo: list[float] = []
        self.hi: list[float] = []

    def add(self, cols, vals, lo, hi) -> None:
        self.cols.append(np.asarray(cols, dtype=np.int64))
        self.vals.append(np.asarray(vals, dtype=float))
        self.lo.append(lo)
        self.hi.append(hi)

    def to_csc(self, n: int) -> tuple[sp.csc_matrix, np.ndarray, np.ndarray]:
        rows = np.concatenate([np.full(c.size, i, dtype=np.int64)
                               for i, c in enumerate(self.cols)])
        cols = np.concatenate(self.cols)
        vals = np.concatenate(self.vals)
        mat = sp.coo_matrix((vals, (rows, cols)),
                            shape=(len(self.cols), n)).tocsc()
        return mat, np.array(self.lo), np.array(self.hi)


def reformulate_sos2(f: ProblemFormulation, grids: GridSpec) -> MiqpProblem:
    """Replace every bilinear definition by its gridded envelope block."""
    n_base = f.dim
    blocks: list[TermBlock] = []
    offset = n_base
    for s, term in enumerate(f.bilinear):
        gp = grids.lookup(term.kind_p)
        gq = grids.lookup(term.kind_q)
        nd = n_delta(gp.n, gq.n)
        bp, bq = _axis_bits(gp.n), _axis_bits(gq.n)
        if bp + bq > nd:
            raise ValueError(
                f"segment counts ({gp.n}, {gq.n}) need {bp + bq} cell bits, "
                f"over the {nd}-bit budget")
        blk = TermBlock(
            term_index=s, r=term.r, p=term.p, q=term.q, grid_p=gp, grid_q=gq,
            alpha=offset, beta=offset + gp.n + 1,
            gamma=offset + gp.n + 1 + gq.n + 1,
            delta=offset + (gp.n + 1) + (gq.n + 1) + (gp.n + 1) * (gq.n + 1),
            n_delta=nd, bits_p=bp, bits_q=bq)
        blocks.append(blk)
        offset = blk.delta + nd
    n_total = offset

    lo = np.full(n_total, -np.inf)
    hi = np.full(n_total, np.inf)
    lo[:n_base] = f.lb
    hi[:n_base] = f.ub
    for blk in blocks:
        w0 = blk.alpha
        w1 = blk.delta
        lo[w0:w1] = 0.0
        hi[w0:w1] = 1.0
        lo[w1:w1 + blk.n_delta] = 0.0
        used = blk.bits_p + blk.bits_q
        hi[w1:w1 + used] = 1.0
        hi[w1 + used:w1 + blk.n_delta] = 0.0  # surplus bits pinned

    rb = _MiqpRows()
    # Identity block first: variable bounds live here so they can be edited
    # without touching the matrix.
    for j in range(n_total):
        rb.add([j], [1.0], lo[j], hi[j])
    # Original linear rows.
    f_rows = f.rows.tocoo()
    by_row: dict[int, tuple[list[int], list[float]]] = {}
    for r, c, v in zip(f_rows.row, f_rows.col, f_rows.data):
        by_row.setdefault(int(r), ([], []))
        by_row[int(r)][0].append(int(c))
        by_row[int(r)][1].append(float(v))
    for r in range(f.rows.shape[0]):
        cols, vals = by_row.get(r, ([], []))
        if cols:
            rb.add(cols, vals, f.row_lo[r], f.row_hi[r])
    # Envelope blocks.
    for blk in blocks:
        bpts = blk.grid_p.breakpoints()
        bqts = blk.grid_q.breakpoints()
        na, nb = blk.n_alpha, blk.n_beta
        a_idx = np.arange(blk.alpha, blk.alpha + na)
        b_idx = np.arange(blk.beta, blk.beta + nb)
        g_idx = np.arange(blk.gamma, blk.gamma + na * nb)
        rb.add(np.r_[blk.p, a_idx], np.r_[1.0, -bpts], 0.0, 0.0)
        rb.add(np.r_[blk.q, b_idx], np.r_[1.0, -bqts], 0.0, 0.0)
        prods = np.outer(bpts, bqts).ravel()
        rb.add(np.r_[blk.r, g_idx], np.r_[1.0, -prods], 0.0, 0.0)
        rb.add(g_idx, np.ones(na * nb), 1.0, 1.0)
        for i in range(na):
            row_g = g_idx[i * nb:(i + 1) * nb]
            rb.add(np.r_[row_g, a_idx[i]], np.r_[np.ones(nb), -1.0], 0.0, 0.0)
        for j in range(nb):
            col_g = g_idx[j::nb]
            rb.add(np.r_[col_g, b_idx[j]], np.r_[np.ones(na), -1.0], 0.0, 0.0)
        for axis, widx, nseg, bits, bit0 in (
                ("p", a_idx, blk.grid_p.n, blk.bits_p, 0),
                ("q", b_idx, blk.grid_q.n, blk.bits_q, blk.bits_p)):
            for b in range(bits):
                zeros, ones = _axis_incidence(nseg, b)
                dvar = blk.delta + bit0 + b
                if zeros:
                    rb.add(np.r_[widx[zeros], dvar],
                           np.r_[np.ones(len(zeros)), 1.0], -np.inf, 1.0)
                if ones:
                    rb.add(np.r_[widx[ones], dvar],
                           np.r_[np.ones(len(ones)), -1.0], -np.inf, 0.0)

    A, row_lo, row_hi = rb.to_csc(n_total)
    p_diag = np.zeros(n_total)
    p_diag[:n_base] = 2.0 * f.q_diag
    q_lin = np.zeros(n_total)
    q_lin[:n_base] = -2.0 * f.q_diag * f.x_goal
    const = float(f.q_diag @ (f.x_goal * f.x_goal))
    qp = Qp(sp.diags(p_diag).tocsc(), q_lin, A, row_lo, row_hi, const)

    binaries = np.concatenate(
        [f.binary_indices]
        + [np.arange(b.delta, b.delta + b.n_delta) for b in blocks]
    ).astype(np.int64) if blocks else f.binary_indices.copy()
    layout: DecisionVector = f.layout
    groups = [np.arange(layout.mode_offset + 5 * i, layout.mode_offset + 5 * i + 5)
              for i in range(layout.n_books)]
    return MiqpProblem(
        formulation=f, qp=qp, n_base=n_base, n_total=n_total,
        binary_indices=binaries, exclusive_groups=groups, blocks=blocks)


def extend_vector(m: MiqpProblem, x_base: np.ndarray) -> np.ndarray:
    """Lift a formulation-space vector into the MIQP variable space.

    Each block gets the interpolation weights of its factor values in their
    located cells, the product-form gamma table, and the matching delta code.
    If the base vector has exact products, every envelope row is satisfied
    exactly; either way the lift is the natural warm start.
    """
    if x_base.shape != (m.n_base,):
        raise ValueError(
            f"expected base vector of length {m.n_base}, got {x_base.shape}")
    x = np.zeros(m.n_total)
    x[:m.n_base] = x_base
    for blk in m.blocks:
        alpha = np.zeros(blk.n_alpha)
        beta = np.zeros(blk.n_beta)
        cp = blk.grid_p.locate(x_base[blk.p])
        cq = blk.grid_q.locate(x_base[blk.q])
        bp = blk.grid_p.breakpoints()
        bq = blk.grid_q.breakpoints()
        u = min(max((x_base[blk.p] - bp[cp]) / blk.grid_p.width, 0.0), 1.0)
        v = min(max((x_base[blk.q] - bq[cq]) / blk.grid_q.width, 0.0), 1.0)
        alpha[cp], alpha[cp + 1] = 1.0 - u, u
        beta[cq], beta[cq + 1] = 1.0 - v, v
        x[blk.alpha:blk.alpha + blk.n_alpha] = alpha
        x[blk.beta:blk.beta + blk.n_beta] = beta
        gamma = np.outer(alpha, beta)
        x[blk.gamma:blk.gamma + gamma.size] = gamma.ravel()
        x[blk.delta:blk.delta + blk.n_delta] = blk.delta_code(cp, cq)
    return x


@dataclass
class MiqpOptions:
    gap: float = 1e-4
    int_tol: float = 1e-6
    feas_tol: float = 1e-6
    node_limit: int = 100_000
    time_limit: float | None = None
    qp: QpOptions | None = None


def default_node_qp_options() -> QpOptions:
    """Near-absolute tolerances: incumbents must satisfy rows at 1e-6 and
    the big-M rows would soak up a relative epsilon."""
    return QpOptions(eps_abs=1e-7, eps_rel=1e-9)


def _propagate(pins: dict[int, float], groups_by_var: dict[int, np.ndarray],
               idx: int, val: float) -> dict[int, float] | None:
    """Apply one pin plus one-hot group consequences; None on conflict."""
    pins = dict(pins)
    stack = [(idx, val)]
    while stack:
        j, v = stack.pop()
        if j in pins:
            if pins[j] != v:
                return None
            continue
        pins[j] = v
        group = groups_by_var.get(j)
        if group is None:
            continue
        if v == 1.0:
            for k in group:
                if k != j and pins.get(k, 0.0) != 0.0 and k in pins:
                    return None
                if k != j and k not in pins:
                    stack.append((int(k), 0.0))
        else:
            free = [int(k) for k in group if k not in pins and k != j]
            ones = [k for k in group if pins.get(k) == 1.0]
            if not ones:
                if len(free) == 1:
                    stack.append((free[0], 1.0))
                elif not free:
                    return None
    return pins


def _apply_pins(m: MiqpProblem, pins: dict[int, float]) -> Qp:
    lo = m.qp.lo.copy()
    hi = m.qp.hi.copy()
    for j, v in pins.items():
        lo[j] = v
        hi[j] = v
    return m.qp.with_row_bounds(lo, hi)


def _row_violation(qp: Qp, x: np.ndarray) -> float:
    ax = qp.A @ x
    return float(np.maximum(np.maximum(ax - qp.hi, qp.lo - ax), 0.0).max())


def solve_miqp(m: MiqpProblem, opts: MiqpOptions | None = None,
               warm_start: np.ndarray | None = None
               ) -> tuple[SolveReport, np.ndarray | None]:
    """Best-first branch-and-bound on the envelope MIQP.

    Returns the report and the full MIQP-space solution vector (use
    ``m.base_x`` for the formulation part).
    """
    opts = opts or MiqpOptions()
    qp_opts = opts.qp or default_node_qp_options()
    t0 = time.perf_counter()
    ws = QpWorkspace()
    groups_by_var: dict[int, np.ndarray] = {}
    for g in m.exclusive_groups:
        for j in g:
            groups_by_var[int(j)] = g
    binaries = m.binary_indices

    warm = None
    if warm_start is not None:
        warm = (warm_start, np.zeros(m.qp.A.shape[0]))
    root_sol = solve_qp(m.qp, qp_opts, warm_start=warm, workspace=ws)
    n_nodes = 1
    qp_iters = root_sol.iterations
    if root_sol.status == "primal_infeasible":
        return (SolveReport(method="miqp", status="infeasible",
                            wall_time=time.perf_counter() - t0,
                            iterations=qp_iters, trials=n_nodes), None)
    if root_sol.status not in ("optimal", "max_iter"):
        return (SolveReport(method="miqp", status=root_sol.status,
                            wall_time=time.perf_counter() - t0,
                            iterations=qp_iters, trials=n_nodes), None)
    warm = (root_sol.x, root_sol.y)

    best_obj = np.inf
    best_x: np.ndarray | None = None

    def try_incumbent(x: np.ndarray, obj: float) -> None:
        nonlocal best_obj, best_x
        if obj < best_obj - 1e-12 and _row_violation(m.qp, x) <= opts.feas_tol:
            best_obj = obj
            best_x = x.copy()

    def rounded_pins(x: np.ndarray) -> dict[int, float] | None:
        pins: dict[int, float] = {}
        for g in m.exclusive_groups:
            one = int(g[np.argmax(x[g])])
            pins = {**pins, **{int(j): 1.0 if j == one else 0.0 for j in g}}
        for j in binaries:
            j = int(j)
            if j not in pins:
                pins[j] = float(round(min(max(x[j], 0.0), 1.0)))
        return pins

    def frac_index(x: np.ndarray) -> int | None:
        fr = np.abs(x[binaries] - np.round(x[binaries]))
        k = int(np.argmax(fr))
        return int(binaries[k]) if fr[k] > opts.int_tol else None

    # Rounding heuristic at the root for an early incumbent.
    j0 = frac_index(root_sol.x)
    if j0 is None:
        try_incumbent(root_sol.x, root_sol.objective)
        if best_x is None:
            return (SolveReport(method="miqp", status="max_iter",
                                wall_time=time.perf_counter() - t0,
                                trials=n_nodes, iterations=qp_iters), None)
    else:
        pins = rounded_pins(root_sol.x)
        sol = solve_qp(_apply_pins(m, pins), qp_opts, warm_start=warm,
                       workspace=ws)
        qp_iters += sol.iterations
        if sol.status == "optimal":
            try_incumbent(sol.x, sol.objective)

    heap: list[tuple[float, int, dict[int, float]]] = []
    seq = 0
    if j0 is not None:
        heapq.heappush(heap, (root_sol.objective, seq, {}))
    status = "optimal"
    gap = 0.0

    def rel_gap(lb: float) -> float:
        if not np.isfinite(best_obj):
            return np.inf
        return (best_obj - lb) / max(1.0, abs(best_obj))

    while heap:
        lb, _, pins = heapq.heappop(heap)
        gap = rel_gap(lb)
        if gap <= opts.gap:
            break
        if n_nodes >= opts.node_limit:
            status = "node_limit"
            break
        if opts.time_limit is not None and time.perf_counter() - t0 > opts.time_limit:
            status = "time_limit"
            break
        sol = solve_qp(_apply_pins(m, pins), qp_opts, warm_start=warm,
                       workspace=ws)
        n_nodes += 1
        qp_iters += sol.iterations
        if sol.status == "primal_infeasible":
            continue
        if sol.status not in ("optimal", "max_iter"):
            continue
        if sol.objective >= best_obj - 1e-12:
            continue
        j = frac_index(sol.x)
        if j is None:
            try_incumbent(sol.x, sol.objective)
            continue
        for v in (1.0, 0.0):
            child = _propagate(pins, groups_by_var, j, v)
            if child is not None:
                seq += 1
                heapq.heappush(heap, (sol.objective, seq, child))

    if not heap:
        # Tree exhausted: the incumbent, if any, is proven optimal.
        gap = 0.0 if best_x is not None else np.inf

    wall = time.perf_counter() - t0
    if best_x is None:
        status = "infeasible" if status == "optimal" else status
        return (SolveReport(method="miqp", status=status, wall_time=wall,
                            trials=n_nodes, iterations=qp_iters,
                            gap=None), None)
    report = SolveReport(
        method="miqp", status="optimal" if status == "optimal" else status,
        objective=best_obj, wall_time=wall, trials=n_nodes,
        iterations=qp_iters, gap=float(max(gap, 0.0)),
        max_violation=_row_violation(m.qp, best_x))
    return report, best_x


def fix_and_reduce(m: MiqpProblem, candidate: np.ndarray) -> Qp:
    """Pin every binary from a candidate formulation-space vector.

    Mode binaries are rounded; each term's delta code is taken from the grid
    cells holding the candidate's factor values.  The result shares matrices
    with m.qp, so a workspace primed on the MIQP re-solves it with the same
    factorization.
    """
    if candidate.shape != (m.n_base,):
        raise ValueError(
            f"candidate has shape {candidate.shape}, expected ({m.n_base},)")
    lo = m.qp.lo.copy()
    hi = m.qp.hi.copy()

    def pin(j: int, v: float) -> None:
        lo[j] = v
        hi[j] = v

    for j in m.formulation.binary_indices:
        pin(int(j), float(round(min(max(candidate[int(j)], 0.0), 1.0))))
    for blk in m.blocks:
        cell_p = blk.grid_p.locate(candidate[blk.p])
        cell_q = blk.grid_q.locate(candidate[blk.q])
        code = blk.delta_code(cell_p, cell_q)
        for b in range(blk.n_delta):
            pin(blk.delta + b, float(code[b]))
    return m.qp.with_row_bounds(lo, hi)


def miqp_from_rows(f: ProblemFormulation, families: frozenset[str] | set[str],
                   weight: np.ndarray, target: np.ndarray) -> MiqpProblem:
    """Mode-binary MIQP over a subset of the formulation's linear rows.

    Builds min ||x - target||^2_diag(weight) subject to the rows whose family
    tag is in ``families`` plus the variable bounds.  No envelope content:
    the only binaries are the mode indicators, so the search tree is tiny.
    """
    n = f.dim
    keep = np.array([fam in families for fam in f.row_family], dtype=bool)
    rows = f.rows[keep]
    A = sp.vstack([sp.eye(n, format="csc"), rows.tocsc()], format="csc")
    lo = np.concatenate([f.lb, f.row_lo[keep]])
    hi = np.concatenate([f.ub, f.row_hi[keep]])
    qp = Qp(sp.diags(2.0 * weight).tocsc(), -2.0 * weight * target, A, lo, hi,
            float(weight @ (target * target)))
    layout = f.layout
    groups = [np.arange(layout.mode_offset + 5 * i, layout.mode_offset + 5 * i + 5)
              for i in range(layout.n_books)]
    return MiqpProblem(
        formulation=f, qp=qp, n_base=n, n_total=n,
        binary_indices=f.binary_indices.copy(),
        exclusive_groups=groups, blocks=[])
