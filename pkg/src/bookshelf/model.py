"""Shelf placement model: parameters, decision vector layout, constraint rows.

A scene holds N books on a rectangular shelf: N-1 "stored" books whose poses
are known and one "new" book (known size, unknown pose) that has to be slotted
back in.  The decision vector collects per-book poses, rotation entries,
vertex positions, per-pair separating planes, auxiliary product variables (one
per bilinear product, so every constraint row is linear in the lifted vector)
and per-book configuration binaries.

Constraint rows are stored two-sided (lo <= A x <= hi) and tagged with a short
family name so solvers can select subsets:

    A   vertex definition v = center + R(theta) * body offset (equalities)
    B   vertices inside the shelf
    C   rotation normalization c^2 + s^2 = 1 (via the lifted squares)
    D   angle range theta in [-pi/2, pi/2] (c >= 0)
    E   pairwise separating planes (via lifted a*v products)
    F   plane normal normalization (via lifted squares)
    G   configuration one-hot
    H1/I1/J1  pinned flat-right / upright / flat-left poses under big-M
    K1/K2/K3  lean-right contact plane, stability, ground contact
    L1/L2/L3  lean-left mirror rows
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

if TYPE_CHECKING:  # pragma: no cover - type-only import, avoids a cycle
    from .miqp import GridSpec

logger = logging.getLogger(__name__)

# Configuration modes, in the order their binaries appear in a book's mode
# block: three pinned poses, then the two lean directions.
MODE_FLAT_LEFT = 0
MODE_UPRIGHT = 1
MODE_FLAT_RIGHT = 2
MODE_LEAN_LEFT = 3
MODE_LEAN_RIGHT = 4
MODE_NAMES = ("flat_left", "upright", "flat_right", "lean_left", "lean_right")
N_MODES = 5

# Pinned angles for the three non-lean modes.
MODE_ANGLES = {MODE_FLAT_LEFT: -math.pi / 2.0, MODE_UPRIGHT: 0.0,
               MODE_FLAT_RIGHT: math.pi / 2.0}

# Ground-contact tolerance for the lean rows (K3/L3).
GROUND_TOL = 1e-3

# Grid kinds, one per class of variable that appears in a bilinear product.
GRID_KINDS = ("rot_cos", "rot_sin", "plane", "vert_x", "vert_y")

# Constraint family sets used by the consensus split.
ALL_FAMILIES = ("A", "B", "C", "D", "E", "F", "G",
                "H1", "I1", "J1", "K1", "K2", "K3", "L1", "L2", "L3")
MI_LINEAR_FAMILIES = frozenset(
    ["A", "B", "D", "G", "H1", "I1", "J1", "K2", "K3", "L2", "L3"])
NONLINEAR_FAMILIES = frozenset(
    ["A", "B", "C", "D", "E", "F", "H1", "I1", "J1",
     "K1", "K2", "K3", "L1", "L2", "L3"])


@dataclass(frozen=True)
class Shelf:
    """Shelf interior, x in [-width/2, width/2], y in [0, height]."""

    width: float = 18.0
    height: float = 11.0

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("shelf dimensions must be positive")


@dataclass(frozen=True)
class BookGeometry:
    """Book cross-section; width across the spine, height along it."""

    width: float
    height: float

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("book dimensions must be positive")


@dataclass(frozen=True)
class Pose:
    """Center position and rotation (counterclockwise, 0 = upright)."""

    x: float
    y: float
    theta: float


@dataclass(frozen=True)
class StoredBook:
    geom: BookGeometry
    pose: Pose


# Body-frame vertex offsets in units of (width/2, height/2), k = 1..4:
# top-left, bottom-left, bottom-right, top-right.
_VERTEX_SIGNS = ((-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (1.0, 1.0))


def vertex_positions(pose: Pose, geom: BookGeometry) -> np.ndarray:
    """World positions of the four rectangle corners, rows k = 1..4."""
    c = math.cos(pose.theta)
    s = math.sin(pose.theta)
    out = np.empty((4, 2))
    for k, (sx, sy) in enumerate(_VERTEX_SIGNS):
        hx = sx * geom.width / 2.0
        hy = sy * geom.height / 2.0
        out[k, 0] = pose.x + c * hx - s * hy
        out[k, 1] = pose.y + s * hx + c * hy
    return out


@dataclass(frozen=True)
class ProblemParams:
    """Scene parameters: shelf, stored books, and the book to insert."""

    shelf: Shelf
    stored: tuple[StoredBook, ...]
    new_book: BookGeometry
    allow_lean: bool = True
    # Optional override for the chain slot of the new book (0..len(stored)).
    # None derives the slot from the largest free horizontal run.
    insert_slot: int | None = None

    @property
    def n_books(self) -> int:
        return len(self.stored) + 1

    def to_theta(self) -> np.ndarray:
        """Flatten to the parameter vector: (x, y, theta, w, h) per stored
        book followed by (w, h) of the new book."""
        vals: list[float] = []
        for b in self.stored:
            vals.extend([b.pose.x, b.pose.y, b.pose.theta,
                         b.geom.width, b.geom.height])
        vals.extend([self.new_book.width, self.new_book.height])
        return np.asarray(vals)

    @classmethod
    def from_theta(cls, theta: Sequence[float], shelf: Shelf = Shelf(),
                   allow_lean: bool = True,
                   insert_slot: int | None = None) -> "ProblemParams":
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 1 or theta.size < 7 or (theta.size - 2) % 5 != 0:
            raise ValueError(
                f"parameter vector must have 5*n_stored + 2 entries, "
                f"got shape {theta.shape}")
        stored = []
        for i in range((theta.size - 2) // 5):
            x, y, ang, w, h = theta[5 * i:5 * i + 5]
            stored.append(StoredBook(BookGeometry(w, h), Pose(x, y, ang)))
        new_book = BookGeometry(theta[-2], theta[-1])
        return cls(shelf=shelf, stored=tuple(stored), new_book=new_book,
                   allow_lean=allow_lean, insert_slot=insert_slot)


@dataclass(frozen=True)
class BilinearTerm:
    """One lifted product x[r] = x[p] * x[q] with grid kinds of the factors."""

    r: int
    p: int
    q: int
    kind_p: str
    kind_q: str


@dataclass(frozen=True)
class DecisionVector:
    """Index layout of the decision vector.

    Block order: poses (2 per book), rotation entries (2), vertices (8),
    planes (3 per pair), products (1 per bilinear term), mode binaries
    (5 per book).
    """

    n_books: int
    n_pairs: int
    n_products: int

    @property
    def pose_offset(self) -> int:
        return 0

    @property
    def rot_offset(self) -> int:
        return 2 * self.n_books

    @property
    def vert_offset(self) -> int:
        return 4 * self.n_books

    @property
    def plane_offset(self) -> int:
        return 12 * self.n_books

    @property
    def prod_offset(self) -> int:
        return 12 * self.n_books + 3 * self.n_pairs

    @property
    def mode_offset(self) -> int:
        return self.prod_offset + self.n_products

    @property
    def dim(self) -> int:
        return self.mode_offset + N_MODES * self.n_books

    def pose(self, i: int) -> slice:
        return slice(2 * i, 2 * i + 2)

    def rot(self, i: int) -> slice:
        """Indices of (cos theta, sin theta) for book i."""
        o = self.rot_offset + 2 * i
        return slice(o, o + 2)

    def vertex(self, i: int, k: int) -> slice:
        """Indices of vertex k (1-based, 1..4) of book i."""
        if not 1 <= k <= 4:
            raise ValueError(f"vertex index must be 1..4, got {k}")
        o = self.vert_offset + 8 * i + 2 * (k - 1)
        return slice(o, o + 2)

    def plane(self, p: int) -> slice:
        """Indices of (a_x, a_y, b) for pair p."""
        o = self.plane_offset + 3 * p
        return slice(o, o + 3)

    def product(self, s: int) -> int:
        return self.prod_offset + s

    def mode(self, i: int) -> slice:
        o = self.mode_offset + N_MODES * i
        return slice(o, o + N_MODES)


@dataclass(frozen=True)
class Pair:
    """Unordered book pair with its separating plane; ``left``/``right``
    give the side assignment (chain order)."""

    index: int
    i: int
    j: int
    left: int
    right: int


@dataclass(frozen=True)
class FormulationStats:
    dim: int
    n_rows: int
    n_binaries: int
    n_products: int
    n_pairs: int


class _RowBuilder:
    """Accumulates sparse two-sided rows with family tags."""

    def __init__(self, n: int) -> None:
        self.n = n
        self._rows: list[int] = []
        self._cols: list[int] = []
        self._vals: list[float] = []
        self._lo: list[float] = []
        self._hi: list[float] = []
        self._family: list[str] = []

    def add(self, cols: Iterable[int], vals: Iterable[float],
            lo: float, hi: float, family: str) -> None:
        r = len(self._lo)
        for c, v in zip(cols, vals):
            self._rows.append(r)
            self._cols.append(c)
            self._vals.append(v)
        self._lo.append(lo)
        self._hi.append(hi)
        self._family.append(family)

    def build(self) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray, np.ndarray]:
        m = len(self._lo)
        mat = sp.csr_matrix(
            (self._vals, (self._rows, self._cols)), shape=(m, self.n))
        return (mat, np.asarray(self._lo), np.asarray(self._hi),
                np.asarray(self._family, dtype=object))


@dataclass
class ProblemFormulation:
    """Lifted mixed-integer formulation of one scene."""

    params: ProblemParams
    layout: DecisionVector
    rows: sp.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    row_family: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    binary_indices: np.ndarray
    bilinear: tuple[BilinearTerm, ...]
    q_diag: np.ndarray
    x_goal: np.ndarray
    grids: "GridSpec"
    chain: tuple[int, ...]  # book indices ordered left to right
    pairs: tuple[Pair, ...]
    big_m: float

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def linear_ineq(self) -> tuple[sp.csr_matrix, np.ndarray]:
        """Single-sided view A x <= h (each equality contributes two rows)."""
        up = np.isfinite(self.row_hi)
        lo = np.isfinite(self.row_lo)
        mat = sp.vstack([self.rows[up], -self.rows[lo]], format="csr")
        h = np.concatenate([self.row_hi[up], -self.row_lo[lo]])
        return mat, h

    @property
    def stats(self) -> FormulationStats:
        return FormulationStats(
            dim=self.layout.dim, n_rows=self.rows.shape[0],
            n_binaries=int(self.binary_indices.size),
            n_products=len(self.bilinear), n_pairs=len(self.pairs))

    def chain_rank(self, book: int) -> int:
        return self.chain.index(book)

    def pair_between(self, i: int, j: int) -> Pair:
        lo, hi = (i, j) if i < j else (j, i)
        for p in self.pairs:
            if p.i == lo and p.j == hi:
                return p
        raise KeyError(f"no pair for books {i}, {j}")

    def lean_partner(self, book: int, direction: int) -> int | None:
        """Chain neighbor of ``book``; None means the shelf wall."""
        rank = self.chain_rank(book)
        if direction == MODE_LEAN_LEFT:
            return self.chain[rank - 1] if rank > 0 else None
        if direction == MODE_LEAN_RIGHT:
            if rank < len(self.chain) - 1:
                return self.chain[rank + 1]
            return None
        raise ValueError(f"not a lean mode: {direction}")


def _book_geoms(params: ProblemParams) -> list[BookGeometry]:
    return [b.geom for b in params.stored] + [params.new_book]


def _horizontal_extent(book: StoredBook) -> tuple[float, float]:
    vx = vertex_positions(book.pose, book.geom)[:, 0]
    return float(vx.min()), float(vx.max())


def derive_chain(params: ProblemParams) -> tuple[int, ...]:
    """Left-to-right book order; the new book takes the slot with the
    largest free horizontal run (leftmost on ties)."""
    n_stored = len(params.stored)
    order = sorted(range(n_stored), key=lambda i: params.stored[i].pose.x)
    if params.insert_slot is not None:
        slot = params.insert_slot
        if not 0 <= slot <= n_stored:
            raise ValueError(f"insert_slot must be 0..{n_stored}, got {slot}")
    else:
        half_w = params.shelf.width / 2.0
        edges = [-half_w]
        for i in order:
            lo, hi = _horizontal_extent(params.stored[i])
            edges.extend([lo, hi])
        edges.append(half_w)
        runs = [edges[2 * k + 1] - edges[2 * k] for k in range(n_stored + 1)]
        slot = int(np.argmax(runs))
    chain = [order[i] for i in range(slot)]
    chain.append(n_stored)  # the new book's index
    chain.extend(order[i] for i in range(slot, n_stored))
    return tuple(chain)


def _enumerate_bilinear(layout: DecisionVector,
                        pairs: Sequence[Pair]) -> list[BilinearTerm]:
    terms: list[BilinearTerm] = []
    s = 0

    def add(p: int, q: int, kp: str, kq: str) -> None:
        nonlocal s
        terms.append(BilinearTerm(layout.product(s), p, q, kp, kq))
        s += 1

    for i in range(layout.n_books):
        rc = layout.rot(i).start
        add(rc, rc, "rot_cos", "rot_cos")          # c_i^2
        add(rc + 1, rc + 1, "rot_sin", "rot_sin")  # s_i^2
    for pr in pairs:
        pl = layout.plane(pr.index).start
        add(pl, pl, "plane", "plane")          # a_x^2
        add(pl + 1, pl + 1, "plane", "plane")  # a_y^2
    for pr in pairs:
        pl = layout.plane(pr.index).start
        for book in (pr.i, pr.j):
            for k in range(1, 5):
                v = layout.vertex(book, k).start
                add(pl, v, "plane", "vert_x")          # a_x * v_x
                add(pl + 1, v + 1, "plane", "vert_y")  # a_y * v_y
    return terms


def _product_lookup(terms: Sequence[BilinearTerm]) -> dict[tuple[int, int], int]:
    return {(t.p, t.q): t.r for t in terms}


def _interval_product(lp: float, up: float, lq: float, uq: float,
                      square: bool) -> tuple[float, float]:
    if square:
        hi = max(lp * lp, up * up)
        lo = 0.0 if lp <= 0.0 <= up else min(lp * lp, up * up)
        return lo, hi
    cands = (lp * lq, lp * uq, up * lq, up * uq)
    return min(cands), max(cands)


def build_problem(params: ProblemParams, grids: "GridSpec") -> ProblemFormulation:
    """Assemble the lifted formulation for one scene.

    Every grid kind used by a bilinear factor must be present in ``grids``.
    """
    n = params.n_books
    if n < 2:
        raise ValueError("need at least one stored book plus the new book")
    chain = derive_chain(params)
    rank = {b: r for r, b in enumerate(chain)}

    pairs = []
    idx = 0
    for i in range(n):
        for j in range(i + 1, n):
            left, right = (i, j) if rank[i] < rank[j] else (j, i)
            pairs.append(Pair(idx, i, j, left, right))
            idx += 1
    pairs = tuple(pairs)

    layout = DecisionVector(n_books=n, n_pairs=len(pairs),
                            n_products=0)  # placeholder for enumeration
    terms = _enumerate_bilinear(layout, pairs)
    layout = DecisionVector(n_books=n, n_pairs=len(pairs),
                            n_products=len(terms))
    # Re-enumerate with the final product offset.
    terms = _enumerate_bilinear(layout, pairs)

    for t in terms:
        for kind in (t.kind_p, t.kind_q):
            grids.lookup(kind)  # raises on a missing kind

    shelf = params.shelf
    half_w = shelf.width / 2.0
    big_m = 2.0 * (shelf.width + shelf.height)
    geoms = _book_geoms(params)

    # Bounds.
    lb = np.full(layout.dim, -np.inf)
    ub = np.full(layout.dim, np.inf)
    for i in range(n):
        lb[layout.pose(i)] = (-half_w, 0.0)
        ub[layout.pose(i)] = (half_w, shelf.height)
        lb[layout.rot(i)] = (0.0, -1.0)   # c >= 0 encodes the angle range
        ub[layout.rot(i)] = (1.0, 1.0)
        for k in range(1, 5):
            lb[layout.vertex(i, k)] = (-half_w, 0.0)
            ub[layout.vertex(i, k)] = (half_w, shelf.height)
        lb[layout.mode(i)] = 0.0
        ub[layout.mode(i)] = 1.0
        if not params.allow_lean:
            ub[layout.mode(i).start + MODE_LEAN_LEFT] = 0.0
            ub[layout.mode(i).start + MODE_LEAN_RIGHT] = 0.0
    b_bound = math.hypot(half_w, shelf.height)
    for pr in pairs:
        lb[layout.plane(pr.index)] = (-1.0, -1.0, -b_bound)
        ub[layout.plane(pr.index)] = (1.0, 1.0, b_bound)
    for t in terms:
        lo, hi = _interval_product(lb[t.p], ub[t.p], lb[t.q], ub[t.q],
                                   square=t.p == t.q)
        lb[t.r], ub[t.r] = lo, hi

    binary_indices = np.concatenate(
        [np.arange(layout.mode(i).start, layout.mode(i).stop)
         for i in range(n)])

    prod = _product_lookup(terms)
    rows = _RowBuilder(layout.dim)

    # A: vertex definition, and B: vertices inside the shelf.
    for i in range(n):
        px, py = layout.pose(i).start, layout.pose(i).start + 1
        rc, rs = layout.rot(i).start, layout.rot(i).start + 1
        for k, (sx, sy) in enumerate(_VERTEX_SIGNS, start=1):
            hx = sx * geoms[i].width / 2.0
            hy = sy * geoms[i].height / 2.0
            vx = layout.vertex(i, k).start
            vy = vx + 1
            rows.add([vx, px, rc, rs], [1.0, -1.0, -hx, hy], 0.0, 0.0, "A")
            rows.add([vy, py, rs, rc], [1.0, -1.0, -hx, -hy], 0.0, 0.0, "A")
            rows.add([vx], [1.0], -half_w, half_w, "B")
            rows.add([vy], [1.0], 0.0, shelf.height, "B")

    # C: c^2 + s^2 = 1, and D: c >= 0.
    for i in range(n):
        rc, rs = layout.rot(i).start, layout.rot(i).start + 1
        rows.add([prod[(rc, rc)], prod[(rs, rs)]], [1.0, 1.0], 1.0, 1.0, "C")
        rows.add([rc], [1.0], 0.0, np.inf, "D")

    # E: separating planes, F: normal normalization.
    for pr in pairs:
        pl = layout.plane(pr.index)
        ax, ay, b = pl.start, pl.start + 1, pl.start + 2
        rows.add([prod[(ax, ax)], prod[(ay, ay)]], [1.0, 1.0], 1.0, 1.0, "F")
        for book, sign in ((pr.left, 1.0), (pr.right, -1.0)):
            for k in range(1, 5):
                v = layout.vertex(book, k).start
                rx, ry = prod[(ax, v)], prod[(ay, v + 1)]
                # left book: a.v - b <= 0;  right book: b - a.v <= 0
                rows.add([rx, ry, b], [sign, sign, -sign], -np.inf, 0.0, "E")

    # G: one configuration per book.
    for i in range(n):
        m = layout.mode(i)
        rows.add(range(m.start, m.stop), [1.0] * N_MODES, 1.0, 1.0, "G")

    # H1/I1/J1: pinned poses under big-M.  Only the side not already covered
    # by variable bounds is emitted.
    for i in range(n):
        rc, rs = layout.rot(i).start, layout.rot(i).start + 1
        m = layout.mode(i).start
        z_fl = m + MODE_FLAT_LEFT
        z_up = m + MODE_UPRIGHT
        z_fr = m + MODE_FLAT_RIGHT
        v = {k: layout.vertex(i, k).start for k in range(1, 5)}
        # flat right: c = 0, s = 1, vertices 1 and 2 grounded
        rows.add([rc, z_fr], [1.0, big_m], -np.inf, big_m, "H1")
        rows.add([rs, z_fr], [-1.0, big_m], -np.inf, big_m - 1.0, "H1")
        rows.add([v[1] + 1, z_fr], [1.0, big_m], -np.inf, big_m, "H1")
        rows.add([v[2] + 1, z_fr], [1.0, big_m], -np.inf, big_m, "H1")
        # upright: c = 1, s = 0, vertices 2 and 3 grounded
        rows.add([rc, z_up], [-1.0, big_m], -np.inf, big_m - 1.0, "I1")
        rows.add([rs, z_up], [1.0, big_m], -np.inf, big_m, "I1")
        rows.add([rs, z_up], [-1.0, big_m], -np.inf, big_m, "I1")
        rows.add([v[2] + 1, z_up], [1.0, big_m], -np.inf, big_m, "I1")
        rows.add([v[3] + 1, z_up], [1.0, big_m], -np.inf, big_m, "I1")
        # flat left: c = 0, s = -1, vertices 3 and 4 grounded
        rows.add([rc, z_fl], [1.0, big_m], -np.inf, big_m, "J1")
        rows.add([rs, z_fl], [1.0, big_m], -np.inf, big_m - 1.0, "J1")
        rows.add([v[3] + 1, z_fl], [1.0, big_m], -np.inf, big_m, "J1")
        rows.add([v[4] + 1, z_fl], [1.0, big_m], -np.inf, big_m, "J1")

    # K/L: lean rows.  The contact plane crosses the top-right vertex of the
    # pair's left book and the top-left vertex of the right book; the leaner
    # pivots on its grounded bottom corner (bottom-right when leaning right,
    # bottom-left when leaning left) and its center stays between that pivot
    # and the partner.  Wall partners need no plane variables.
    for i in range(n):
        m = layout.mode(i).start
        ll = m + MODE_LEAN_LEFT
        lr = m + MODE_LEAN_RIGHT
        px = layout.pose(i).start
        v2 = layout.vertex(i, 2).start
        v3 = layout.vertex(i, 3).start

        for direction, ind, fam in ((MODE_LEAN_RIGHT, lr, "K"),
                                    (MODE_LEAN_LEFT, ll, "L")):
            rank_i = rank[i]
            if direction == MODE_LEAN_RIGHT:
                partner = (chain[rank_i + 1]
                           if rank_i < len(chain) - 1 else None)
            else:
                partner = chain[rank_i - 1] if rank_i > 0 else None

            if partner is None:
                # Wall contact: the relevant vertex sits on the wall plane.
                if direction == MODE_LEAN_RIGHT:
                    v4x = layout.vertex(i, 4).start
                    rows.add([v4x, ind], [-1.0, big_m], -np.inf,
                             big_m - half_w, fam + "1")
                else:
                    v1x = layout.vertex(i, 1).start
                    rows.add([v1x, ind], [1.0, big_m], -np.inf,
                             big_m - half_w, fam + "1")
            else:
                pr = next(p for p in pairs
                          if {p.i, p.j} == {i, partner})
                pl = layout.plane(pr.index)
                ax, ay, b = pl.start, pl.start + 1, pl.start + 2
                for book, k in ((pr.left, 4), (pr.right, 1)):
                    vv = layout.vertex(book, k).start
                    rx, ry = prod[(ax, vv)], prod[(ay, vv + 1)]
                    rows.add([rx, ry, b, ind], [1.0, 1.0, -1.0, big_m],
                             -np.inf, big_m, fam + "1")
                    rows.add([rx, ry, b, ind], [-1.0, -1.0, 1.0, big_m],
                             -np.inf, big_m, fam + "1")
                # Stability toward the partner's center.
                tx = layout.pose(partner).start
                if direction == MODE_LEAN_RIGHT:
                    rows.add([px, tx, ind], [1.0, -1.0, big_m],
                             -np.inf, big_m, fam + "2")
                else:
                    rows.add([tx, px, ind], [1.0, -1.0, big_m],
                             -np.inf, big_m, fam + "2")
            # Stability about the grounded pivot, and ground contact.
            if direction == MODE_LEAN_RIGHT:
                rows.add([v3, px, ind], [1.0, -1.0, big_m],
                         -np.inf, big_m, "K2")
                rows.add([v3 + 1, ind], [1.0, big_m],
                         -np.inf, big_m + GROUND_TOL, "K3")
            else:
                rows.add([px, v2, ind], [1.0, -1.0, big_m],
                         -np.inf, big_m, "L2")
                rows.add([v2 + 1, ind], [1.0, big_m],
                         -np.inf, big_m + GROUND_TOL, "L3")

    mat, row_lo, row_hi, row_family = rows.build()

    # Objective: keep the stored books where they are.  Positions weigh
    # 1/cm^2; angles weigh 25/rad^2, applied to the rotation entries (for
    # small deviations (c-c0)^2 + (s-s0)^2 tracks the squared angle change).
    q_diag = np.zeros(layout.dim)
    x_goal = np.zeros(layout.dim)
    for i, book in enumerate(params.stored):
        q_diag[layout.pose(i)] = 1.0
        q_diag[layout.rot(i)] = 25.0
        x_goal[layout.pose(i)] = (book.pose.x, book.pose.y)
        x_goal[layout.rot(i)] = (math.cos(book.pose.theta),
                                 math.sin(book.pose.theta))

    return ProblemFormulation(
        params=params, layout=layout, rows=mat, row_lo=row_lo, row_hi=row_hi,
        row_family=row_family, lb=lb, ub=ub, binary_indices=binary_indices,
        bilinear=tuple(terms), q_diag=q_diag, x_goal=x_goal, grids=grids,
        chain=chain, pairs=pairs, big_m=big_m)


def objective_value(f: ProblemFormulation, x: np.ndarray) -> float:
    """Weighted squared deviation from the goal vector."""
    d = np.asarray(x) - f.x_goal
    return float(np.dot(f.q_diag * d, d))


@dataclass(frozen=True)
class ViolationReport:
    """Worst-case constraint violations of a candidate vector."""

    linear: dict[str, float]   # per-family max violation of the rows
    bounds: float
    integrality: float         # max distance of a binary to {0, 1}
    bilinear: float            # max |x[r] - x[p] x[q]|

    @property
    def linear_max(self) -> float:
        return max(self.linear.values(), default=0.0)

    @property
    def continuous_max(self) -> float:
        return max(self.linear_max, self.bounds, self.bilinear)

    @property
    def max_violation(self) -> float:
        return max(self.continuous_max, self.integrality)

    def feasible(self, tol: float, include_integrality: bool = True) -> bool:
        v = self.max_violation if include_integrality else self.continuous_max
        return v <= tol

    def summary(self) -> str:
        worst = max(self.linear, key=lambda k: self.linear[k], default="-")
        return (f"max {self.max_violation:.3e} (worst family {worst}, "
                f"bounds {self.bounds:.1e}, int {self.integrality:.1e}, "
                f"bilinear {self.bilinear:.1e})")


def evaluate_constraints(f: ProblemFormulation, x: np.ndarray,
                         families: Iterable[str] | None = None
                         ) -> ViolationReport:
    """Violation report for ``x``; ``families`` restricts the linear rows."""
    x = np.asarray(x, dtype=float)
    if x.shape != (f.layout.dim,):
        raise ValueError(f"expected vector of length {f.layout.dim}, "
                         f"got shape {x.shape}")
    ax = f.rows @ x
    over = np.maximum(ax - f.row_hi, 0.0)
    under = np.maximum(f.row_lo - ax, 0.0)
    viol = np.maximum(over, under)
    wanted = set(families) if families is not None else None
    per_family: dict[str, float] = {}
    for fam in ALL_FAMILIES:
        if wanted is not None and fam not in wanted:
            continue
        mask = f.row_family == fam
        per_family[fam] = float(viol[mask].max()) if mask.any() else 0.0

    bounds = float(np.maximum(np.maximum(f.lb - x, x - f.ub), 0.0).max())
    zs = x[f.binary_indices]
    integrality = float(np.abs(zs - np.round(zs)).max()) if zs.size else 0.0
    if f.bilinear:
        res = [abs(x[t.r] - x[t.p] * x[t.q]) for t in f.bilinear]
        bilinear = float(max(res))
    else:
        bilinear = 0.0
    return ViolationReport(linear=per_family, bounds=bounds,
                           integrality=integrality, bilinear=bilinear)


@dataclass(frozen=True)
class SceneBook:
    """One placed book of a concrete scene (generator output, witnesses)."""

    geom: BookGeometry
    pose: Pose
    mode: int


def assemble_vector(f: ProblemFormulation, books: Sequence[SceneBook],
                    planes: dict[int, tuple[float, float, float]] | None = None
                    ) -> np.ndarray:
    """Build a full decision vector from per-book poses and modes.

    ``books`` is indexed like the formulation (stored books first, new book
    last).  ``planes`` optionally maps a pair index to (a_x, a_y, b); pairs
    without an entry get a vertical plane through the horizontal midpoint
    between the two books' extents, oriented to match the pair's side
    assignment.  Vertices, rotation entries, products and mode one-hots are
    filled in consistently.
    """
    if len(books) != f.layout.n_books:
        raise ValueError(f"expected {f.layout.n_books} books, got {len(books)}")
    x = np.zeros(f.layout.dim)
    verts = []
    for i, bk in enumerate(books):
        x[f.layout.pose(i)] = (bk.pose.x, bk.pose.y)
        x[f.layout.rot(i)] = (math.cos(bk.pose.theta),
                              math.sin(bk.pose.theta))
        vv = vertex_positions(bk.pose, bk.geom)
        verts.append(vv)
        for k in range(1, 5):
            x[f.layout.vertex(i, k)] = vv[k - 1]
        x[f.layout.mode(i).start + bk.mode] = 1.0
    for pr in f.pairs:
        if planes is not None and pr.index in planes:
            x[f.layout.plane(pr.index)] = planes[pr.index]
            continue
        gap_lo = verts[pr.left][:, 0].max()
        gap_hi = verts[pr.right][:, 0].min()
        x[f.layout.plane(pr.index)] = (1.0, 0.0, (gap_lo + gap_hi) / 2.0)
    for t in f.bilinear:
        x[t.r] = x[t.p] * x[t.q]
    return x
