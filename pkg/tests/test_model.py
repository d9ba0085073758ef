"""Formulation construction and evaluation against hand-derived values.

Expected numbers were worked out independently: vertex positions from the
rotation matrix applied to corner offsets, dimension/product counts from the
variable layout arithmetic, and violation magnitudes from the constraint
definitions evaluated by hand.
"""

import math

import numpy as np
import pytest

from bookshelf.miqp import GridSpec
from bookshelf.model import (MODE_FLAT_RIGHT, MODE_LEAN_LEFT, MODE_LEAN_RIGHT,
                             MODE_UPRIGHT, BookGeometry, Pose, ProblemParams,
                             SceneBook, Shelf, StoredBook, assemble_vector,
                             build_problem, derive_chain, evaluate_constraints,
                             objective_value, vertex_positions)


def make_params(xs=(-6.0, -2.0, 6.0), w=2.0, h=8.0, new=(3.0, 7.0),
                allow_lean=True, insert_slot=None):
    stored = tuple(StoredBook(BookGeometry(w, h), Pose(x, h / 2.0, 0.0))
                   for x in xs)
    return ProblemParams(shelf=Shelf(), stored=stored,
                         new_book=BookGeometry(*new),
                         allow_lean=allow_lean, insert_slot=insert_slot)


def build_default(**kw):
    params = make_params(**kw)
    return build_problem(params, GridSpec.table_default(params.shelf))


class TestVertices:
    def test_axis_aligned_book(self):
        # 2x4 book centered at (0,2): corners one unit out, two units up/down.
        v = vertex_positions(Pose(0.0, 2.0, 0.0), BookGeometry(2.0, 4.0))
        assert v == pytest.approx(np.array(
            [[-1.0, 4.0], [-1.0, 0.0], [1.0, 0.0], [1.0, 4.0]]))

    def test_quarter_turn(self):
        # Rotating +90 degrees lays the book down; corners derived by
        # applying [[0,-1],[1,0]] to each offset.
        v = vertex_positions(Pose(0.0, 1.0, math.pi / 2.0),
                             BookGeometry(2.0, 4.0))
        assert v == pytest.approx(np.array(
            [[-2.0, 0.0], [2.0, 0.0], [2.0, 2.0], [-2.0, 2.0]]), abs=1e-12)

    def test_diagonal_distances(self):
        # A square book keeps all corners half-diagonal away from center.
        v = vertex_positions(Pose(1.0, 3.0, math.pi / 4.0),
                             BookGeometry(2.0, 2.0))
        dist = np.hypot(v[:, 0] - 1.0, v[:, 1] - 3.0)
        assert dist == pytest.approx(np.full(4, math.sqrt(2.0)))
        # Corner 2 (bottom-left) rotates to point straight down.
        assert v[1] == pytest.approx([1.0, 3.0 - math.sqrt(2.0)])


class TestChain:
    def test_largest_gap_slot(self):
        # Extents [-7,-5], [-3,-1], [5,7]: the 6cm run between the second
        # and third stored books wins, so the new book (index 3) sits there.
        assert derive_chain(make_params()) == (0, 1, 3, 2)

    def test_explicit_slot(self):
        assert derive_chain(make_params(insert_slot=0)) == (3, 0, 1, 2)

    def test_slot_out_of_range(self):
        with pytest.raises(ValueError, match="insert_slot"):
            derive_chain(make_params(insert_slot=4))


class TestLayout:
    def test_two_book_composition(self):
        f = build_default(xs=(-4.0,), allow_lean=False)
        st = f.stats
        # 2 squared rotation entries per book, 2 squared normal entries per
        # pair, 2 plane-vertex products per (pair, book, corner).
        assert st.n_products == 2 * 2 + 2 + 1 * 2 * 4 * 2 == 22
        assert st.n_pairs == 1
        assert st.n_binaries == 10
        # pose 4 + rot 4 + vert 16 + plane 3 + prod 22 + mode 10
        assert st.dim == 59

    def test_four_book_composition(self):
        f = build_default()
        st = f.stats
        assert st.n_pairs == 6
        assert st.n_products == 8 + 12 + 6 * 2 * 4 * 2 == 116
        assert st.dim == 202
        assert st.n_binaries == 20
        lay = f.layout
        assert np.array_equal(
            f.binary_indices,
            np.arange(lay.mode_offset, lay.mode_offset + 20))

    def test_product_bounds_from_intervals(self):
        f = build_default()
        lay = f.layout
        by_factor = {(t.p, t.q): t for t in f.bilinear}
        cc = by_factor[(lay.rot(0).start, lay.rot(0).start)]
        assert (f.lb[cc.r], f.ub[cc.r]) == (0.0, 1.0)
        ss = by_factor[(lay.rot(0).start + 1, lay.rot(0).start + 1)]
        assert (f.lb[ss.r], f.ub[ss.r]) == (0.0, 1.0)
        pl = lay.plane(0).start
        vx = lay.vertex(f.pairs[0].left, 1).start
        av = by_factor[(pl, vx)]
        assert (f.lb[av.r], f.ub[av.r]) == (-9.0, 9.0)

    def test_lean_disabled_pins_mode_bounds(self):
        f = build_default(allow_lean=False)
        for i in range(4):
            m = f.layout.mode(i).start
            assert f.ub[m + MODE_LEAN_LEFT] == 0.0
            assert f.ub[m + MODE_LEAN_RIGHT] == 0.0
            assert f.ub[m + MODE_UPRIGHT] == 1.0

    def test_vertex_index_validation(self):
        lay = build_default().layout
        with pytest.raises(ValueError):
            lay.vertex(0, 0)
        with pytest.raises(ValueError):
            lay.vertex(0, 5)

    def test_missing_grid_kind(self):
        params = make_params()
        with pytest.raises(ValueError, match="missing"):
            build_problem(params, GridSpec({}))

    def test_rejects_single_book(self):
        params = ProblemParams(shelf=Shelf(), stored=(),
                               new_book=BookGeometry(3.0, 7.0))
        with pytest.raises(ValueError):
            build_problem(params, GridSpec.table_default())


class TestNeighbors:
    def test_lean_partners_follow_chain(self):
        f = build_default()  # chain (0, 1, 3, 2)
        assert f.lean_partner(3, MODE_LEAN_LEFT) == 1
        assert f.lean_partner(3, MODE_LEAN_RIGHT) == 2
        assert f.lean_partner(0, MODE_LEAN_LEFT) is None
        assert f.lean_partner(2, MODE_LEAN_RIGHT) is None

    def test_pair_sides(self):
        f = build_default()
        p = f.pair_between(3, 2)
        assert (p.left, p.right) == (3, 2)
        assert f.pair_between(2, 3) is p
        with pytest.raises(KeyError):
            f.pair_between(0, 0)


class TestObjective:
    def test_zero_at_goal(self):
        f = build_default()
        books = [SceneBook(b.geom, b.pose, MODE_UPRIGHT)
                 for b in f.params.stored]
        books.append(SceneBook(f.params.new_book, Pose(2.0, 3.5, 0.0),
                               MODE_UPRIGHT))
        x = assemble_vector(f, books)
        assert objective_value(f, x) == pytest.approx(0.0, abs=1e-18)

    def test_unit_displacements(self):
        f = build_default()
        books = [SceneBook(b.geom, Pose(b.pose.x + 1.0, b.pose.y, 0.0),
                           MODE_UPRIGHT) for b in f.params.stored]
        books.append(SceneBook(f.params.new_book, Pose(2.0, 3.5, 0.0),
                               MODE_UPRIGHT))
        x = assemble_vector(f, books)
        # Three stored books moved 1cm each at unit position weight.
        assert objective_value(f, x) == pytest.approx(3.0)

    def test_matches_componentwise_sum(self):
        f = build_default()
        rng = np.random.default_rng(7)
        x = rng.normal(size=f.dim)
        direct = sum(q * (xi - g) ** 2
                     for q, xi, g in zip(f.q_diag, x, f.x_goal))
        assert objective_value(f, x) == pytest.approx(direct, abs=1e-12)

    def test_new_book_pose_is_free(self):
        f = build_default()
        stored = [SceneBook(b.geom, b.pose, MODE_UPRIGHT)
                  for b in f.params.stored]
        xa = assemble_vector(f, stored + [SceneBook(
            f.params.new_book, Pose(1.0, 3.5, 0.0), MODE_UPRIGHT)])
        xb = assemble_vector(f, stored + [SceneBook(
            f.params.new_book, Pose(3.0, 3.5, 0.0), MODE_UPRIGHT)])
        assert objective_value(f, xa) == objective_value(f, xb) == 0.0


def upright_scene(f):
    """Feasible two-book witness: both books upright, well separated."""
    stored = f.params.stored[0]
    books = [SceneBook(stored.geom, stored.pose, MODE_UPRIGHT),
             SceneBook(f.params.new_book,
                       Pose(4.0, f.params.new_book.height / 2.0, 0.0),
                       MODE_UPRIGHT)]
    return assemble_vector(f, books)


class TestEvaluate:
    def test_feasible_witness(self):
        f = build_default(xs=(-4.0,), w=4.0, new=(4.0, 8.0))
        x = upright_scene(f)
        rep = evaluate_constraints(f, x)
        assert rep.max_violation <= 1e-9
        assert rep.feasible(1e-6)

    def test_broken_rotation_norm(self):
        f = build_default(xs=(-4.0,), w=4.0, new=(4.0, 8.0))
        x = upright_scene(f)
        lay = f.layout
        rc = lay.rot(0).start
        x[rc], x[rc + 1] = 1.0, 1.0
        for t in f.bilinear:
            x[t.r] = x[t.p] * x[t.q]
        rep = evaluate_constraints(f, x)
        # c^2 + s^2 = 2 against the unit requirement.
        assert rep.linear["C"] == pytest.approx(1.0)

    def test_fractional_modes(self):
        f = build_default(xs=(-4.0,), w=4.0, new=(4.0, 8.0))
        x = upright_scene(f)
        x[f.layout.mode(0)] = 0.5
        rep = evaluate_constraints(f, x)
        assert rep.integrality == pytest.approx(0.5)

    def test_product_mismatch(self):
        f = build_default(xs=(-4.0,), w=4.0, new=(4.0, 8.0))
        x = upright_scene(f)
        x[f.bilinear[0].r] += 0.25
        rep = evaluate_constraints(f, x)
        assert rep.bilinear == pytest.approx(0.25)

    def test_bound_excess(self):
        f = build_default(xs=(-4.0,), w=4.0, new=(4.0, 8.0))
        x = upright_scene(f)
        x[f.layout.pose(1).start] = 100.0
        rep = evaluate_constraints(f, x)
        assert rep.bounds == pytest.approx(91.0)

    def test_shape_validation(self):
        f = build_default()
        with pytest.raises(ValueError):
            evaluate_constraints(f, np.zeros(f.dim + 1))

    def test_family_filter(self):
        f = build_default(xs=(-4.0,), w=4.0, new=(4.0, 8.0))
        x = upright_scene(f)
        rep = evaluate_constraints(f, x, families=["A", "B"])
        assert set(rep.linear) == {"A", "B"}

    def test_vertex_rows_consistent_with_geometry(self):
        # Assembled vectors satisfy the vertex-definition rows identically,
        # tying the row coefficients to the rotation applied in
        # vertex_positions.
        rng = np.random.default_rng(3)
        for _ in range(10):
            xs = np.sort(rng.uniform(-6.0, 6.0, size=3))
            params = make_params(xs=tuple(xs))
            f = build_problem(params, GridSpec.table_default())
            books = [SceneBook(b.geom,
                               Pose(b.pose.x, rng.uniform(2.0, 6.0),
                                    rng.uniform(-1.2, 1.2)),
                               MODE_UPRIGHT)
                     for b in params.stored]
            books.append(SceneBook(params.new_book,
                                   Pose(rng.uniform(-6, 6),
                                        rng.uniform(2.0, 6.0),
                                        rng.uniform(-1.2, 1.2)),
                                   MODE_UPRIGHT))
            x = assemble_vector(f, books)
            rep = evaluate_constraints(f, x, families=["A"])
            assert rep.linear["A"] <= 1e-12


class TestTheta:
    def test_round_trip(self):
        params = make_params()
        theta = params.to_theta()
        assert theta.shape == (17,)
        back = ProblemParams.from_theta(theta)
        assert back.to_theta() == pytest.approx(theta)
        assert back.n_books == 4

    def test_flat_order(self):
        b = StoredBook(BookGeometry(2.0, 8.0), Pose(-6.0, 4.0, 0.1))
        params = ProblemParams(shelf=Shelf(), stored=(b,),
                               new_book=BookGeometry(3.0, 7.0))
        assert params.to_theta() == pytest.approx(
            [-6.0, 4.0, 0.1, 2.0, 8.0, 3.0, 7.0])

    def test_bad_length(self):
        with pytest.raises(ValueError):
            ProblemParams.from_theta(np.zeros(11))


class TestGoal:
    def test_targets_stored_books_only(self):
        f = build_default()
        lay = f.layout
        assert f.x_goal[lay.pose(0)] == pytest.approx([-6.0, 4.0])
        assert f.x_goal[lay.rot(0)] == pytest.approx([1.0, 0.0])
        assert f.q_diag[lay.pose(0)] == pytest.approx([1.0, 1.0])
        assert f.q_diag[lay.rot(0)] == pytest.approx([25.0, 25.0])
        # The book being inserted carries no objective weight.
        assert np.all(f.q_diag[lay.pose(3)] == 0.0)
        assert np.all(f.q_diag[lay.mode(3)] == 0.0)
