import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ietidp.errors import KnotVectorError, SingularGeometryError
from ietidp.splines import (
    GeometryMap,
    KnotVector,
    PatchMesh,
    TensorBasis,
    affine_map,
    collocation_matrix,
    eval_basis,
    eval_basis_deriv,
    find_span,
    identity_map,
    make_open_knot_vector,
    map_eval,
    refine_geometry,
)


def cox_de_boor(knots, p, i, x):
    """Textbook recursion, used as an independent oracle."""
    t = knots
    if p == 0:
        if t[i] <= x < t[i + 1]:
            return 1.0
        # closure at the right end of the last non-empty span
        if x == t[-1] and t[i] < t[i + 1] == t[-1]:
            return 1.0
        return 0.0
    out = 0.0
    if t[i + p] > t[i]:
        out += (x - t[i]) / (t[i + p] - t[i]) * cox_de_boor(t, p - 1, i, x)
    if t[i + p + 1] > t[i + 1]:
        out += (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * cox_de_boor(t, p - 1, i + 1, x)
    return out


def full_values(kv, x):
    first, vals = eval_basis(kv, x)
    out = np.zeros(kv.size)
    out[first:first + vals.size] = vals
    return out


knot_vectors = st.builds(make_open_knot_vector, st.integers(1, 4), st.integers(1, 6))


class TestKnotVector:
    def test_examples(self):
        kv = make_open_knot_vector(1, 1)
        assert kv.knots.tolist() == [0, 0, 1, 1] and kv.size == 2
        kv = make_open_knot_vector(2, 2)
        assert kv.knots.tolist() == [0, 0, 0, 0.5, 1, 1, 1] and kv.size == 4
        assert make_open_knot_vector(3, 4).size == 7

    @pytest.mark.parametrize("p,e", [(0, 1), (1, 0), (-1, 3)])
    def test_rejects_bad_arguments(self, p, e):
        with pytest.raises(KnotVectorError):
            make_open_knot_vector(p, e)

    @pytest.mark.parametrize("knots", [[0, 0, 1], [0, 0.5, 1, 1], [0, 0, 0.7, 0.3, 1, 1], [0, 0, 2, 2]])
    def test_rejects_invalid_knots(self, knots):
        with pytest.raises(KnotVectorError):
            KnotVector(1, knots)

    @given(knot_vectors)
    def test_counts(self, kv):
        assert kv.size == len(kv.knots) - kv.degree - 1 == kv.n_elements + kv.degree
        assert kv.greville[0] == 0.0 and kv.greville[-1] == 1.0

    def test_span_at_right_end(self):
        kv = make_open_knot_vector(2, 4)
        assert find_span(kv, 1.0) == kv.size - 1
        assert find_span(kv, 0.0) == kv.degree


class TestBasis:
    def test_linear_hats(self):
        kv = make_open_knot_vector(1, 1)
        first, v = eval_basis(kv, 0.25)
        assert first == 0
        np.testing.assert_allclose(v, [0.75, 0.25])
        _, dv = eval_basis_deriv(kv, 0.6)
        np.testing.assert_allclose(dv, [-1.0, 1.0])

    def test_quadratic_midpoint(self):
        kv = make_open_knot_vector(2, 2)
        vals = full_values(kv, 0.5)
        oracle = [cox_de_boor(kv.knots, 2, i, 0.5) for i in range(kv.size)]
        np.testing.assert_allclose(vals, oracle, atol=1e-15)
        np.testing.assert_allclose(vals, [0, 0.5, 0.5, 0], atol=1e-15)

    @given(knot_vectors, st.floats(0, 1))
    def test_matches_recursive_oracle(self, kv, x):
        oracle = [cox_de_boor(kv.knots, kv.degree, i, x) for i in range(kv.size)]
        np.testing.assert_allclose(full_values(kv, x), oracle, atol=1e-13)

    def test_partition_of_unity(self, rng):
        for p, e in [(1, 3), (2, 5), (3, 7), (4, 2)]:
            kv = make_open_knot_vector(p, e)
            A = collocation_matrix(kv, rng.uniform(size=10_000))
            assert np.abs(A.sum(axis=1) - 1).max() < 1e-12
            assert A.min() >= 0

    @given(knot_vectors, st.floats(0, 1))
    def test_local_support(self, kv, x):
        vals = full_values(kv, x)
        t = kv.knots
        for i, v in enumerate(vals):
            if x < t[i] or x > t[i + kv.degree + 1]:
                assert v == 0.0

    @given(knot_vectors, st.floats(0, 1))
    def test_derivatives_sum_to_zero(self, kv, x):
        _, dv = eval_basis_deriv(kv, x)
        assert abs(dv.sum()) < 1e-10 * max(1.0, np.abs(dv).max())

    def test_derivative_finite_difference(self):
        kv = make_open_knot_vector(2, 4)
        x, h = 0.3, 1e-6
        first, dv = eval_basis_deriv(kv, x)
        fd = (full_values(kv, x + h) - full_values(kv, x - h)) / (2 * h)
        full = np.zeros(kv.size)
        full[first:first + dv.size] = dv
        np.testing.assert_allclose(full, fd, atol=1e-6)

    @pytest.mark.parametrize("x", [-0.1, 1.0001, np.nan])
    def test_rejects_points_outside(self, x):
        with pytest.raises(ValueError):
            eval_basis(make_open_knot_vector(2, 2), x)


class TestTensorBasis:
    @given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 4)), min_size=2, max_size=3))
    def test_dimension_is_product(self, spec):
        b = TensorBasis([make_open_knot_vector(p, e) for p, e in spec])
        assert b.size == np.prod([e + p for p, e in spec])
        assert len(b.multi_indices()) == b.size

    def test_first_index_fastest(self):
        b = TensorBasis([make_open_knot_vector(1, 2), make_open_knot_vector(2, 1)])
        assert b.flat_index((1, 0)) == 1
        assert b.flat_index((0, 1)) == 3
        assert b.multi_indices()[:4] == [(0, 0), (1, 0), (2, 0), (0, 1)]


class TestGeometry:
    def test_identity(self):
        b = TensorBasis([make_open_knot_vector(1, 1)] * 2)
        x, J, det = map_eval(identity_map(b), [0.3, 0.7])
        np.testing.assert_allclose(x, [0.3, 0.7], atol=1e-15)
        np.testing.assert_allclose(J, np.eye(2), atol=1e-15)
        assert det == pytest.approx(1.0)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_identity_higher_degree_3d(self, a, b_, c):
        b = TensorBasis([make_open_knot_vector(3, 2), make_open_knot_vector(2, 3), make_open_knot_vector(1, 2)])
        x, J, _ = map_eval(identity_map(b), [a, b_, c])
        np.testing.assert_allclose(x, [a, b_, c], atol=1e-14)
        np.testing.assert_allclose(J, np.eye(3), atol=1e-13)

    def test_affine_scaling(self):
        b = TensorBasis([make_open_knot_vector(1, 1)] * 2)
        x, _, det = map_eval(affine_map(b, np.diag([2.0, 1.0]), [0, 0]), [0.5, 0.5])
        np.testing.assert_allclose(x, [1.0, 0.5])
        assert det == pytest.approx(2.0)

    def test_jacobian_finite_difference(self):
        # quarter-annulus-like bilinear patch with a perturbed control point
        b = TensorBasis([make_open_knot_vector(2, 1), make_open_knot_vector(1, 1)])
        P = np.array([[1, 0], [1, 1], [0, 1], [2, 0], [2.1, 2.2], [0, 2]], dtype=float)
        G = GeometryMap(b, P)
        xi, h = np.array([0.5, 0.5]), 1e-6
        _, J, det = map_eval(G, xi)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (map_eval(G, xi + e)[0] - map_eval(G, xi - e)[0]) / (2 * h)
            np.testing.assert_allclose(J[:, k], fd, atol=1e-6)
        assert det != 0

    def test_singular_map(self):
        b = TensorBasis([make_open_knot_vector(1, 1)] * 2)
        G = GeometryMap(b, np.array([[0, 0], [1, 0], [0, 0], [1, 0]], dtype=float))
        with pytest.raises(SingularGeometryError):
            map_eval(G, [0.5, 0.5])

    def test_refine_geometry_is_exact(self, rng):
        b = TensorBasis([make_open_knot_vector(1, 1)] * 2)
        G = affine_map(b, [[2.0, 0.5], [0.1, 1.0]], [0.3, -1.0])
        fine = TensorBasis([make_open_knot_vector(3, 4)] * 2)
        H = refine_geometry(G, fine)
        for xi in rng.uniform(size=(5, 2)):
            np.testing.assert_allclose(map_eval(G, xi)[0], map_eval(H, xi)[0], atol=1e-13)

    def test_refine_rejects_smaller_space(self):
        b = TensorBasis([make_open_knot_vector(2, 1), make_open_knot_vector(1, 1)])
        P = np.array([[0, 0], [0.5, 0.3], [1, 0], [0, 1], [0.5, 1.3], [1, 1]], dtype=float)
        with pytest.raises(KnotVectorError):
            refine_geometry(GeometryMap(b, P), TensorBasis([make_open_knot_vector(1, 2)] * 2))

    def test_mesh_sizes(self):
        b = TensorBasis([make_open_knot_vector(2, 4)] * 2)
        m = PatchMesh.from_geometry(affine_map(b, np.eye(2) * 0.5, [0, 0]), b)
        assert m.n_elements == 16
        assert m.h == pytest.approx(np.sqrt(2) / 8)
        assert m.H == pytest.approx(np.sqrt(2) / 2)
        assert m.h <= m.H
