import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from misalign.basis import (
    HybridBasis,
    JitterPolicy,
    KnotSet,
    bisquare_basis,
    eigendecompose_moran,
    hybrid_basis,
    knot_count,
    moran_operator,
    place_knots,
    spectral_with_jitter,
)
from misalign.errors import InvalidArgumentError, NumericalError
from misalign.geometry import build_grid_layer, grid_adjacency


def random_instance(seed, n=None, p=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(3, 31))
    p = p or int(rng.integers(1, min(n, 5) + 1))
    W = np.triu((rng.random((n, n)) < 0.3).astype(float), 1)
    W = W + W.T
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    return W, X


class TestMoranOperator:
    def test_pair_with_intercept(self):
        S = moran_operator(np.array([[0, 1], [1, 0]]), np.ones((2, 1)))
        np.testing.assert_allclose(S, [[-0.5, 0.5], [0.5, -0.5]], atol=1e-15)

    def test_full_design_annihilates(self):
        W = grid_adjacency(3, 2).toarray()
        np.testing.assert_allclose(moran_operator(W, np.eye(6)), 0.0, atol=1e-12)

    def test_intercept_in_null_space(self):
        S = moran_operator(grid_adjacency(3, 3), np.ones((9, 1)))
        np.testing.assert_allclose(S @ np.ones(9), 0.0, atol=1e-12)

    def test_rank_deficient_names_column(self):
        X = np.column_stack([np.ones(4), np.arange(4.0), 2 * np.arange(4.0)])
        with pytest.raises(InvalidArgumentError, match="column"):
            moran_operator(np.zeros((4, 4)), X)

    def test_asymmetric_W(self):
        with pytest.raises(InvalidArgumentError):
            moran_operator(np.array([[0, 1], [0, 0]]), np.ones((2, 1)))

    def test_matches_explicit_projector(self):
        W, X = random_instance(3, n=12, p=3)
        P = X @ np.linalg.inv(X.T @ X) @ X.T
        I = np.eye(12)
        np.testing.assert_allclose(moran_operator(W, X), (I - P) @ W @ (I - P), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetric_and_annihilates_design(self, seed):
        W, X = random_instance(seed)
        S = moran_operator(W, X)
        assert np.abs(S - S.T).max() <= 1e-10
        assert np.abs(S @ X).max() <= 1e-10


class TestEigen:
    def test_two_by_two(self):
        M, vals = eigendecompose_moran(np.array([[-0.5, 0.5], [0.5, -0.5]]))
        np.testing.assert_allclose(vals, [0.0, -1.0], atol=1e-15)
        np.testing.assert_allclose(M[:, 0], np.ones(2) / np.sqrt(2), atol=1e-15)

    def test_zero_matrix_gives_identity(self):
        M, vals = eigendecompose_moran(np.zeros((4, 4)))
        np.testing.assert_array_equal(vals, 0.0)
        np.testing.assert_array_equal(M, np.eye(4))

    def test_diagonal(self):
        M, vals = eigendecompose_moran(np.diag([3.0, 1.0, 2.0]))
        np.testing.assert_array_equal(vals, [3.0, 2.0, 1.0])
        np.testing.assert_array_equal(M, np.eye(3)[:, [0, 2, 1]])

    def test_asymmetric_rejected(self):
        with pytest.raises(InvalidArgumentError):
            eigendecompose_moran(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_sign_convention(self):
        W, X = random_instance(11, n=20)
        M, _ = eigendecompose_moran(moran_operator(W, X))
        for k in range(M.shape[1]):
            v = M[:, k]
            lead = np.argmax(np.abs(v) >= np.abs(v).max() * (1 - 1e-9))
            assert v[lead] > 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_reconstruction_and_orthogonality(self, seed):
        W, X = random_instance(seed)
        S = moran_operator(W, X)
        M, vals = eigendecompose_moran(S)
        assert np.all(np.diff(vals) <= 1e-12)
        np.testing.assert_allclose(M.T @ M, np.eye(len(vals)), atol=1e-8)
        err = np.linalg.norm(M @ np.diag(vals) @ M.T - S) / max(np.linalg.norm(S), 1.0)
        assert err <= 1e-8

    def test_repeated_eigenvalues_deterministic(self):
        # a ring graph has doubly repeated eigenvalues
        n = 8
        W = np.zeros((n, n))
        for i in range(n):
            W[i, (i + 1) % n] = W[(i + 1) % n, i] = 1
        a = eigendecompose_moran(moran_operator(W, np.ones((n, 1))))
        b = eigendecompose_moran(moran_operator(W, np.ones((n, 1))))
        np.testing.assert_array_equal(a[0], b[0])


class TestKnots:
    def test_count_rule(self):
        assert knot_count(900, 0.10) == 90
        assert knot_count(2, 0.5) == 1
        assert knot_count(100, 0.10) == 10
        assert knot_count(10, 1.0) == 9

    @pytest.mark.parametrize("f", [0.0, -0.1, 1.5])
    def test_bad_fraction(self, f):
        with pytest.raises(InvalidArgumentError):
            knot_count(10, f)

    def test_default_30x30(self):
        layer = build_grid_layer(30, 30, (0, 0, 30, 30))
        assert place_knots(layer).r == 90
        assert place_knots(layer, r=85).r == 85

    def test_single_knot_at_centre(self):
        layer = build_grid_layer(2, 1, (0, 0, 2, 1))
        ks = place_knots(layer, 0.5)
        assert ks.r == 1
        np.testing.assert_allclose(ks.knots, [[1.0, 0.5]])

    def test_10x10_layout(self):
        # centroids span 0.5..9.5; a 4x3 grid has spacings 9/4 and 9/3
        layer = build_grid_layer(10, 10, (0, 0, 10, 10))
        ks = place_knots(layer, 0.10)
        assert ks.r == 10
        assert ks.tau == pytest.approx(1.5 * 9 / 4)
        ys = np.unique(ks.knots[:, 1])
        np.testing.assert_allclose(ys, 0.5 + (np.arange(3) + 0.5) * 3.0)
        assert np.sum(ks.knots[:, 1] == ys[-1]) == 2

    def test_knots_inside_centroid_box(self):
        layer = build_grid_layer(30, 30, (0, 0, 30, 30))
        ks = place_knots(layer, r=85)
        assert ks.knots.min() > 0.5 and ks.knots.max() < 29.5

    def test_override_out_of_range(self):
        layer = build_grid_layer(3, 3, (0, 0, 3, 3))
        with pytest.raises(InvalidArgumentError):
            place_knots(layer, r=9)

    def test_knotset_validation(self):
        with pytest.raises(InvalidArgumentError):
            KnotSet(np.zeros((1, 2)), 0.0)
        with pytest.raises(InvalidArgumentError):
            KnotSet(np.array([[np.nan, 0.0]]), 1.0)


class TestBisquare:
    ks = KnotSet(np.array([[0.0, 0.0]]), 2.0)

    def test_values(self):
        R = bisquare_basis(np.array([[0.0, 0.0], [1.0, 0.0]]), self.ks)
        np.testing.assert_allclose(R[:, 0], [1.0, 0.5625])

    def test_boundary_is_zero(self):
        ks = KnotSet(np.array([[0.0, 0.0], [3.0, 0.0]]), 2.0)
        R = bisquare_basis(np.array([[2.0, 0.0], [3.0, 0.0]]), ks)
        assert R[0, 0] == 0.0

    def test_uncovered_ids_listed(self):
        with pytest.raises(InvalidArgumentError, match="far"):
            bisquare_basis(np.array([[0.0, 0.0], [5.0, 5.0]]), self.ks, ids=["near", "far"])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_range_and_support(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.uniform(0, 10, (25, 2))
        ks = KnotSet(np.vstack([rng.uniform(0, 10, (6, 2)), c[:1]]), float(rng.uniform(0.5, 4)))
        try:
            R = bisquare_basis(c, ks)
        except InvalidArgumentError:
            return
        d = np.linalg.norm(c[:, None] - ks.knots[None], axis=-1)
        assert R.min() >= 0 and R.max() <= 1
        np.testing.assert_array_equal(R == 0, d >= ks.tau)


class TestSpectral:
    def test_no_jitter_when_well_conditioned(self):
        vecs, vals, eps = spectral_with_jitter(np.diag([2.0, 1.0]))
        assert eps == 0.0
        np.testing.assert_array_equal(vals, [2.0, 1.0])

    def test_jitter_on_singular(self):
        A = np.array([[1.0, 1.0], [1.0, 1.0]])
        vecs, vals, eps = spectral_with_jitter(A)
        assert eps == pytest.approx(1e-8 * 2 / 2)
        np.testing.assert_allclose(vecs @ np.diag(vals) @ vecs.T, A + eps * np.eye(2), atol=1e-14)

    def test_negative_definite_fails(self):
        with pytest.raises(NumericalError):
            spectral_with_jitter(np.diag([1.0, -1.0]))

    def test_custom_policy(self):
        _, _, eps = spectral_with_jitter(np.diag([1.0, 1e-3]), JitterPolicy(threshold=1e-2, scale=1e-1))
        assert eps == pytest.approx(0.1 * 1.001 / 2)


class TestHybridBasis:
    def test_two_unit_chain(self):
        layer = build_grid_layer(2, 1, (0, 0, 2, 1))
        ks = place_knots(layer, 0.5)
        hb = hybrid_basis(layer, np.ones((2, 1)), ks)
        # both centroids sit 0.5 from the knot with tau = 1.5
        c = (1 - (0.5 / 1.5) ** 2) ** 2
        np.testing.assert_allclose(hb.R[:, 0], [c, c])
        np.testing.assert_allclose(hb.Lam[:, 0], [np.sqrt(2) * c, 0.0], atol=1e-15)

    def test_full_design_annihilated(self):
        layer = build_grid_layer(3, 1, (0, 0, 3, 1))
        with pytest.raises(InvalidArgumentError, match="annihilated"):
            hybrid_basis(layer, np.eye(3), KnotSet(np.array([[1.5, 0.5]]), 3.0))

    def test_full_size_shape(self):
        layer = build_grid_layer(30, 30, (0, 0, 30, 30))
        X = np.column_stack([np.ones(900), np.random.default_rng(0).standard_normal((900, 2))])
        hb = hybrid_basis(layer, X, place_knots(layer, r=85))
        assert hb.Lam.shape == (900, 85)
        np.testing.assert_allclose(hb.M.T @ hb.M, np.eye(900), atol=1e-8)

    @pytest.fixture(scope="class")
    @staticmethod
    def basis():
        layer = build_grid_layer(8, 7, (0, 0, 8, 7))
        X = np.column_stack([np.ones(56), np.random.default_rng(1).standard_normal(56)])
        return layer, X, hybrid_basis(layer, X, place_knots(layer, r=9))

    def test_invariants(self, basis):
        layer, X, hb = basis
        np.testing.assert_array_equal(hb.Lam, hb.M @ hb.R)
        np.testing.assert_allclose(hb.Psi.T @ hb.Psi, np.eye(hb.r), atol=1e-8)
        assert np.all(hb.Phi >= 0)
        LQL = hb.Lam.T @ (layer.Q @ hb.Lam)
        target = LQL + hb.jitter * np.eye(hb.r)
        rec = hb.Psi @ np.diag(hb.Phi) @ hb.Psi.T
        assert np.linalg.norm(rec - target) / np.linalg.norm(target) <= 1e-8
        assert (hb.R > 0).any(axis=1).all()

    def test_deterministic(self, basis):
        layer, X, hb = basis
        again = hybrid_basis(layer, X, place_knots(layer, r=9))
        for name in ("M", "R", "Lam", "Psi", "Phi"):
            np.testing.assert_allclose(getattr(again, name), getattr(hb, name), atol=1e-12, rtol=0)

    def test_npz_bytes_reproducible(self, basis, tmp_path):
        _, _, hb = basis
        hb.to_npz(tmp_path / "a.npz")
        hb.to_npz(tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
        with np.load(tmp_path / "a.npz") as z:
            np.testing.assert_array_equal(z["Lam"], hb.Lam)
            assert float(z["tau"]) == hb.knots.tau

    def test_row_mismatch(self, basis):
        layer, X, hb = basis
        with pytest.raises(InvalidArgumentError):
            hybrid_basis(layer, X[:-1], hb.knots)
