# Copyright 2025 DataRobot, Inc.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpc_core.errors import NotPositiveDefinite, SingularMatrix
from mpc_core.matrixcore import (
    IndependenceTracker,
    LinalgSettings,
    as_matrix,
    cholesky,
    column_rank,
    controllability_matrix,
    inverse,
    kron,
    mat_pow,
    solve_linear,
    spectral_radius_below_one,
    sym_eig,
)

entries = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False)


class TestSolveLinear:
    def test_solves_small_system(self):
        """Test the LU solve against a hand-checked 2x2 system."""
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        x = solve_linear(A, np.array([3.0, 5.0]))
        np.testing.assert_allclose(x, [0.8, 1.4], atol=1e-12)

    def test_singular_matrix_raises(self):
        """Test that a rank deficient matrix reports its pivot."""
        with pytest.raises(SingularMatrix) as excinfo:
            solve_linear(np.array([[1.0, 2.0], [2.0, 4.0]]), np.eye(2))
        assert excinfo.value.pivot is not None
        assert excinfo.value.pivot < 1e-10

    def test_zero_matrix_raises(self):
        """Test that the zero matrix is rejected before factorization."""
        with pytest.raises(SingularMatrix):
            solve_linear(np.zeros((2, 2)), np.ones(2))

    def test_shape_mismatch(self):
        """Test that a right-hand side with the wrong row count is rejected."""
        with pytest.raises(ValueError, match="right-hand side"):
            solve_linear(np.eye(2), np.ones(3))

    def test_inverse(self):
        A = np.array([[4.0, 1.0], [2.0, 3.0]])
        np.testing.assert_allclose(inverse(A) @ A, np.eye(2), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 4), elements=entries))
    def test_diagonally_dominant_residual(self, noise):
        """Test small residuals on well conditioned random systems."""
        A = noise + 5.0 * np.eye(4)
        b = np.arange(1.0, 5.0)
        x = solve_linear(A, b)
        assert np.abs(A @ x - b).max() <= 1e-10


class TestCholesky:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 3), elements=entries))
    def test_reconstructs_spd_matrix(self, X):
        """Test L L^T = P for random symmetric positive definite matrices."""
        P = X @ X.T + np.eye(3)
        L = cholesky(P)
        assert np.allclose(np.triu(L, 1), 0.0)
        np.testing.assert_allclose(L @ L.T, P, atol=1e-10)

    def test_indefinite_matrix_raises(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_non_symmetric_matrix_raises(self):
        with pytest.raises(ValueError, match="symmetric"):
            cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestSymEig:
    def test_ascending_and_sign_normalized(self):
        """Test ordering and the deterministic eigenvector sign rule."""
        S = np.array([[2.0, 1.0], [1.0, 2.0]])
        values, vectors = sym_eig(S)
        np.testing.assert_allclose(values, [1.0, 3.0], atol=1e-12)
        for j in range(2):
            pivot = np.argmax(np.abs(vectors[:, j]))
            assert vectors[pivot, j] > 0.0
        np.testing.assert_allclose(
            vectors @ np.diag(values) @ vectors.T, S, atol=1e-12
        )

    def test_rejects_non_symmetric(self):
        with pytest.raises(ValueError):
            sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestSpectralRadius:
    def test_contractive_rotation(self):
        c, s = np.cos(0.3), np.sin(0.3)
        assert spectral_radius_below_one(0.99 * np.array([[c, -s], [s, c]]))

    def test_expanding_rotation(self):
        c, s = np.cos(0.3), np.sin(0.3)
        assert not spectral_radius_below_one(1.01 * np.array([[c, -s], [s, c]]))

    def test_non_normal_matrix_needs_doublings(self):
        """Test a stable Jordan-like block whose norm starts far above one."""
        M = np.array([[0.9, 50.0], [0.0, 0.9]])
        assert np.linalg.norm(M, "fro") > 1.0
        assert spectral_radius_below_one(M)

    def test_overflow_reports_false(self):
        """Test that overflowing powers are reported instead of raised."""
        M = np.array([[1e100, 0.0], [0.0, 0.5]])
        assert not spectral_radius_below_one(M)

    def test_budget_limits_certificate(self):
        M = np.array([[0.9, 50.0], [0.0, 0.9]])
        assert not spectral_radius_below_one(M, max_doublings=1)

    def test_invalid_budget(self):
        with pytest.raises(ValueError):
            spectral_radius_below_one(np.eye(2), max_doublings=0)

    def test_settings_budget(self):
        M = np.array([[0.9, 50.0], [0.0, 0.9]])
        assert not spectral_radius_below_one(
            M, settings=LinalgSettings(max_doublings=1)
        )


class TestIndependence:
    def test_tracker_accepts_independent_vectors(self):
        tracker = IndependenceTracker(3)
        assert tracker.offer([1.0, 0.0, 0.0])
        assert tracker.offer([1.0, 1.0, 0.0])
        assert not tracker.offer([2.0, 3.0, 0.0])
        assert tracker.offer([0.0, 0.0, 1e-3])
        assert tracker.rank == 3
        assert not tracker.offer([1.0, 2.0, 3.0])

    def test_tracker_rejects_zero(self):
        tracker = IndependenceTracker(2)
        assert not tracker.offer([0.0, 0.0])
        assert tracker.rank == 0

    def test_tracker_length_check(self):
        with pytest.raises(ValueError, match="expected length 2"):
            IndependenceTracker(2).offer([1.0, 2.0, 3.0])

    def test_column_rank(self):
        M = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0], [1.0, 2.0, 1.0]])
        assert column_rank(M) == 2

    def test_controllability_matrix(self):
        A = np.array([[1.1, 2.0], [0.0, 0.95]])
        b = np.array([[0.0], [0.079]])
        C = controllability_matrix(A, b)
        np.testing.assert_allclose(C, np.hstack([b, A @ b]))
        assert column_rank(C) == 2


class TestHelpers:
    def test_as_matrix_shapes(self):
        assert as_matrix(3.0).shape == (1, 1)
        assert as_matrix([1.0, 2.0]).shape == (2, 1)

    def test_as_matrix_rejects_nan(self):
        with pytest.raises(ValueError, match="non-finite"):
            as_matrix([[np.nan]])

    def test_mat_pow(self):
        M = np.array([[0.0, 1.0], [0.0, 0.0]])
        np.testing.assert_array_equal(mat_pow(M, 0), np.eye(2))
        np.testing.assert_array_equal(mat_pow(M, 2), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            mat_pow(M, -1)

    def test_mat_pow_adds_exponents(self):
        M = np.array([[0.9, 0.2], [-0.1, 0.7]])
        np.testing.assert_allclose(
            mat_pow(M, 5), mat_pow(M, 2) @ mat_pow(M, 3), rtol=1e-9
        )

    def test_kron_block_diagonal(self):
        result = kron(np.diag([2.0, 3.0]), np.eye(2))
        np.testing.assert_array_equal(result, np.diag([2.0, 2.0, 3.0, 3.0]))
