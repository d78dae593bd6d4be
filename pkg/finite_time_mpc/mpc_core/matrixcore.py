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
"""Dense real linear-algebra kernel.

Every other module works on ``float64`` numpy arrays. Factorizations go
through LAPACK (numpy / scipy); this module adds the tolerance contracts and
the typed errors the design and solver layers depend on.
"""

import logging
import warnings

import numpy as np
import numpy.typing as npt
import scipy.linalg
from pydantic import BaseModel, ConfigDict

from .errors import NoConvergence, NotPositiveDefinite, SingularMatrix

logger = logging.getLogger(__name__)

Mat = npt.NDArray[np.float64]
Vec = npt.NDArray[np.float64]


class LinalgSettings(BaseModel):
    """Tolerances of the linear-algebra kernel."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    pivot_rel_tol: float = 1e-12
    symmetry_rel_tol: float = 1e-10
    independence_rel_tol: float = 1e-9
    overflow_norm: float = 1e150
    max_doublings: int = 40


DEFAULT_SETTINGS = LinalgSettings()


def as_matrix(data: npt.ArrayLike, name: str = "matrix") -> Mat:
    """Coerce ``data`` to a finite 2-D float64 array."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_vector(data: npt.ArrayLike, name: str = "vector") -> Vec:
    arr = np.array(data, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _require_square(A: Mat, name: str) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")


def solve_linear(
    A: Mat, B: npt.ArrayLike, settings: LinalgSettings = DEFAULT_SETTINGS
) -> Mat:
    """Solve ``A X = B`` by LU with partial pivoting.

    Raises ``SingularMatrix`` when a pivot is below
    ``pivot_rel_tol * ||A||_F``.
    """
    A = np.asarray(A, dtype=np.float64)
    _require_square(A, "A")
    rhs = np.asarray(B, dtype=np.float64)
    if rhs.shape[0] != A.shape[0]:
        raise ValueError(
            f"right-hand side has {rhs.shape[0]} rows, expected {A.shape[0]}"
        )
    scale = float(np.linalg.norm(A, "fro"))
    if scale == 0.0:
        raise SingularMatrix("matrix is identically zero", pivot=0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    pivots = np.abs(np.diag(lu))
    smallest = float(pivots.min())
    if smallest < settings.pivot_rel_tol * scale:
        raise SingularMatrix(
            f"pivot {smallest:.3e} below {settings.pivot_rel_tol:.0e}*||A||_F",
            pivot=smallest,
        )
    result: Mat = scipy.linalg.lu_solve((lu, piv), rhs)
    return result


def inverse(A: Mat, settings: LinalgSettings = DEFAULT_SETTINGS) -> Mat:
    return solve_linear(A, np.eye(A.shape[0]), settings)


def is_symmetric(S: Mat, settings: LinalgSettings = DEFAULT_SETTINGS) -> bool:
    scale = max(float(np.linalg.norm(S, "fro")), 1.0)
    return bool(np.linalg.norm(S - S.T, "fro") <= settings.symmetry_rel_tol * scale)


def cholesky(P: Mat, settings: LinalgSettings = DEFAULT_SETTINGS) -> Mat:
    """Lower-triangular ``L`` with ``L L^T = P``."""
    P = np.asarray(P, dtype=np.float64)
    _require_square(P, "P")
    if not is_symmetric(P, settings):
        raise ValueError("cholesky requires a symmetric matrix")
    try:
        L: Mat = np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"cholesky failed: {exc}") from exc
    if np.any(np.diag(L) <= 0.0):
        raise NotPositiveDefinite("cholesky produced a non-positive pivot")
    return L


def sym_eig(S: Mat, settings: LinalgSettings = DEFAULT_SETTINGS) -> tuple[Vec, Mat]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix.

    Each eigenvector is signed so its largest-magnitude entry is positive,
    which makes the output deterministic.
    """
    S = np.asarray(S, dtype=np.float64)
    _require_square(S, "S")
    if not is_symmetric(S, settings):
        raise ValueError("sym_eig requires a symmetric matrix")
    try:
        values, vectors = np.linalg.eigh(0.5 * (S + S.T))
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(f"symmetric eigensolver failed: {exc}") from exc
    for j in range(vectors.shape[1]):
        pivot = int(np.argmax(np.abs(vectors[:, j])))
        if vectors[pivot, j] < 0.0:
            vectors[:, j] = -vectors[:, j]
    return values, vectors


def spectral_radius_below_one(
    M: Mat,
    max_doublings: int | None = None,
    settings: LinalgSettings = DEFAULT_SETTINGS,
) -> bool:
    """Certify rho(M) < 1 by finding a power ``M^(2^j)`` with Frobenius norm < 1.

    Returns ``False`` when no such power appears within ``max_doublings``
    squarings or when an intermediate norm overflows.
    """
    M = np.asarray(M, dtype=np.float64)
    _require_square(M, "M")
    budget = settings.max_doublings if max_doublings is None else max_doublings
    if budget < 1:
        raise ValueError("max_doublings must be at least 1")
    power = M.copy()
    for j in range(budget + 1):
        norm = float(np.linalg.norm(power, "fro"))
        if not np.isfinite(norm) or norm > settings.overflow_norm:
            logger.debug(f"spectral radius certificate diverged at doubling {j}")
            return False
        if norm < 1.0:
            return True
        power = power @ power
    return False


def mat_pow(M: Mat, p: int) -> Mat:
    M = np.asarray(M, dtype=np.float64)
    _require_square(M, "M")
    if p < 0:
        raise ValueError("power must be non-negative")
    result: Mat = np.linalg.matrix_power(M, p)
    return result


def kron(A: Mat, B: Mat) -> Mat:
    result: Mat = np.kron(
        np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    )
    return result


class IndependenceTracker:
    """Incremental test of linear independence against previously accepted vectors.

    Uses Gram-Schmidt with one reorthogonalization pass. A candidate is
    independent when its residual exceeds ``tol * scale`` where ``scale`` is
    the largest candidate norm seen so far.
    """

    def __init__(self, dim: int, settings: LinalgSettings = DEFAULT_SETTINGS) -> None:
        self.dim = dim
        self.tol = settings.independence_rel_tol
        self.scale = 0.0
        self._basis: list[Vec] = []

    @property
    def rank(self) -> int:
        return len(self._basis)

    def offer(self, vector: npt.ArrayLike) -> bool:
        """Accept ``vector`` if it is independent of the accepted set."""
        v = np.asarray(vector, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.dim:
            raise ValueError(f"expected length {self.dim}, got {v.shape[0]}")
        self.scale = max(self.scale, float(np.linalg.norm(v)))
        if self.scale == 0.0 or self.rank == self.dim:
            return False
        residual = v.copy()
        for _ in range(2):
            for q in self._basis:
                residual -= (q @ residual) * q
        norm = float(np.linalg.norm(residual))
        if norm <= self.tol * self.scale:
            return False
        self._basis.append(residual / norm)
        return True


def column_rank(M: Mat, settings: LinalgSettings = DEFAULT_SETTINGS) -> int:
    """Rank of ``M`` by scanning its columns left to right."""
    tracker = IndependenceTracker(M.shape[0], settings)
    for j in range(M.shape[1]):
        tracker.offer(M[:, j])
    return tracker.rank


def controllability_matrix(A: Mat, B: Mat) -> Mat:
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)
