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
"""Offline synthesis of the finite-time MPC ingredients.

Covers the terminal weight (discrete Lyapunov equation), the deadbeat gain,
the optional LQR gain, the terminal ellipsoid level and the decoupled form used
by the multi-input controller.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
from opentelemetry import trace

from .errors import (
    DegenerateConstraints,
    HorizonTooShort,
    NoConvergence,
    NoInvariantSetFound,
    NotContractive,
    NotControllable,
    NotStabilizing,
    StructureViolation,
    UnboundedTerminalSet,
)
from .matrixcore import (
    DEFAULT_SETTINGS,
    IndependenceTracker,
    LinalgSettings,
    Mat,
    Vec,
    as_matrix,
    cholesky,
    column_rank,
    controllability_matrix,
    inverse,
    kron,
    mat_pow,
    solve_linear,
    spectral_radius_below_one,
)

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

INVARIANCE_SAMPLES = 64
PRODUCT_SAMPLES = 256


@dataclass
class LinearSystem:
    """Discrete-time plant ``x(k+1) = A x(k) + B u(k)``."""

    A: Mat
    B: Mat

    def __post_init__(self) -> None:
        self.A = as_matrix(self.A, "A")
        self.B = as_matrix(self.B, "B")
        if self.A.shape[0] != self.A.shape[1]:
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != self.A.shape[0]:
            raise ValueError(
                f"B has {self.B.shape[0]} rows, expected {self.A.shape[0]}"
            )
        rank = column_rank(controllability_matrix(self.A, self.B))
        if rank < self.n:
            raise NotControllable(
                f"controllability matrix has rank {rank}, expected {self.n}",
                rank=rank,
            )

    @property
    def n(self) -> int:
        return int(self.A.shape[0])

    @property
    def m(self) -> int:
        return int(self.B.shape[1])

    def step(self, x: npt.ArrayLike, u: npt.ArrayLike) -> Vec:
        result: Vec = self.A @ np.asarray(x, dtype=np.float64) + self.B @ np.asarray(
            u, dtype=np.float64
        )
        return result


def _bounds(values: npt.ArrayLike | None, size: int, fill: float) -> Vec:
    if values is None:
        return np.full(size, fill)
    entries = np.atleast_1d(np.asarray(values, dtype=object))
    arr = np.array([fill if v is None else v for v in entries], dtype=np.float64)
    if arr.shape[0] != size:
        raise ValueError(f"bound vector has length {arr.shape[0]}, expected {size}")
    return arr


@dataclass
class BoxConstraintSet:
    """Elementwise bounds on state and input. Entries may be infinite."""

    x_lo: Vec
    x_hi: Vec
    u_lo: Vec
    u_hi: Vec

    def __post_init__(self) -> None:
        for name in ("x_lo", "x_hi", "u_lo", "u_hi"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.x_lo.shape != self.x_hi.shape or self.u_lo.shape != self.u_hi.shape:
            raise ValueError("lower and upper bounds must have matching lengths")
        if np.any(self.x_lo > self.x_hi) or np.any(self.u_lo > self.u_hi):
            raise DegenerateConstraints("lower bound exceeds upper bound")
        if (
            np.any(self.x_lo >= 0.0)
            or np.any(self.x_hi <= 0.0)
            or np.any(self.u_lo >= 0.0)
            or np.any(self.u_hi <= 0.0)
        ):
            raise DegenerateConstraints("origin is not strictly inside the box")

    @classmethod
    def from_bounds(
        cls,
        n: int,
        m: int,
        x_lo: npt.ArrayLike | None = None,
        x_hi: npt.ArrayLike | None = None,
        u_lo: npt.ArrayLike | None = None,
        u_hi: npt.ArrayLike | None = None,
    ) -> "BoxConstraintSet":
        """Build a box where ``None`` (whole vector or entry) means unbounded."""
        return cls(
            x_lo=_bounds(x_lo, n, -math.inf),
            x_hi=_bounds(x_hi, n, math.inf),
            u_lo=_bounds(u_lo, m, -math.inf),
            u_hi=_bounds(u_hi, m, math.inf),
        )

    @classmethod
    def symmetric(
        cls, x_bound: npt.ArrayLike, u_bound: npt.ArrayLike
    ) -> "BoxConstraintSet":
        xb = np.abs(np.atleast_1d(np.asarray(x_bound, dtype=np.float64)))
        ub = np.abs(np.atleast_1d(np.asarray(u_bound, dtype=np.float64)))
        return cls(x_lo=-xb, x_hi=xb.copy(), u_lo=-ub, u_hi=ub.copy())

    @property
    def n(self) -> int:
        return int(self.x_lo.shape[0])

    @property
    def m(self) -> int:
        return int(self.u_lo.shape[0])

    @property
    def state_radii(self) -> Vec:
        result: Vec = np.minimum(np.abs(self.x_lo), np.abs(self.x_hi))
        return result

    @property
    def input_radii(self) -> Vec:
        result: Vec = np.minimum(np.abs(self.u_lo), np.abs(self.u_hi))
        return result

    def state_violation(self, x: npt.ArrayLike) -> float:
        x = np.asarray(x, dtype=np.float64)
        excess = np.maximum(self.x_lo - x, x - self.x_hi)
        return float(max(0.0, excess.max(initial=0.0)))

    def input_violation(self, u: npt.ArrayLike) -> float:
        u = np.asarray(u, dtype=np.float64)
        excess = np.maximum(self.u_lo - u, u - self.u_hi)
        return float(max(0.0, excess.max(initial=0.0)))

    def contains_state(self, x: npt.ArrayLike, tol: float = 1e-6) -> bool:
        return self.state_violation(x) <= tol

    def contains_input(self, u: npt.ArrayLike, tol: float = 1e-6) -> bool:
        return self.input_violation(u) <= tol


@dataclass
class ControllerDesign:
    """Offline artifacts of one finite-time MPC controller."""

    system: LinearSystem
    box: BoxConstraintSet
    N: int
    Q: Mat
    R: Mat
    K: Mat
    P: Mat
    eps: float
    K_db: Mat | None = None

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def m(self) -> int:
        return self.system.m

    @property
    def closed_loop(self) -> Mat:
        result: Mat = self.system.A - self.system.B @ self.K
        return result


@dataclass
class DecoupledForm:
    """Block upper triangular coordinates ``z = M x`` of a multi-input plant."""

    M: Mat
    F: Mat
    G: Mat
    q: int
    block_dims: tuple[int, ...]
    active_inputs: tuple[int, ...]
    M_inv: Mat = field(repr=False)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.cumsum((0,) + self.block_dims[:-1]))

    def block_slice(self, j: int) -> slice:
        start = self.offsets[j]
        return slice(start, start + self.block_dims[j])

    def F_block(self, i: int, j: int) -> Mat:
        result: Mat = self.F[self.block_slice(i), self.block_slice(j)]
        return result

    def g_block(self, j: int) -> Mat:
        result: Mat = self.G[self.block_slice(j), [self.active_inputs[j]]]
        return result


@dataclass
class MultiInputDesign:
    """Per-block terminal ingredients on top of a decoupled form."""

    system: LinearSystem
    box: BoxConstraintSet
    decoupled: DecoupledForm
    blocks: list[ControllerDesign]
    N: int
    z_radius: float
    shrink: float = 1.0


@dataclass
class DesignReport:
    lyapunov_residual: float
    nilpotency_residual: float | None
    samples: int
    inputs_within_bounds: bool
    states_within_bounds: bool
    lyapunov_decrease: bool
    worst_decrease_margin: float

    @property
    def passed(self) -> bool:
        return (
            self.lyapunov_residual <= 1e-8
            and (self.nilpotency_residual is None or self.nilpotency_residual <= 1e-8)
            and self.inputs_within_bounds
            and self.states_within_bounds
            and self.lyapunov_decrease
        )


def solve_discrete_lyapunov(
    Acl: Mat, W: Mat, settings: LinalgSettings = DEFAULT_SETTINGS
) -> Mat:
    """Solve ``Acl^T P Acl - P = -W`` through its vectorized linear system."""
    Acl = as_matrix(Acl, "Acl")
    W = as_matrix(W, "W")
    n = Acl.shape[0]
    if W.shape != (n, n):
        raise ValueError(f"W has shape {W.shape}, expected {(n, n)}")
    if not spectral_radius_below_one(Acl, settings=settings):
        raise NotContractive("closed loop spectral radius certificate failed")
    lhs = np.eye(n * n) - kron(Acl.T, Acl.T)
    vec_p = solve_linear(lhs, W.flatten(order="F"), settings)
    P = vec_p.reshape((n, n), order="F")
    result: Mat = 0.5 * (P + P.T)
    return result


def deadbeat_gain(
    sys: LinearSystem, settings: LinalgSettings = DEFAULT_SETTINGS
) -> Mat:
    """Gain ``K_db = e_1^T S^-1 A^n`` with ``S = [A^(n-1) b, ..., b]``."""
    if sys.m != 1:
        raise ValueError(f"deadbeat gain needs a single input, got m={sys.m}")
    n = sys.n
    b = sys.B[:, 0]
    S = np.column_stack([mat_pow(sys.A, n - 1 - i) @ b for i in range(n)])
    rows = solve_linear(S, mat_pow(sys.A, n), settings)
    result: Mat = rows[:1, :]
    return result


def riccati_solution(
    sys: LinearSystem,
    Q: Mat,
    R: Mat,
    max_iter: int = 10000,
    tol: float = 1e-10,
) -> tuple[Mat, Mat]:
    """Fixed point of the discrete Riccati recursion started at ``P = Q``."""
    A, B = sys.A, sys.B
    Q = as_matrix(Q, "Q")
    R = as_matrix(R, "R")
    P = Q.copy()
    for i in range(max_iter):
        K = solve_linear(R + B.T @ P @ B, B.T @ P @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ K
        P_next = 0.5 * (P_next + P_next.T)
        delta = float(np.linalg.norm(P_next - P, "fro"))
        P = P_next
        if delta <= tol * max(float(np.linalg.norm(P, "fro")), 1e-300):
            logger.debug(f"riccati iteration converged after {i + 1} steps")
            K = solve_linear(R + B.T @ P @ B, B.T @ P @ A)
            return K, P
    raise NoConvergence(
        f"riccati recursion did not converge in {max_iter} iterations",
        iterations=max_iter,
    )


def riccati_gain(
    sys: LinearSystem,
    Q: Mat,
    R: Mat,
    max_iter: int = 10000,
    tol: float = 1e-10,
) -> Mat:
    cholesky(as_matrix(Q, "Q"))
    cholesky(as_matrix(R, "R"))
    K, _ = riccati_solution(sys, Q, R, max_iter=max_iter, tol=tol)
    return K


def terminal_level(
    P: Mat,
    K: Mat,
    box: BoxConstraintSet,
    settings: LinalgSettings = DEFAULT_SETTINGS,
) -> float:
    """Largest ``eps`` with ``{x' P x <= eps}`` inside the state box and ``-K x``
    inside the input box.

    Each constraint is a halfplane pair ``|a' x| <= c``; the level is
    ``min c^2 / (a' P^-1 a)`` over the rows that are not skipped.
    """
    P = as_matrix(P, "P")
    K = as_matrix(K, "K").reshape(box.m, box.n)
    cholesky(P, settings)
    n = P.shape[0]
    rows: list[tuple[Vec, float]] = []
    for i, c in enumerate(box.state_radii):
        rows.append((np.eye(n)[i], float(c)))
    for i, c in enumerate(box.input_radii):
        rows.append((K[i], float(c)))
    if any(c <= 0.0 for _, c in rows):
        raise DegenerateConstraints("origin is not strictly inside the box")
    P_inv = inverse(P, settings)
    levels = [
        c * c / float(a @ P_inv @ a)
        for a, c in rows
        if math.isfinite(c) and np.any(a != 0.0)
    ]
    if not levels:
        raise UnboundedTerminalSet("no active constraint row bounds the terminal set")
    return float(min(levels))


def decouple(
    sys: LinearSystem, settings: LinalgSettings = DEFAULT_SETTINGS
) -> DecoupledForm:
    """Input-major Krylov chain selection giving block upper triangular ``F``."""
    if sys.m < 2:
        raise ValueError("decoupling needs at least two inputs")
    tracker = IndependenceTracker(sys.n, settings)
    columns: list[Vec] = []
    dims: list[int] = []
    active: list[int] = []
    for j in range(sys.m):
        v = sys.B[:, j].copy()
        count = 0
        while tracker.rank < sys.n and tracker.offer(v):
            columns.append(v)
            count += 1
            v = sys.A @ v
        if count > 0:
            dims.append(count)
            active.append(j)
    if tracker.rank < sys.n:
        raise NotControllable(
            f"selected {tracker.rank} independent directions, expected {sys.n}",
            rank=tracker.rank,
        )
    T = np.column_stack(columns)
    M = inverse(T, settings)
    F = M @ sys.A @ T
    G = M @ sys.B
    form = DecoupledForm(
        M=M,
        F=F,
        G=G,
        q=len(dims),
        block_dims=tuple(dims),
        active_inputs=tuple(active),
        M_inv=T,
    )
    _check_structure(form, settings)
    logger.info(f"decoupled form: q={form.q}, block_dims={form.block_dims}")
    return form


def _check_structure(form: DecoupledForm, settings: LinalgSettings) -> None:
    tol = settings.independence_rel_tol
    offenders: list[tuple[int, int, float]] = []
    f_scale = tol * float(np.linalg.norm(form.F, "fro"))
    g_scale = tol * max(float(np.linalg.norm(form.G, "fro")), 1e-300)
    for j in range(form.q):
        cols = form.block_slice(j)
        below = form.offsets[j] + form.block_dims[j]
        for r in range(below, form.F.shape[0]):
            for c in range(cols.start, cols.stop):
                if abs(form.F[r, c]) > f_scale:
                    offenders.append((r, c, float(form.F[r, c])))
        col = form.active_inputs[j]
        for r in range(below, form.G.shape[0]):
            if abs(form.G[r, col]) > g_scale:
                offenders.append((r, -1 - col, float(form.G[r, col])))
    if offenders:
        raise StructureViolation(
            f"decoupled form has {len(offenders)} entries outside the block pattern",
            entries=offenders,
        )


def _check_weights(Q: Mat, R: Mat, n: int, m: int) -> None:
    if Q.shape != (n, n):
        raise ValueError(f"Q has shape {Q.shape}, expected {(n, n)}")
    if R.shape != (m, m):
        raise ValueError(f"R has shape {R.shape}, expected {(m, m)}")
    cholesky(Q)
    cholesky(R)


def build_design(
    sys: LinearSystem,
    box: BoxConstraintSet,
    N: int,
    Q: npt.ArrayLike,
    R: npt.ArrayLike,
    K_opt: npt.ArrayLike | None = None,
    settings: LinalgSettings = DEFAULT_SETTINGS,
) -> ControllerDesign:
    """Assemble P, K, K_db and eps for one plant."""
    with tracer.start_as_current_span("design") as span:
        span.set_attribute("horizon", N)
        span.set_attribute("state_dim", sys.n)
        if N < sys.n:
            raise HorizonTooShort(
                f"control horizon N={N} must be greater than or equal to the "
                f"system dimension n={sys.n}"
            )
        if box.n != sys.n or box.m != sys.m:
            raise ValueError("constraint box does not match the plant dimensions")
        Qm = as_matrix(Q, "Q")
        Rm = as_matrix(R, "R")
        _check_weights(Qm, Rm, sys.n, sys.m)
        if K_opt is not None:
            K = as_matrix(K_opt, "K").reshape(sys.m, sys.n)
            if not spectral_radius_below_one(sys.A - sys.B @ K, settings=settings):
                raise NotStabilizing("supplied gain K does not stabilize (A, B)")
        else:
            K = riccati_gain(sys, Qm, Rm)
        P = solve_discrete_lyapunov(sys.A - sys.B @ K, Qm + K.T @ Rm @ K, settings)
        K_db = deadbeat_gain(sys, settings) if sys.m == 1 else None
        try:
            eps = terminal_level(P, K, box, settings)
        except UnboundedTerminalSet:
            logger.warning("terminal set is unbounded, using eps=inf")
            eps = math.inf
        span.set_attribute("eps", eps)
        logger.info(f"design ready: N={N}, eps={eps:.6g}")
        return ControllerDesign(
            system=sys, box=box, N=N, Q=Qm, R=Rm, K=K, P=P, eps=eps, K_db=K_db
        )


def ellipsoid_boundary_samples(
    P: Mat, eps: float, count: int, rng: np.random.Generator
) -> Mat:
    """Points with ``x' P x = eps``; rows of the returned array."""
    n = P.shape[0]
    if n == 2:
        angles = np.linspace(0.0, 2.0 * math.pi, count, endpoint=False)
        directions = np.column_stack([np.cos(angles), np.sin(angles)])
    else:
        directions = rng.standard_normal((count, n))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    L = cholesky(P)
    # x = sqrt(eps) L^-T s gives x' L L' x = eps |s|^2
    result: Mat = math.sqrt(eps) * solve_linear(L.T, directions.T).T
    return result


def validate_design(
    design: ControllerDesign, samples: int = INVARIANCE_SAMPLES, seed: int = 0
) -> DesignReport:
    """Residual checks plus sampled terminal-set invariance."""
    A, B, K, P = design.system.A, design.system.B, design.K, design.P
    W = design.Q + K.T @ design.R @ K
    Acl = A - B @ K
    lyap = float(
        np.linalg.norm(Acl.T @ P @ Acl - P + W, "fro") / np.linalg.norm(P, "fro")
    )
    nilpotency = None
    if design.K_db is not None:
        power = mat_pow(A - B @ design.K_db, design.n)
        scale = max(1.0, float(np.linalg.norm(A, "fro")) ** design.n)
        nilpotency = float(np.linalg.norm(power, "fro")) / scale
    if not math.isfinite(design.eps):
        return DesignReport(lyap, nilpotency, 0, True, True, True, math.inf)
    rng = np.random.default_rng(seed)
    points = ellipsoid_boundary_samples(P, design.eps, samples, rng)
    inputs_ok = states_ok = decrease_ok = True
    worst = math.inf
    for x in points:
        u = -K @ x
        inputs_ok &= design.box.contains_input(u, 1e-9)
        states_ok &= design.box.contains_state(x, 1e-9)
        x_next = Acl @ x
        margin = design.eps - float(x @ W @ x) + 1e-9 - float(x_next @ P @ x_next)
        worst = min(worst, margin)
        decrease_ok &= margin >= 0.0
    return DesignReport(
        lyapunov_residual=lyap,
        nilpotency_residual=nilpotency,
        samples=samples,
        inputs_within_bounds=bool(inputs_ok),
        states_within_bounds=bool(states_ok),
        lyapunov_decrease=bool(decrease_ok),
        worst_decrease_margin=worst,
    )


def _z_radius(box: BoxConstraintSet, M_inv: Mat) -> float:
    """Uniform z-box radius whose image under ``M^-1`` stays inside the state box."""
    weights = np.abs(M_inv).sum(axis=1)
    radii = box.state_radii
    candidates = [
        float(c / w) for c, w in zip(radii, weights) if math.isfinite(c) and w > 0.0
    ]
    return min(candidates) if candidates else math.inf


def _product_samples_ok(
    mi: MultiInputDesign, factor: float, rng: np.random.Generator
) -> bool:
    dec = mi.decoupled
    per_block = [
        ellipsoid_boundary_samples(
            d.P, factor * d.eps, PRODUCT_SAMPLES, rng
        )
        if math.isfinite(d.eps)
        else None
        for d in mi.blocks
    ]
    for s in range(PRODUCT_SAMPLES):
        z = np.zeros(mi.system.n)
        u = np.zeros(mi.system.m)
        for j, d in enumerate(mi.blocks):
            pts = per_block[j]
            if pts is None:
                continue
            zj = pts[s] * rng.uniform(0.0, 1.0) if s % 2 else pts[s]
            z[dec.block_slice(j)] = zj
            u[dec.active_inputs[j]] = float((-d.K @ zj)[0])
        if not mi.box.contains_state(dec.M_inv @ z, 1e-9):
            return False
        if not mi.box.contains_input(u, 1e-9):
            return False
    return True


def build_multi_input_design(
    sys: LinearSystem,
    box: BoxConstraintSet,
    N: int,
    Q: npt.ArrayLike,
    R: npt.ArrayLike,
    eps_floor: float = 1e-10,
    seed: int = 0,
) -> MultiInputDesign:
    """Per-block terminal data for the decoupled multi-input controller.

    Block ``j`` uses the diagonal block of ``Q`` on its z-coordinates and the
    diagonal entry of ``R`` of its active input.
    """
    if N < sys.n:
        raise HorizonTooShort(
            f"control horizon N={N} must be greater than or equal to the "
            f"system dimension n={sys.n}"
        )
    Qm = as_matrix(Q, "Q")
    Rm = as_matrix(R, "R")
    _check_weights(Qm, Rm, sys.n, sys.m)
    dec = decouple(sys)
    radius = _z_radius(box, dec.M_inv)
    blocks: list[ControllerDesign] = []
    for j in range(dec.q):
        sl = dec.block_slice(j)
        sub = LinearSystem(dec.F_block(j, j), dec.g_block(j))
        lo = dec.active_inputs[j]
        sub_box = BoxConstraintSet.from_bounds(
            sub.n,
            1,
            x_lo=np.full(sub.n, -radius),
            x_hi=np.full(sub.n, radius),
            u_lo=[box.u_lo[lo]],
            u_hi=[box.u_hi[lo]],
        )
        blocks.append(
            build_design(sub, sub_box, N, Qm[sl, sl], Rm[lo : lo + 1, lo : lo + 1])
        )
    mi = MultiInputDesign(
        system=sys, box=box, decoupled=dec, blocks=blocks, N=N, z_radius=radius
    )
    rng = np.random.default_rng(seed)
    factor = 1.0
    while not _product_samples_ok(mi, factor, rng):
        factor *= 0.5
        if all(factor * d.eps < eps_floor for d in blocks):
            raise NoInvariantSetFound("product terminal set shrank below the floor")
    if factor < 1.0:
        logger.warning(f"product terminal set shrunk by factor {factor:g}")
        for d in blocks:
            d.eps *= factor
    mi.shrink = factor
    return mi
