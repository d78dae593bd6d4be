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
"""Receding-horizon controllers.

``lin_step`` drives a single plant through the condensed program,
``mi_step`` works in decoupled coordinates for multi-input plants and
``nl_step`` runs an SQP loop over linearizations of a nonlinear model.
The controller classes wrap each step function with its warm-start state.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import numpy.typing as npt
import scipy.linalg
from pydantic import BaseModel, ConfigDict

from .design import (
    BoxConstraintSet,
    ControllerDesign,
    LinearSystem,
    MultiInputDesign,
    build_design,
    ellipsoid_boundary_samples,
)
from .errors import InfeasibleAtState, NoInvariantSetFound, SQPNoConvergence
from .matrixcore import Mat, Vec, as_vector
from .qpsolver import (
    DEFAULT_SOLVER_SETTINGS,
    AffineStep,
    CondensedProgram,
    SolveResult,
    SolverSettings,
    SolveStatus,
    TerminalEllipsoid,
    WarmStart,
    build_condensed,
    condense,
    project_ellipsoid,
    shift_warm_start,
    solve,
    window_weights,
)

logger = logging.getLogger(__name__)

NL_TERMINAL_SAMPLES = 256


class SQPSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    tol: float = 1e-8
    max_iter: int = 50
    armijo: float = 1e-4
    min_step: float = 1e-8
    merit_stall: float = 1e-12


@dataclass
class NonlinearModel:
    """Discrete-time model ``x(k+1) = f(x(k), u(k))`` with ``f(0, 0) = 0``."""

    n: int
    m: int
    step: Callable[[Vec, Vec], Vec]
    jacobians: Callable[[Vec, Vec], tuple[Mat, Mat]] | None = None

    def __post_init__(self) -> None:
        origin = np.asarray(self.step(np.zeros(self.n), np.zeros(self.m)))
        if origin.shape != (self.n,):
            raise ValueError(f"model returns shape {origin.shape}, expected {self.n}")
        if float(np.abs(origin).max()) > 1e-12:
            raise ValueError("model must satisfy f(0, 0) = 0")

    @classmethod
    def from_linear(cls, sys: LinearSystem) -> "NonlinearModel":
        return cls(
            n=sys.n,
            m=sys.m,
            step=lambda x, u: sys.A @ x + sys.B @ u,
            jacobians=lambda x, u: (sys.A, sys.B),
        )

    def linearize(self, x: Vec, u: Vec) -> tuple[Mat, Mat]:
        """Jacobians, by central differences when none are supplied."""
        if self.jacobians is not None:
            A, B = self.jacobians(x, u)
            return np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
        A = np.zeros((self.n, self.n))
        B = np.zeros((self.n, self.m))
        for i in range(self.n):
            h = 1e-6 * (1.0 + abs(x[i]))
            dx = np.zeros(self.n)
            dx[i] = h
            A[:, i] = (self.step(x + dx, u) - self.step(x - dx, u)) / (2.0 * h)
        for j in range(self.m):
            h = 1e-6 * (1.0 + abs(u[j]))
            du = np.zeros(self.m)
            du[j] = h
            B[:, j] = (self.step(x, u + du) - self.step(x, u - du)) / (2.0 * h)
        return A, B


class Plant(Protocol):
    def step(self, x: Vec, u: Vec) -> Vec: ...


@dataclass
class ControlStep:
    """Applied input and diagnostics of one receding-horizon solve."""

    u: Vec
    predicted_cost: float
    status: SolveStatus
    solve_iterations: int
    predicted_states: Mat = field(default_factory=lambda: np.zeros((0, 0)))
    sqp_iterations: int = 0
    dynamics_residual: float = 0.0


@dataclass
class LinearWarmState:
    start: WarmStart | None = None


def _raise_if_infeasible(result: SolveResult, x: Vec) -> None:
    if result.status == SolveStatus.INFEASIBLE:
        raise InfeasibleAtState(f"program infeasible at x={x.tolist()}", state=x)
    if result.status == SolveStatus.MAX_ITERS:
        logger.warning(f"solver returned MaxIters at x={x.tolist()}")


def lin_step(
    prog: CondensedProgram,
    design: ControllerDesign,
    x: npt.ArrayLike,
    warm_state: LinearWarmState,
) -> ControlStep:
    """Solve at ``x`` and return the first input block."""
    x = as_vector(x, "x")
    result = solve(prog, x, warm_state.start)
    _raise_if_infeasible(result, x)
    n, m = prog.n, prog.m
    x_terminal = result.X_pred[-n:]
    warm_state.start = shift_warm_start(prog, result, -design.K @ x_terminal)
    logger.debug(
        f"linear step: {result.iterations} iterations, polished={result.polished}"
    )
    return ControlStep(
        u=result.U_opt[:m].copy(),
        predicted_cost=result.objective + prog.constant_term(x),
        status=result.status,
        solve_iterations=result.iterations,
        predicted_states=result.X_pred.reshape(prog.N, n),
    )


class LinearMPC:
    """Single-plant finite-time controller with warm starting."""

    def __init__(
        self,
        design: ControllerDesign,
        settings: SolverSettings = DEFAULT_SOLVER_SETTINGS,
    ) -> None:
        self.design = design
        self.program = build_condensed(design.system, design, settings)
        self.warm = LinearWarmState()

    def step(self, x: npt.ArrayLike) -> ControlStep:
        return lin_step(self.program, self.design, x, self.warm)

    def reset(self) -> None:
        self.warm = LinearWarmState()


@dataclass
class MultiInputWarmState:
    start: WarmStart | None = None
    program: CondensedProgram | None = None
    peel_starts: dict[int, WarmStart] = field(default_factory=dict)


def _block_weight(design: MultiInputDesign, i: int, kind: str) -> Mat:
    """Block diagonal stage weight of step ``i`` in z-coordinates."""
    blocks = []
    for j, sub in enumerate(design.blocks):
        dim = design.decoupled.block_dims[j]
        if kind == "u":
            blocks.append(sub.R if i >= dim else np.zeros((1, 1)))
        elif i == design.N:
            blocks.append(sub.P)
        else:
            blocks.append(sub.Q if i >= dim else np.zeros((dim, dim)))
    result: Mat = scipy.linalg.block_diag(*blocks)
    return result


def build_multi_input_program(
    design: MultiInputDesign,
    settings: SolverSettings = DEFAULT_SOLVER_SETTINGS,
) -> CondensedProgram:
    """Joint program over the active inputs in z-coordinates."""
    dec = design.decoupled
    n, N = design.system.n, design.N
    active = list(dec.active_inputs)
    G = dec.G[:, active]
    dynamics = [AffineStep(dec.F, G, np.zeros(n)) for _ in range(N)]
    terminals = []
    for j, sub in enumerate(design.blocks):
        selector = np.eye(n)[dec.block_slice(j)]
        terminals.append(TerminalEllipsoid(sub.P, sub.eps, selector))
    return condense(
        dynamics,
        [_block_weight(design, i, "x") for i in range(1, N + 1)],
        [_block_weight(design, i, "u") for i in range(N)],
        design.box.u_lo[active],
        design.box.u_hi[active],
        state_rows=dec.M_inv,
        x_lo=design.box.x_lo,
        x_hi=design.box.x_hi,
        terminals=terminals,
        settings=settings,
    )


def _tail_inputs(design: MultiInputDesign, z_terminal: Vec) -> Vec:
    dec = design.decoupled
    return np.array(
        [
            float((-sub.K @ z_terminal[dec.block_slice(j)])[0])
            for j, sub in enumerate(design.blocks)
        ]
    )


def mi_step(
    design: MultiInputDesign,
    x: npt.ArrayLike,
    warm: MultiInputWarmState,
    settings: SolverSettings = DEFAULT_SOLVER_SETTINGS,
) -> ControlStep:
    """One joint solve in ``z = M x``; inactive inputs are held at zero."""
    x = as_vector(x, "x")
    dec = design.decoupled
    if warm.program is None:
        warm.program = build_multi_input_program(design, settings)
    prog = warm.program
    z = dec.M @ x
    result = solve(prog, z, warm.start)
    _raise_if_infeasible(result, x)
    q, n = dec.q, design.system.n
    warm.start = shift_warm_start(
        prog, result, _tail_inputs(design, result.X_pred[-n:])
    )
    u = np.zeros(design.system.m)
    u[list(dec.active_inputs)] = result.U_opt[:q]
    states = (dec.M_inv @ result.X_pred.reshape(design.N, n).T).T
    return ControlStep(
        u=u,
        predicted_cost=result.objective + prog.constant_term(z),
        status=result.status,
        solve_iterations=result.iterations,
        predicted_states=states,
    )


def mi_peeling_step(
    design: MultiInputDesign,
    x: npt.ArrayLike,
    warm: MultiInputWarmState,
    settings: SolverSettings = DEFAULT_SOLVER_SETTINGS,
) -> ControlStep:
    """Sequential per-block solves from the last block upward.

    Block ``j`` sees the already planned trajectories of blocks ``j+1 ... q``
    as a known affine input. Physical state bounds are replaced by the
    per-block z-box radius.
    """
    x = as_vector(x, "x")
    dec = design.decoupled
    n, N = design.system.n, design.N
    z = dec.M @ x
    Z = np.zeros((N + 1, n))
    Z[0] = z
    U = np.zeros((N, dec.q))
    status = SolveStatus.OPTIMAL
    iterations = 0
    cost = 0.0
    for j in reversed(range(dec.q)):
        sub = design.blocks[j]
        sl = dec.block_slice(j)
        F_jj = dec.F_block(j, j)
        g_j = dec.g_block(j)
        dynamics = []
        for i in range(N):
            c = dec.F[sl] @ Z[i] - F_jj @ Z[i, sl]
            for later in range(j + 1, dec.q):
                c = c + dec.G[sl, dec.active_inputs[later]] * U[i, later]
            dynamics.append(AffineStep(F_jj, g_j, c))
        dim = dec.block_dims[j]
        state_w, input_w = window_weights(dim, N, sub.Q, sub.R, sub.P)
        radius = np.full(dim, design.z_radius)
        prog = condense(
            dynamics,
            state_w,
            input_w,
            sub.box.u_lo,
            sub.box.u_hi,
            state_rows=np.eye(dim),
            x_lo=-radius,
            x_hi=radius,
            terminals=[TerminalEllipsoid(sub.P, sub.eps, np.eye(dim))],
            settings=settings,
        )
        result = solve(prog, z[sl], warm.peel_starts.get(j))
        _raise_if_infeasible(result, x)
        if result.status != SolveStatus.OPTIMAL:
            status = result.status
        iterations += result.iterations
        cost += result.objective + prog.constant_term(z[sl])
        U[:, j] = result.U_opt
        Z[1:, sl] = result.X_pred.reshape(N, dim)
        tail = -sub.K @ Z[N, sl]
        warm.peel_starts[j] = shift_warm_start(prog, result, tail)
    u = np.zeros(design.system.m)
    u[list(dec.active_inputs)] = U[0]
    return ControlStep(
        u=u,
        predicted_cost=cost,
        status=status,
        solve_iterations=iterations,
        predicted_states=(dec.M_inv @ Z[1:].T).T,
    )


class MultiInputMPC:
    def __init__(
        self,
        design: MultiInputDesign,
        peeling: bool = False,
        settings: SolverSettings = DEFAULT_SOLVER_SETTINGS,
    ) -> None:
        self.design = design
        self.peeling = peeling
        self.settings = settings
        self.warm = MultiInputWarmState()

    def step(self, x: npt.ArrayLike) -> ControlStep:
        if self.peeling:
            return mi_peeling_step(self.design, x, self.warm, self.settings)
        return mi_step(self.design, x, self.warm, self.settings)

    def reset(self) -> None:
        program = self.warm.program
        self.warm = MultiInputWarmState(program=program)


@dataclass
class NonlinearWarmState:
    """Shifted shooting trajectory from the previous step."""

    U: Mat | None = None
    X: Mat | None = None


def rollout(model: NonlinearModel, x0: Vec, U: Mat) -> Mat:
    X = np.zeros((U.shape[0] + 1, model.n))
    X[0] = x0
    for i in range(U.shape[0]):
        X[i + 1] = model.step(X[i], U[i])
    return X


class _ShootingProblem:
    """Cost, constraint violation and defects over shooting variables."""

    def __init__(
        self,
        model: NonlinearModel,
        design: ControllerDesign,
        box: BoxConstraintSet,
    ) -> None:
        self.model = model
        self.design = design
        self.box = box
        self.state_w, self.input_w = window_weights(
            model.n, design.N, design.Q, design.R, design.P
        )

    def cost(self, U: Mat, X: Mat) -> float:
        total = 0.0
        for i in range(self.design.N):
            total += float(U[i] @ self.input_w[i] @ U[i])
            total += float(X[i + 1] @ self.state_w[i] @ X[i + 1])
        return total

    def cost_slope(self, U: Mat, X: Mat, dU: Mat, dX: Mat) -> float:
        total = 0.0
        for i in range(self.design.N):
            total += 2.0 * float(U[i] @ self.input_w[i] @ dU[i])
            total += 2.0 * float(X[i + 1] @ self.state_w[i] @ dX[i + 1])
        return total

    def defects(self, U: Mat, X: Mat) -> Mat:
        return np.array(
            [X[i + 1] - self.model.step(X[i], U[i]) for i in range(self.design.N)]
        )

    def violation(self, U: Mat, X: Mat) -> float:
        box = self.box
        total = float(np.maximum(box.u_lo - U, 0.0).sum())
        total += float(np.maximum(U - box.u_hi, 0.0).sum())
        inner = X[1:-1]
        total += float(np.maximum(box.x_lo - inner, 0.0).sum())
        total += float(np.maximum(inner - box.x_hi, 0.0).sum())
        if math.isfinite(self.design.eps):
            x_N = X[-1]
            proj = project_ellipsoid(x_N, self.design.P, self.design.eps)
            total += float(np.abs(x_N - proj).sum())
        return total

    def infeasibility(self, U: Mat, X: Mat) -> float:
        return float(np.abs(self.defects(U, X)).sum()) + self.violation(U, X)

    def merit(self, U: Mat, X: Mat, mu: float) -> float:
        return self.cost(U, X) + mu * self.infeasibility(U, X)

    def costates(self, X: Mat, linear: list[AffineStep]) -> Mat:
        """Backward costate estimate along the linearization."""
        N = self.design.N
        lam = np.zeros((N + 1, self.model.n))
        lam[N] = 2.0 * self.state_w[N - 1] @ X[N]
        for i in range(N - 1, 0, -1):
            lam[i] = 2.0 * self.state_w[i - 1] @ X[i] + linear[i].A.T @ lam[i + 1]
        return lam


def _initial_guess(
    model: NonlinearModel,
    design: ControllerDesign,
    x: Vec,
    warm: NonlinearWarmState,
) -> tuple[Mat, Mat]:
    N = design.N
    if warm.U is not None and warm.X is not None and warm.U.shape[0] == N:
        X = warm.X.copy()
        X[0] = x
        return warm.U.copy(), X
    U = np.zeros((N, model.m))
    return U, rollout(model, x, U)


def nl_step(
    model: NonlinearModel,
    design: ControllerDesign,
    box: BoxConstraintSet,
    x: npt.ArrayLike,
    warm_traj: NonlinearWarmState,
    settings: SQPSettings = SQPSettings(),
    solver_settings: SolverSettings = DEFAULT_SOLVER_SETTINGS,
) -> ControlStep:
    """SQP over shooting variables with an l1 merit line search."""
    x = as_vector(x, "x")
    N, n, m = design.N, model.n, model.m
    problem = _ShootingProblem(model, design, box)
    U, X = _initial_guess(model, design, x, warm_traj)
    mu = 1.0
    qp_warm: WarmStart | None = None
    qp_iterations = 0
    status = SolveStatus.OPTIMAL
    step_norm = defect = math.inf
    for major in range(1, settings.max_iter + 1):
        linear = []
        for i in range(N):
            A_i, B_i = model.linearize(X[i], U[i])
            c_i = model.step(X[i], U[i]) - A_i @ X[i] - B_i @ U[i]
            linear.append(AffineStep(A_i, B_i, c_i))
        prog = condense(
            linear,
            problem.state_w,
            problem.input_w,
            box.u_lo,
            box.u_hi,
            state_rows=np.eye(n),
            x_lo=box.x_lo,
            x_hi=box.x_hi,
            terminals=[TerminalEllipsoid(design.P, design.eps, np.eye(n))],
            settings=solver_settings,
        )
        result = solve(prog, x, qp_warm)
        _raise_if_infeasible(result, x)
        status = result.status
        qp_iterations += result.iterations
        qp_warm = WarmStart(U=result.U_opt, y=result.scaled_duals)

        U_qp = result.U_opt.reshape(N, m)
        X_qp = np.vstack([x, result.X_pred.reshape(N, n)])
        dU, dX = U_qp - U, X_qp - X
        lam = problem.costates(X, linear)
        largest = max(
            float(np.abs(lam).max()),
            float(np.abs(result.multipliers).max(initial=0.0)),
        )
        mu = max(mu, 1.5 * largest + 1.0)

        phi0 = problem.merit(U, X, mu)
        slope = problem.cost_slope(U, X, dU, dX) - mu * problem.infeasibility(U, X)
        slope = min(slope, 0.0)
        alpha = 1.0
        while alpha > settings.min_step:
            trial = problem.merit(U + alpha * dU, X + alpha * dX, mu)
            if trial <= phi0 + settings.armijo * alpha * slope:
                break
            alpha *= 0.5
        U = U + alpha * dU
        X = X + alpha * dX
        phi1 = problem.merit(U, X, mu)
        step_norm = alpha * max(float(np.abs(dU).max()), float(np.abs(dX).max()))
        defect = float(np.abs(problem.defects(U, X)).max())
        stalled = abs(phi0 - phi1) <= settings.merit_stall * (1.0 + abs(phi0))
        resolution = settings.tol
        if not result.polished:
            # an unpolished subproblem only resolves steps to its own accuracy
            resolution = max(
                resolution,
                10.0 * solver_settings.eps_rel * (1.0 + float(np.abs(U_qp).max())),
            )
        logger.debug(
            f"sqp iteration {major}: alpha={alpha:g}, step={step_norm:.2e}, "
            f"defect={defect:.2e}"
        )
        if defect <= settings.tol and (step_norm <= resolution or stalled):
            break
    else:
        raise SQPNoConvergence(
            f"SQP did not converge in {settings.max_iter} iterations "
            f"(step {step_norm:.2e}, defect {defect:.2e})",
            step_norm=step_norm,
            dynamics_residual=defect,
        )

    u_tail = -design.K @ X[N]
    warm_traj.U = np.vstack([U[1:], u_tail])
    warm_traj.X = np.vstack([X[1:], model.step(X[N], u_tail)])
    return ControlStep(
        u=U[0].copy(),
        predicted_cost=problem.cost(U, X),
        status=status,
        solve_iterations=qp_iterations,
        predicted_states=X[1:].copy(),
        sqp_iterations=major,
        dynamics_residual=defect,
    )


class NonlinearMPC:
    def __init__(
        self,
        model: NonlinearModel,
        design: ControllerDesign,
        box: BoxConstraintSet,
        settings: SQPSettings = SQPSettings(),
        solver_settings: SolverSettings = DEFAULT_SOLVER_SETTINGS,
    ) -> None:
        self.model = model
        self.design = design
        self.box = box
        self.settings = settings
        self.solver_settings = solver_settings
        self.warm = NonlinearWarmState()

    def step(self, x: npt.ArrayLike) -> ControlStep:
        return nl_step(
            self.model,
            self.design,
            self.box,
            x,
            self.warm,
            self.settings,
            self.solver_settings,
        )

    def reset(self) -> None:
        self.warm = NonlinearWarmState()


def nl_terminal_invariant(
    model: NonlinearModel,
    design: ControllerDesign,
    box: BoxConstraintSet,
    eps: float,
    rng: np.random.Generator,
) -> bool:
    """Sampled check of the nonlinear terminal set at level ``eps``."""
    points = ellipsoid_boundary_samples(design.P, eps, NL_TERMINAL_SAMPLES, rng)
    for x in points:
        u = -design.K @ x
        if not (box.contains_input(u, 1e-9) and box.contains_state(x, 1e-9)):
            return False
        x_next = model.step(x, u)
        if float(x_next @ design.P @ x_next) > eps:
            return False
    return True


def nl_terminal_design(
    model: NonlinearModel,
    box: BoxConstraintSet,
    Q: npt.ArrayLike,
    R: npt.ArrayLike,
    N: int,
    K_opt: npt.ArrayLike | None = None,
    eps_floor: float = 1e-10,
    seed: int = 0,
) -> ControllerDesign:
    """Linearized design with the terminal level halved until the sampled
    nonlinear invariance check passes."""
    A, B = model.linearize(np.zeros(model.n), np.zeros(model.m))
    design = build_design(LinearSystem(A, B), box, N, Q, R, K_opt)
    if not math.isfinite(design.eps):
        raise NoInvariantSetFound("terminal set of the linearization is unbounded")
    rng = np.random.default_rng(seed)
    eps = design.eps
    while not nl_terminal_invariant(model, design, box, eps, rng):
        eps *= 0.5
        if eps < eps_floor:
            raise NoInvariantSetFound(
                f"terminal level fell below {eps_floor:g} without passing the check"
            )
    if eps < design.eps:
        logger.warning(f"terminal level shrunk from {design.eps:.6g} to {eps:.6g}")
    design.eps = eps
    return design
