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
"""Condensed finite-horizon programs and their operator-splitting solver.

The decision variable is the stacked input sequence ``U``. Predicted states
are eliminated through ``X = F x0 + Phi U + e``. Constraints are box rows on
inputs and states plus terminal ellipsoids ``y' P y <= eps`` on linear images
``y = S x(N)`` of the last predicted state. The solver minimizes
``U' H U + 2 f(x0)' U`` (the constant part of the cost is reported separately).
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
from pydantic import BaseModel, ConfigDict

from .design import ControllerDesign, LinearSystem
from .errors import NotPositiveDefinite
from .matrixcore import Mat, Vec, as_matrix, sym_eig

logger = logging.getLogger(__name__)


class SolveStatus(str, Enum):
    OPTIMAL = "Optimal"
    MAX_ITERS = "MaxIters"
    INFEASIBLE = "Infeasible"


class SolverSettings(BaseModel):
    """Operator-splitting parameters. Defaults reproduce the reference runs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rho: float = 1.0
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-8
    eps_rel: float = 1e-6
    eps_infeasible: float = 1e-4
    max_iter: int = 20000
    feasibility_max_iter: int = 4000
    constraint_tol: float = 1e-6
    polish: bool = True
    polish_interval: int = 25
    polish_start: float = 1e-3
    regularization: float = 1e-9
    feasibility_weight: float = 1e-8


DEFAULT_SOLVER_SETTINGS = SolverSettings()


@dataclass(frozen=True)
class TerminalEllipsoid:
    """Constraint ``(S x(N))' P (S x(N)) <= eps``."""

    P: Mat
    eps: float
    selector: Mat


@dataclass(frozen=True)
class AffineStep:
    """One prediction step ``x(i+1) = A x(i) + B u(i) + c``."""

    A: Mat
    B: Mat
    c: Vec


@dataclass(frozen=True)
class _EllipsoidBlock:
    start: int
    stop: int
    P: Mat
    eps: float
    eigenvalues: Vec
    eigenvectors: Mat
    P_inv: Mat


@dataclass
class CondensedProgram:
    """Immutable condensed program; factorizations are done at build time."""

    n: int
    m: int
    N: int
    dynamics: list[AffineStep]
    state_weights: list[Mat]
    input_weights: list[Mat]
    F: Mat
    Phi: Mat
    e: Vec
    H: Mat
    f_map: Mat
    f_offset: Vec
    const_quad: Mat
    const_lin: Vec
    const_offset: float
    C: Mat
    D_map: Mat
    d_offset: Vec
    lo: Vec
    hi: Vec
    n_box: int
    ellipsoids: list[_EllipsoidBlock]
    row_keys: list[tuple[str, int, int]]
    settings: SolverSettings
    H_reg: Mat = field(repr=False)
    row_scale: Vec = field(repr=False)
    cost_scale: float = field(repr=False)
    kkt_factor: tuple[Mat, bool] = field(repr=False)

    @property
    def n_rows(self) -> int:
        return int(self.C.shape[0])

    def linear_term(self, x0: Vec) -> Vec:
        result: Vec = self.f_map @ x0 + self.f_offset
        return result

    def constant_term(self, x0: Vec) -> float:
        return float(x0 @ self.const_quad @ x0 + 2.0 * self.const_lin @ x0) + (
            self.const_offset
        )

    def offsets(self, x0: Vec) -> Vec:
        result: Vec = self.D_map @ x0 + self.d_offset
        return result

    def predict(self, x0: Vec, U: Vec) -> Vec:
        """Stacked predicted states ``x(1) ... x(N)``."""
        result: Vec = self.F @ x0 + self.Phi @ U + self.e
        return result

    def objective(self, x0: Vec, U: Vec) -> float:
        return float(U @ self.H @ U + 2.0 * self.linear_term(x0) @ U)

    @cached_property
    def feasibility_view(self) -> "CondensedProgram":
        """Same constraints with the objective replaced by ``delta |U|^2``.

        Runs under the tighter ``feasibility_max_iter`` budget.
        """
        dim = self.N * self.m
        delta = self.settings.feasibility_weight
        H = delta * np.eye(dim)
        capped = self.settings.model_copy(
            update={"max_iter": self.settings.feasibility_max_iter}
        )
        return _assemble(
            replace(self, settings=capped),
            H=H,
            f_map=np.zeros((dim, self.n)),
            f_offset=np.zeros(dim),
            regularize=False,
        )


@dataclass
class WarmStart:
    U: Vec
    y: Vec | None = None


@dataclass
class SolveResult:
    U_opt: Vec
    X_pred: Vec
    status: SolveStatus
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    multipliers: Vec
    violation: float
    polished: bool = False
    scaled_duals: Vec | None = field(default=None, repr=False)


def _stack_predictions(
    dynamics: Sequence[AffineStep], n: int, m: int
) -> tuple[Mat, Mat, Vec]:
    N = len(dynamics)
    F = np.zeros((N * n, n))
    Phi = np.zeros((N * n, N * m))
    e = np.zeros(N * n)
    Fx = np.eye(n)
    Px = np.zeros((n, N * m))
    ex = np.zeros(n)
    for i, step in enumerate(dynamics):
        Fx = step.A @ Fx
        Px = step.A @ Px
        Px[:, i * m : (i + 1) * m] += step.B
        ex = step.A @ ex + step.c
        F[i * n : (i + 1) * n] = Fx
        Phi[i * n : (i + 1) * n] = Px
        e[i * n : (i + 1) * n] = ex
    return F, Phi, e


def condense(
    dynamics: Sequence[AffineStep],
    state_weights: Sequence[Mat],
    input_weights: Sequence[Mat],
    u_lo: Vec,
    u_hi: Vec,
    state_rows: Mat | None = None,
    x_lo: Vec | None = None,
    x_hi: Vec | None = None,
    terminals: Sequence[TerminalEllipsoid] = (),
    settings: SolverSettings = DEFAULT_SOLVER_SETTINGS,
) -> CondensedProgram:
    """Condense an affine time-varying horizon into a program over ``U``.

    ``state_weights[i]`` weighs ``x(i+1)`` and ``input_weights[i]`` weighs
    ``u(i)``. Input bounds hold for ``u(0) ... u(N-1)``; state rows
    ``state_rows @ x`` hold for ``x(1) ... x(N-1)``; terminal ellipsoids bind
    ``x(N)``.
    """
    N = len(dynamics)
    if N == 0:
        raise ValueError("horizon must contain at least one step")
    n, m = dynamics[0].B.shape
    if len(state_weights) != N or len(input_weights) != N:
        raise ValueError("one state and one input weight per step is required")
    F, Phi, e = _stack_predictions(dynamics, n, m)

    Wx = scipy.linalg.block_diag(*state_weights)
    Wu = scipy.linalg.block_diag(*input_weights)
    H = Phi.T @ Wx @ Phi + Wu
    H = 0.5 * (H + H.T)
    f_map = Phi.T @ Wx @ F
    f_offset = Phi.T @ Wx @ e
    const_quad = F.T @ Wx @ F
    const_lin = F.T @ Wx @ e
    const_offset = float(e @ Wx @ e)

    rows: list[Vec] = []
    d_rows: list[Vec] = []
    d_off: list[float] = []
    lo: list[float] = []
    hi: list[float] = []
    keys: list[tuple[str, int, int]] = []
    for i in range(N):
        for j in range(m):
            if math.isfinite(u_lo[j]) or math.isfinite(u_hi[j]):
                row = np.zeros(N * m)
                row[i * m + j] = 1.0
                rows.append(row)
                d_rows.append(np.zeros(n))
                d_off.append(0.0)
                lo.append(float(u_lo[j]))
                hi.append(float(u_hi[j]))
                keys.append(("u", i, j))
    if state_rows is not None and x_lo is not None and x_hi is not None:
        for i in range(1, N):
            block = slice((i - 1) * n, i * n)
            for r in range(state_rows.shape[0]):
                if not (math.isfinite(x_lo[r]) or math.isfinite(x_hi[r])):
                    continue
                a = state_rows[r]
                rows.append(a @ Phi[block])
                d_rows.append(a @ F[block])
                d_off.append(float(a @ e[block]))
                lo.append(float(x_lo[r]))
                hi.append(float(x_hi[r]))
                keys.append(("x", i, r))
    n_box = len(rows)
    ellipsoids: list[_EllipsoidBlock] = []
    last = slice((N - 1) * n, N * n)
    for t, term in enumerate(terminals):
        if not math.isfinite(term.eps):
            continue
        S = as_matrix(term.selector, "selector")
        start = len(rows)
        for r in range(S.shape[0]):
            rows.append(S[r] @ Phi[last])
            d_rows.append(S[r] @ F[last])
            d_off.append(float(S[r] @ e[last]))
            keys.append(("t", t, r))
        values, vectors = sym_eig(term.P)
        if values[0] <= 0.0:
            raise NotPositiveDefinite("terminal weight must be positive definite")
        ellipsoids.append(
            _EllipsoidBlock(
                start=start,
                stop=len(rows),
                P=term.P,
                eps=float(term.eps),
                eigenvalues=values,
                eigenvectors=vectors,
                P_inv=(vectors / values) @ vectors.T,
            )
        )

    dim = N * m
    C = np.array(rows).reshape(len(rows), dim)
    base = CondensedProgram(
        n=n,
        m=m,
        N=N,
        dynamics=list(dynamics),
        state_weights=list(state_weights),
        input_weights=list(input_weights),
        F=F,
        Phi=Phi,
        e=e,
        H=H,
        f_map=f_map,
        f_offset=f_offset,
        const_quad=const_quad,
        const_lin=const_lin,
        const_offset=const_offset,
        C=C,
        D_map=np.array(d_rows).reshape(len(rows), n),
        d_offset=np.array(d_off),
        lo=np.array(lo),
        hi=np.array(hi),
        n_box=n_box,
        ellipsoids=ellipsoids,
        row_keys=keys,
        settings=settings,
        H_reg=H,
        row_scale=np.ones(len(rows)),
        cost_scale=1.0,
        kkt_factor=(np.eye(1), True),
    )
    return _assemble(base, H=H, f_map=f_map, f_offset=f_offset, regularize=True)


def _assemble(
    base: CondensedProgram,
    H: Mat,
    f_map: Mat,
    f_offset: Vec,
    regularize: bool,
) -> CondensedProgram:
    """Regularize, scale and factor a program around a given objective."""
    settings = base.settings
    dim = H.shape[0]
    H_reg = H.copy()
    if regularize:
        H_reg += settings.regularization * float(np.trace(H)) / dim * np.eye(dim)
    try:
        np.linalg.cholesky(H_reg)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"regularized Hessian: {exc}") from exc

    scale = np.ones(base.n_rows)
    norms = np.linalg.norm(base.C, axis=1)
    for r in range(base.n_box):
        if norms[r] > 1e-12:
            scale[r] = 1.0 / norms[r]
    for block in base.ellipsoids:
        size = float(np.linalg.norm(base.C[block.start : block.stop], 2))
        if size > 1e-12:
            scale[block.start : block.stop] = 1.0 / size
    cost_scale = 1.0 / max(float(np.max(np.diag(2.0 * H_reg))), 1e-300)
    C_scaled = scale[:, None] * base.C
    kkt = (
        cost_scale * 2.0 * H_reg
        + settings.sigma * np.eye(dim)
        + settings.rho * C_scaled.T @ C_scaled
    )
    factor = scipy.linalg.cho_factor(kkt)
    return replace(
        base,
        H=H,
        f_map=f_map,
        f_offset=f_offset,
        H_reg=H_reg,
        row_scale=scale,
        cost_scale=cost_scale,
        kkt_factor=factor,
    )


def build_condensed(
    sys: LinearSystem,
    design: ControllerDesign,
    settings: SolverSettings = DEFAULT_SOLVER_SETTINGS,
) -> CondensedProgram:
    """Program with the shifted stage-cost window of the finite-time scheme.

    States ``x(1) ... x(n-1)`` and inputs ``u(0) ... u(n-1)`` carry zero
    weight, ``Q``/``R`` apply from step ``n`` to ``N-1`` and ``P`` on ``x(N)``.
    """
    n, N = sys.n, design.N
    dynamics = [AffineStep(sys.A, sys.B, np.zeros(n)) for _ in range(N)]
    state_weights, input_weights = window_weights(
        n, N, design.Q, design.R, design.P
    )
    return condense(
        dynamics,
        state_weights,
        input_weights,
        design.box.u_lo,
        design.box.u_hi,
        state_rows=np.eye(n),
        x_lo=design.box.x_lo,
        x_hi=design.box.x_hi,
        terminals=[TerminalEllipsoid(design.P, design.eps, np.eye(n))],
        settings=settings,
    )


def window_weights(
    start: int, N: int, Q: Mat, R: Mat, P: Mat
) -> tuple[list[Mat], list[Mat]]:
    """Per-step weights: zero before ``start``, ``Q``/``R`` up to ``N-1``, ``P``
    on ``x(N)``."""
    n, m = Q.shape[0], R.shape[0]
    states = [Q if i >= start else np.zeros((n, n)) for i in range(1, N)] + [P]
    inputs = [R if i >= start else np.zeros((m, m)) for i in range(N)]
    return states, inputs


def project_ellipsoid(
    z: Vec,
    P: Mat,
    eps: float,
    eig: tuple[Vec, Mat] | None = None,
) -> Vec:
    """Euclidean projection of ``z`` onto ``{x : x' P x <= eps}``."""
    z = np.asarray(z, dtype=np.float64)
    if float(z @ P @ z) <= eps:
        return z
    values, vectors = eig if eig is not None else sym_eig(P)
    zh = vectors.T @ z
    weighted = values * zh * zh

    def g(mu: float) -> float:
        return float(np.sum(weighted / (1.0 + mu * values) ** 2)) - eps

    lo = 0.0
    hi = (math.sqrt(float(np.sum(weighted)) / eps) - 1.0) / float(values[0])
    hi = max(hi, 1e-300)
    mu = 0.0
    for _ in range(200):
        value = g(mu)
        if abs(value) <= 1e-10 * eps:
            break
        if value > 0.0:
            lo = mu
        else:
            hi = mu
        slope = -2.0 * float(np.sum(weighted * values / (1.0 + mu * values) ** 3))
        candidate = mu - value / slope if slope < 0.0 else hi
        mu = candidate if lo < candidate < hi else 0.5 * (lo + hi)
    result: Vec = vectors @ (zh / (1.0 + mu * values))
    return result


def _project(prog: CondensedProgram, w: Vec, off: Vec) -> Vec:
    """Project scaled constraint values onto ``scale * (set - off)``."""
    s = prog.row_scale
    out = w.copy()
    nb = prog.n_box
    if nb:
        out[:nb] = np.clip(
            w[:nb], s[:nb] * (prog.lo - off[:nb]), s[:nb] * (prog.hi - off[:nb])
        )
    for block in prog.ellipsoids:
        sl = slice(block.start, block.stop)
        scale = s[block.start]
        point = project_ellipsoid(
            w[sl] / scale + off[sl],
            block.P,
            block.eps,
            (block.eigenvalues, block.eigenvectors),
        )
        out[sl] = scale * (point - off[sl])
    return out


def constraint_violation(prog: CondensedProgram, x0: Vec, U: Vec) -> float:
    """Largest absolute constraint violation at ``U``."""
    if prog.n_rows == 0:
        return 0.0
    v = prog.C @ U + prog.offsets(x0)
    nb = prog.n_box
    worst = 0.0
    if nb:
        excess = np.maximum(prog.lo - v[:nb], v[:nb] - prog.hi)
        worst = max(worst, float(excess.max()))
    for block in prog.ellipsoids:
        y = v[block.start : block.stop]
        proj = project_ellipsoid(
            y, block.P, block.eps, (block.eigenvalues, block.eigenvectors)
        )
        worst = max(worst, float(np.linalg.norm(y - proj)))
    return worst


def _constant_rows_infeasible(prog: CondensedProgram, off: Vec) -> bool:
    """Rows that do not depend on ``U`` must hold at the offset alone."""
    norms = np.linalg.norm(prog.C, axis=1)
    tol = prog.settings.constraint_tol
    for r in range(prog.n_box):
        if norms[r] <= 1e-12 and not (
            prog.lo[r] - tol <= off[r] <= prog.hi[r] + tol
        ):
            return True
    for block in prog.ellipsoids:
        sl = slice(block.start, block.stop)
        if np.all(norms[sl] <= 1e-12):
            y = off[sl]
            if float(y @ block.P @ y) > block.eps * (1.0 + tol):
                return True
    return False


def _support(prog: CondensedProgram, dy: Vec, off: Vec) -> float:
    """Support function of the shifted constraint set in direction ``dy``."""
    nb = prog.n_box
    d_box = dy[:nb]
    moving = d_box != 0.0
    bound = np.where(d_box > 0.0, prog.hi - off[:nb], prog.lo - off[:nb])[moving]
    if not np.all(np.isfinite(bound)):
        return math.inf
    total = float(d_box[moving] @ bound)
    for block in prog.ellipsoids:
        sl = slice(block.start, block.stop)
        d = dy[sl]
        total += math.sqrt(block.eps * float(d @ block.P_inv @ d)) - float(d @ off[sl])
    return total


def _polish(
    prog: CondensedProgram, x0: Vec, q: Vec, z: Vec, y: Vec
) -> tuple[Vec, Vec] | None:
    """Solve the equality QP on the guessed active box rows.

    ``z`` and ``y`` are unscaled constraint values (without offsets) and
    multipliers. Returns ``(U, multipliers)`` for an exact KKT point or
    ``None``.
    """
    off = prog.offsets(x0)
    nb = prog.n_box
    lo = prog.lo - off[:nb]
    hi = prog.hi - off[:nb]
    lower = np.flatnonzero(z[:nb] - lo < -y[:nb])
    upper = np.flatnonzero(hi - z[:nb] < y[:nb])
    active = np.concatenate([lower, upper])
    targets = np.concatenate([lo[lower], hi[upper]])
    if not np.all(np.isfinite(targets)):
        return None
    P_bar = 2.0 * prog.H_reg
    dim = P_bar.shape[0]
    A_act = prog.C[active]
    k = active.shape[0]
    kkt = np.block([[P_bar, A_act.T], [A_act, np.zeros((k, k))]])
    rhs = np.concatenate([-q, targets])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        if np.linalg.norm(kkt @ sol - rhs, np.inf) > 1e-9 * (1.0 + np.abs(rhs).max()):
            return None
    U = sol[:dim]
    nu = sol[dim:]
    sign_tol = 1e-9 * (1.0 + float(np.abs(q).max(initial=0.0)))
    if np.any(nu[: lower.shape[0]] > sign_tol) or np.any(
        nu[lower.shape[0] :] < -sign_tol
    ):
        return None
    v = prog.C @ U
    bound_tol = 1e-9 * (1.0 + float(np.abs(targets).max(initial=0.0)))
    if nb and (np.any(v[:nb] < lo - bound_tol) or np.any(v[:nb] > hi + bound_tol)):
        return None
    for block in prog.ellipsoids:
        yb = v[block.start : block.stop] + off[block.start : block.stop]
        if float(yb @ block.P @ yb) > block.eps:
            return None
    multipliers = np.zeros(prog.n_rows)
    multipliers[active] = nu
    return U, multipliers


def _result(
    prog: CondensedProgram,
    x0: Vec,
    U: Vec,
    status: SolveStatus,
    iterations: int,
    r_prim: float,
    r_dual: float,
    multipliers: Vec,
    polished: bool = False,
    y_scaled: Vec | None = None,
) -> SolveResult:
    return SolveResult(
        U_opt=U,
        X_pred=prog.predict(x0, U),
        status=status,
        objective=prog.objective(x0, U),
        iterations=iterations,
        primal_residual=r_prim,
        dual_residual=r_dual,
        multipliers=multipliers,
        violation=constraint_violation(prog, x0, U),
        polished=polished,
        scaled_duals=y_scaled,
    )


def solve(
    prog: CondensedProgram, x0: Vec, warm: WarmStart | None = None
) -> SolveResult:
    """Minimize ``U' H U + 2 f(x0)' U`` over the program's constraints."""
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.shape[0] != prog.n:
        raise ValueError(f"x0 has length {x0.shape[0]}, expected {prog.n}")
    settings = prog.settings
    dim = prog.N * prog.m
    P_bar = 2.0 * prog.H_reg
    q = 2.0 * prog.linear_term(x0)

    if prog.n_rows == 0:
        U = scipy.linalg.cho_solve(scipy.linalg.cho_factor(P_bar), -q)
        return _result(prog, x0, U, SolveStatus.OPTIMAL, 0, 0.0, 0.0, np.zeros(0))

    off = prog.offsets(x0)
    if _constant_rows_infeasible(prog, off):
        logger.debug("constant constraint rows violated at x0")
        return _result(
            prog,
            x0,
            np.zeros(dim),
            SolveStatus.INFEASIBLE,
            0,
            math.inf,
            0.0,
            np.zeros(prog.n_rows),
        )

    s = prog.row_scale
    c = prog.cost_scale
    rho, sigma, alpha = settings.rho, settings.sigma, settings.alpha
    C_s = s[:, None] * prog.C
    q_s = c * q

    U = np.zeros(dim)
    y = np.zeros(prog.n_rows)
    if warm is not None:
        if warm.U.shape[0] == dim:
            U = np.array(warm.U, dtype=np.float64)
        if warm.y is not None and warm.y.shape[0] == prog.n_rows:
            y = np.array(warm.y, dtype=np.float64)
    z = _project(prog, C_s @ U, off)

    r_prim = r_dual = math.inf
    y_un = s * y / c
    for k in range(1, settings.max_iter + 1):
        rhs = sigma * U - q_s + C_s.T @ (rho * z - y)
        U_tilde = scipy.linalg.cho_solve(prog.kkt_factor, rhs)
        U = alpha * U_tilde + (1.0 - alpha) * U
        w_relax = alpha * (C_s @ U_tilde) + (1.0 - alpha) * z
        z_next = _project(prog, w_relax + y / rho, off)
        y_prev = y
        y = y + rho * (w_relax - z_next)
        z = z_next

        Cu = prog.C @ U
        z_un = z / s
        y_un = s * y / c
        Cty = prog.C.T @ y_un
        PU = P_bar @ U
        r_prim = float(np.abs(Cu - z_un).max())
        r_dual = float(np.abs(PU + q + Cty).max())
        prim_scale = max(float(np.abs(Cu).max()), float(np.abs(z_un).max()))
        dual_scale = max(
            float(np.abs(PU).max()),
            float(np.abs(Cty).max()),
            float(np.abs(q).max(initial=0.0)),
        )
        converged = (
            r_prim <= settings.eps_abs + settings.eps_rel * prim_scale
            and r_dual <= settings.eps_abs + settings.eps_rel * dual_scale
            and constraint_violation(prog, x0, U) <= settings.constraint_tol
        )
        polish_due = k % settings.polish_interval == 0 and (
            r_prim <= settings.polish_start * (1.0 + prim_scale)
            and r_dual <= settings.polish_start * (1.0 + dual_scale)
        )
        if settings.polish and (converged or polish_due):
            polished = _polish(prog, x0, q, z_un, y_un)
            if polished is not None:
                U_pol, multipliers = polished
                return _result(
                    prog,
                    x0,
                    U_pol,
                    SolveStatus.OPTIMAL,
                    k,
                    r_prim,
                    r_dual,
                    multipliers,
                    polished=True,
                    y_scaled=y,
                )
        if converged:
            return _result(
                prog,
                x0,
                U,
                SolveStatus.OPTIMAL,
                k,
                r_prim,
                r_dual,
                y_un,
                y_scaled=y,
            )

        primal_open = r_prim > settings.eps_abs + settings.eps_rel * prim_scale
        if primal_open and _certificate(prog, s * (y - y_prev), off):
            logger.debug(f"infeasibility certificate after {k} iterations")
            return _result(
                prog,
                x0,
                U,
                SolveStatus.INFEASIBLE,
                k,
                r_prim,
                r_dual,
                y_un,
                y_scaled=y,
            )

    logger.warning(
        f"solver hit {settings.max_iter} iterations "
        f"(primal {r_prim:.2e}, dual {r_dual:.2e})"
    )
    return _result(
        prog,
        x0,
        U,
        SolveStatus.MAX_ITERS,
        settings.max_iter,
        r_prim,
        r_dual,
        y_un,
        y_scaled=y,
    )


def _certificate(prog: CondensedProgram, dy: Vec, off: Vec) -> bool:
    """Farkas test on the latest dual increment, normalized to unit sup-norm.

    ``dy`` only has to carry the row scaling; a common positive factor such as
    the cost scale does not change the direction.
    """
    dy_norm = float(np.abs(dy).max())
    if dy_norm <= 1e-12:
        return False
    eps = prog.settings.eps_infeasible
    v = dy / dy_norm
    if float(np.abs(prog.C.T @ v).max()) >= eps:
        return False
    return _support(prog, v, off) < -eps


def _box_inequalities(prog: CondensedProgram, off: Vec) -> tuple[Mat, Vec]:
    """Finite box rows written as ``A U <= b``."""
    nb = prog.n_box
    C = prog.C[:nb]
    upper = np.isfinite(prog.hi)
    lower = np.isfinite(prog.lo)
    A = np.vstack([C[upper], -C[lower]])
    b = np.concatenate(
        [prog.hi[upper] - off[:nb][upper], off[:nb][lower] - prog.lo[lower]]
    )
    return A, b


def _phase_one(prog: CondensedProgram, x0: Vec, off: Vec) -> bool | None:
    """Decide feasibility directly, or return ``None`` when undecided.

    A linear program settles the box rows. The ellipsoids are then handled by
    the epigraph program ``min t`` subject to ``y_j' P_j y_j <= eps_j (1 + t)``
    and the box rows: the set is nonempty exactly when the optimum has
    ``t <= 0``.
    """
    dim = prog.N * prog.m
    tol = prog.settings.constraint_tol
    A, b = _box_inequalities(prog, off)
    start = np.zeros(dim)
    if A.shape[0]:
        lp = scipy.optimize.linprog(
            np.zeros(dim), A_ub=A, b_ub=b, bounds=(None, None), method="highs"
        )
        if lp.status == 2:
            return False
        if lp.status != 0:
            return None
        start = lp.x
    if constraint_violation(prog, x0, start) <= tol:
        return True
    blocks = prog.ellipsoids
    if not blocks:
        return None

    def images(U: Vec) -> list[Vec]:
        v = prog.C @ U + off
        return [v[block.start : block.stop] for block in blocks]

    def levels(U: Vec) -> Vec:
        return np.array(
            [float(y @ bl.P @ y) / bl.eps for y, bl in zip(images(U), blocks)]
        )

    def margin_jac(w: Vec) -> Mat:
        rows = [
            np.append(-2.0 * (bl.P @ y) @ prog.C[bl.start : bl.stop] / bl.eps, 1.0)
            for y, bl in zip(images(w[:dim]), blocks)
        ]
        return np.array(rows)

    unit = np.zeros(dim + 1)
    unit[-1] = 1.0
    constraints = [
        {
            "type": "ineq",
            "fun": lambda w: 1.0 + w[-1] - levels(w[:dim]),
            "jac": margin_jac,
        }
    ]
    if A.shape[0]:
        A_ext = np.hstack([A, np.zeros((A.shape[0], 1))])
        constraints.append(
            {"type": "ineq", "fun": lambda w: b - A_ext @ w, "jac": lambda w: -A_ext}
        )
    # t >= -1 keeps the epigraph bounded when every level can reach zero
    result = scipy.optimize.minimize(
        lambda w: w[-1],
        np.append(start, float(levels(start).max()) - 1.0),
        jac=lambda w: unit,
        method="SLSQP",
        bounds=[(None, None)] * dim + [(-1.0, None)],
        constraints=constraints,
        options={"ftol": 1e-12, "maxiter": 200},
    )
    if constraint_violation(prog, x0, result.x[:dim]) <= tol:
        return True
    if result.success and float(result.x[-1]) > prog.settings.eps_infeasible:
        return False
    return None


def check_feasible(prog: CondensedProgram, x0: Vec) -> bool:
    """True when the constraint set of ``prog`` is nonempty at ``x0``.

    States the direct test leaves open fall back to the capped
    operator-splitting solve of ``feasibility_view``.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.shape[0] != prog.n:
        raise ValueError(f"x0 has length {x0.shape[0]}, expected {prog.n}")
    if prog.n_rows == 0:
        return True
    off = prog.offsets(x0)
    if _constant_rows_infeasible(prog, off):
        return False
    decided = _phase_one(prog, x0, off)
    if decided is not None:
        return decided
    logger.debug(f"direct feasibility test undecided at x0={x0.tolist()}")
    result = solve(prog.feasibility_view, x0)
    if result.status == SolveStatus.MAX_ITERS:
        logger.info(f"feasibility check hit the iteration cap at x0={x0.tolist()}")
    return (
        result.status == SolveStatus.OPTIMAL
        and result.violation <= prog.settings.constraint_tol
    )


def true_cost(prog: CondensedProgram, x0: Vec, U: Vec) -> float:
    """Full horizon cost by forward simulation of the prediction model."""
    x = np.asarray(x0, dtype=np.float64).reshape(-1)
    U = np.asarray(U, dtype=np.float64).reshape(prog.N, prog.m)
    total = 0.0
    for i, step in enumerate(prog.dynamics):
        u = U[i]
        total += float(u @ prog.input_weights[i] @ u)
        x = step.A @ x + step.B @ u + step.c
        total += float(x @ prog.state_weights[i] @ x)
    return total


def shift_warm_start(
    prog: CondensedProgram, result: SolveResult, tail_input: Vec
) -> WarmStart:
    """Shift inputs and duals one step forward and append ``tail_input``."""
    m = prog.m
    U = np.concatenate([result.U_opt[m:], np.asarray(tail_input).reshape(-1)])
    if result.scaled_duals is None:
        return WarmStart(U=U)
    index = {key: r for r, key in enumerate(prog.row_keys)}
    y = np.zeros(prog.n_rows)
    for r, (kind, step, pos) in enumerate(prog.row_keys):
        source = index.get((kind, step if kind == "t" else step + 1, pos))
        if source is not None:
            y[r] = result.scaled_duals[source]
    return WarmStart(U=U, y=y)
