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
"""Closed-loop simulation, disturbance studies and feasibility-region scans."""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

import numpy as np
import numpy.typing as npt
from opentelemetry import trace

from .controller import ControlStep, Plant
from .design import BoxConstraintSet, ControllerDesign
from .errors import RuntimeControlError
from .matrixcore import Mat, Vec, as_vector
from .qpsolver import CondensedProgram, build_condensed, check_feasible

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

SETTLE_TOL = 1e-9
VIOLATION_TOL = 1e-6


class Controller(Protocol):
    def step(self, x: npt.ArrayLike) -> ControlStep: ...

    def reset(self) -> None: ...


@dataclass(frozen=True)
class DisturbanceSpec:
    """Uniform input-channel disturbance ``|w_i| <= bound``."""

    bound: float
    seed: int = 0


@dataclass
class Trajectory:
    states: Mat
    inputs: Mat
    costs: list[float] = field(default_factory=list)
    statuses: list[str] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    settle_step: int | None = None
    max_violation: float = 0.0
    truncated: bool = False
    reason: str = ""

    @property
    def violated(self) -> bool:
        return self.max_violation > VIOLATION_TOL

    @property
    def steps(self) -> int:
        return int(self.inputs.shape[0])


def settle_step(states: Mat, tol: float = SETTLE_TOL) -> int | None:
    """First ``k`` after which every recorded state is within ``tol``."""
    norms = np.abs(states).max(axis=1)
    outside = np.flatnonzero(norms > tol)
    if outside.size == 0:
        return 0
    candidate = int(outside[-1]) + 1
    return candidate if candidate < states.shape[0] else None


def simulate(
    stepper: Controller,
    plant: Plant,
    x0: npt.ArrayLike,
    steps: int,
    disturbance: DisturbanceSpec | None = None,
    box: BoxConstraintSet | None = None,
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Measure, solve and apply for ``steps`` steps.

    The controller is reset first. Infeasibility or SQP failure truncates the
    run instead of raising.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x = as_vector(x0, "x0")
    if disturbance is not None and rng is None:
        rng = np.random.default_rng(disturbance.seed)
    stepper.reset()
    states = [x.copy()]
    inputs: list[Vec] = []
    trajectory = Trajectory(states=np.zeros((0, x.shape[0])), inputs=np.zeros((0, 0)))
    with tracer.start_as_current_span("simulate") as span:
        span.set_attribute("steps", steps)
        for k in range(steps):
            try:
                control = stepper.step(x)
            except RuntimeControlError as exc:
                logger.warning(f"trajectory truncated at k={k}: {exc}")
                trajectory.truncated = True
                trajectory.reason = str(exc)
                break
            u = control.u
            w = np.zeros_like(u)
            if disturbance is not None and rng is not None and disturbance.bound > 0:
                w = rng.uniform(-disturbance.bound, disturbance.bound, size=u.shape)
            x = np.asarray(plant.step(x, u + w), dtype=np.float64)
            if box is not None:
                trajectory.max_violation = max(
                    trajectory.max_violation,
                    box.input_violation(u),
                    box.state_violation(x),
                )
            inputs.append(u)
            states.append(x.copy())
            trajectory.costs.append(control.predicted_cost)
            trajectory.statuses.append(control.status.value)
            trajectory.iterations.append(control.solve_iterations)
        trajectory.states = np.array(states)
        m = inputs[0].shape[0] if inputs else 0
        trajectory.inputs = np.array(inputs).reshape(len(inputs), m)
        trajectory.settle_step = settle_step(trajectory.states)
        span.set_attribute("truncated", trajectory.truncated)
        settled = trajectory.settle_step
        span.set_attribute("settle_step", -1 if settled is None else settled)
    if trajectory.violated:
        logger.warning(f"constraint violation {trajectory.max_violation:.2e}")
    return trajectory


def finite_time_check(traj: Trajectory, tol: float = SETTLE_TOL) -> int | None:
    """Minimal ``T`` with ``|x(k)| <= tol`` for all ``k >= T`` and at least
    ``n`` recorded steps after ``T``."""
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    T = settle_step(traj.states, tol)
    if T is None:
        return None
    n = traj.states.shape[1]
    return T if traj.states.shape[0] - 1 - T >= n else None


@dataclass
class MonteCarloSummary:
    runs: list[Trajectory]
    tail_start: int
    tail_bound: float
    max_abs_input: float
    infeasible_runs: int


def monte_carlo(
    stepper: Controller,
    plant: Plant,
    x0: npt.ArrayLike,
    steps: int,
    runs: int,
    seed: int,
    w_bound: float,
    box: BoxConstraintSet | None = None,
) -> MonteCarloSummary:
    """Seeded disturbance runs; the tail bound is the sup-norm of states from
    ``steps // 2`` on, over all runs."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    children = np.random.SeedSequence(seed).spawn(runs)
    tail_start = steps // 2
    results: list[Trajectory] = []
    with tracer.start_as_current_span("monte_carlo") as span:
        span.set_attribute("runs", runs)
        for i, child in enumerate(children):
            rng = np.random.default_rng(child)
            traj = simulate(
                stepper,
                plant,
                x0,
                steps,
                DisturbanceSpec(bound=w_bound, seed=seed),
                box,
                rng,
            )
            if traj.truncated:
                logger.warning(f"run {i} truncated: {traj.reason}")
            results.append(traj)
        tails = [
            float(np.abs(t.states[tail_start:]).max())
            for t in results
            if t.states.shape[0] > tail_start
        ]
        inputs = [float(np.abs(t.inputs).max()) for t in results if t.inputs.size]
        summary = MonteCarloSummary(
            runs=results,
            tail_start=tail_start,
            tail_bound=max(tails) if tails else math.inf,
            max_abs_input=max(inputs) if inputs else 0.0,
            infeasible_runs=sum(1 for t in results if t.truncated),
        )
        span.set_attribute("tail_bound", summary.tail_bound)
    return summary


class CellLabel(str, Enum):
    FEASIBLE_BOTH = "FeasibleBoth"
    FEASIBLE_PROPOSED_ONLY = "FeasibleProposedOnly"
    FEASIBLE_BASELINE_ONLY = "FeasibleBaselineOnly"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid over the first two state coordinates."""

    lo: tuple[float, float] = (-3.0, -3.0)
    hi: tuple[float, float] = (3.0, 3.0)
    resolution: tuple[int, int] = (61, 61)

    def axes(self) -> tuple[Vec, Vec]:
        return (
            np.linspace(self.lo[0], self.hi[0], self.resolution[0]),
            np.linspace(self.lo[1], self.hi[1], self.resolution[1]),
        )


@dataclass
class FeasibilityMap:
    grid: GridSpec
    points: Mat
    labels: list[CellLabel]

    @property
    def counts(self) -> dict[CellLabel, int]:
        return {label: self.labels.count(label) for label in CellLabel}

    @property
    def proposed_count(self) -> int:
        c = self.counts
        return c[CellLabel.FEASIBLE_BOTH] + c[CellLabel.FEASIBLE_PROPOSED_ONLY]

    @property
    def baseline_count(self) -> int:
        c = self.counts
        return c[CellLabel.FEASIBLE_BOTH] + c[CellLabel.FEASIBLE_BASELINE_ONLY]

    @property
    def containment_holds(self) -> bool:
        return self.counts[CellLabel.FEASIBLE_BASELINE_ONLY] == 0

    @property
    def ratio(self) -> float:
        if self.baseline_count == 0:
            return math.inf
        return self.proposed_count / self.baseline_count

    def proposed_feasible(self) -> Mat:
        mask = [
            label
            in (CellLabel.FEASIBLE_BOTH, CellLabel.FEASIBLE_PROPOSED_ONLY)
            for label in self.labels
        ]
        result: Mat = self.points[np.array(mask, dtype=bool)]
        return result


def _label(proposed: bool, baseline: bool) -> CellLabel:
    if proposed and baseline:
        return CellLabel.FEASIBLE_BOTH
    if proposed:
        return CellLabel.FEASIBLE_PROPOSED_ONLY
    if baseline:
        return CellLabel.FEASIBLE_BASELINE_ONLY
    return CellLabel.INFEASIBLE


def _scan_row(
    args: tuple[CondensedProgram, CondensedProgram, Mat],
) -> list[CellLabel]:
    proposed, baseline, points = args
    return [
        _label(check_feasible(proposed, x), check_feasible(baseline, x))
        for x in points
    ]


def grid_points(grid: GridSpec, n: int) -> list[Mat]:
    """Row-major grid states; coordinates beyond the first two are zero."""
    xs, ys = grid.axes()
    rows = []
    for y in ys:
        row = np.zeros((xs.shape[0], n))
        row[:, 0] = xs
        row[:, 1] = y
        rows.append(row)
    return rows


def _as_program(item: ControllerDesign | CondensedProgram) -> CondensedProgram:
    if isinstance(item, ControllerDesign):
        return build_condensed(item.system, item)
    return item


def feasibility_scan(
    design_a: ControllerDesign | CondensedProgram,
    design_b: ControllerDesign | CondensedProgram,
    grid: GridSpec = GridSpec(),
    workers: int = 1,
) -> FeasibilityMap:
    """Label every grid state by feasibility under the proposed design
    ``design_a`` and the baseline ``design_b``.

    Rows are fanned out to ``workers`` processes; labels keep row-major order.
    """
    proposed = _as_program(design_a)
    baseline = _as_program(design_b)
    if proposed.n != baseline.n:
        raise ValueError("programs must share the state dimension")
    rows = grid_points(grid, proposed.n)
    with tracer.start_as_current_span("feasibility_scan") as span:
        span.set_attribute("cells", sum(r.shape[0] for r in rows))
        span.set_attribute("workers", workers)
        tasks = [(proposed, baseline, row) for row in rows]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                labelled = list(pool.map(_scan_row, tasks))
        else:
            labelled = [_scan_row(task) for task in tasks]
        labels = [label for row in labelled for label in row]
        result = FeasibilityMap(grid=grid, points=np.vstack(rows), labels=labels)
        span.set_attribute("proposed", result.proposed_count)
        span.set_attribute("baseline", result.baseline_count)
    if not result.containment_holds:
        logger.warning(
            f"{result.counts[CellLabel.FEASIBLE_BASELINE_ONLY]} cells feasible "
            "for the baseline only"
        )
    logger.info(
        f"feasibility scan: proposed={result.proposed_count}, "
        f"baseline={result.baseline_count}"
    )
    return result
