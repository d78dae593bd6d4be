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
"""Design files, CSV tables and static SVG plots."""

import logging
import math
from pathlib import Path
from typing import Literal

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from pydantic import BaseModel, ConfigDict  # noqa: E402

from .design import (  # noqa: E402
    BoxConstraintSet,
    ControllerDesign,
    DecoupledForm,
    DesignReport,
    LinearSystem,
    MultiInputDesign,
)
from .problems import ConstraintSpec, MatrixSpec  # noqa: E402
from .simharness import (  # noqa: E402
    CellLabel,
    FeasibilityMap,
    MonteCarloSummary,
    Trajectory,
)

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "finite-time-mpc"


class Artifact(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _finite_or_none(value: float) -> float | None:
    return value if math.isfinite(value) else None


def _level(value: float | None) -> float:
    return math.inf if value is None else value


def box_to_spec(box: BoxConstraintSet) -> ConstraintSpec:
    def entries(values: np.ndarray) -> list[float | None]:
        return [_finite_or_none(float(v)) for v in values]

    return ConstraintSpec(
        x_lo=entries(box.x_lo),
        x_hi=entries(box.x_hi),
        u_lo=entries(box.u_lo),
        u_hi=entries(box.u_hi),
    )


def spec_to_box(spec: ConstraintSpec, n: int, m: int) -> BoxConstraintSet:
    return BoxConstraintSet.from_bounds(
        n, m, spec.x_lo, spec.x_hi, spec.u_lo, spec.u_hi
    )


class ReportArtifact(Artifact):
    lyapunov_residual: float
    nilpotency_residual: float | None
    samples: int
    inputs_within_bounds: bool
    states_within_bounds: bool
    lyapunov_decrease: bool
    worst_decrease_margin: float | None
    passed: bool

    @classmethod
    def from_report(cls, report: DesignReport) -> "ReportArtifact":
        return cls(
            lyapunov_residual=report.lyapunov_residual,
            nilpotency_residual=report.nilpotency_residual,
            samples=report.samples,
            inputs_within_bounds=report.inputs_within_bounds,
            states_within_bounds=report.states_within_bounds,
            lyapunov_decrease=report.lyapunov_decrease,
            worst_decrease_margin=_finite_or_none(report.worst_decrease_margin),
            passed=report.passed,
        )


class ControllerArtifact(Artifact):
    N: int
    A: MatrixSpec
    B: MatrixSpec
    constraints: ConstraintSpec
    Q: MatrixSpec
    R: MatrixSpec
    K: MatrixSpec
    P: MatrixSpec
    K_db: MatrixSpec | None = None
    eps: float | None

    @classmethod
    def from_design(cls, design: ControllerDesign) -> "ControllerArtifact":
        return cls(
            N=design.N,
            A=MatrixSpec.from_array(design.system.A),
            B=MatrixSpec.from_array(design.system.B),
            constraints=box_to_spec(design.box),
            Q=MatrixSpec.from_array(design.Q),
            R=MatrixSpec.from_array(design.R),
            K=MatrixSpec.from_array(design.K),
            P=MatrixSpec.from_array(design.P),
            K_db=None if design.K_db is None else MatrixSpec.from_array(design.K_db),
            eps=_finite_or_none(design.eps),
        )

    def to_design(self) -> ControllerDesign:
        system = LinearSystem(self.A.to_array(), self.B.to_array())
        return ControllerDesign(
            system=system,
            box=spec_to_box(self.constraints, system.n, system.m),
            N=self.N,
            Q=self.Q.to_array(),
            R=self.R.to_array(),
            K=self.K.to_array(),
            P=self.P.to_array(),
            eps=_level(self.eps),
            K_db=None if self.K_db is None else self.K_db.to_array(),
        )


class DecouplingArtifact(Artifact):
    M: MatrixSpec
    F: MatrixSpec
    G: MatrixSpec
    M_inv: MatrixSpec
    q: int
    block_dims: list[int]
    active_inputs: list[int]
    z_radius: float | None
    shrink: float
    blocks: list[ControllerArtifact]


class DesignArtifact(Artifact):
    """Everything needed to rebuild a controller without re-running synthesis."""

    problem: str
    kind: Literal["linear", "multi_input", "nonlinear"]
    N: int
    baseline_N: int | None = None
    A: MatrixSpec
    B: MatrixSpec
    constraints: ConstraintSpec
    controller: ControllerArtifact | None = None
    decoupling: DecouplingArtifact | None = None
    report: ReportArtifact | None = None
    block_reports: list[ReportArtifact] = []

    def controller_design(self) -> ControllerDesign:
        if self.controller is None:
            raise ValueError("design file has no single-plant controller")
        return self.controller.to_design()

    def multi_input_design(self) -> MultiInputDesign:
        if self.decoupling is None:
            raise ValueError("design file has no decoupled form")
        dec = self.decoupling
        system = LinearSystem(self.A.to_array(), self.B.to_array())
        form = DecoupledForm(
            M=dec.M.to_array(),
            F=dec.F.to_array(),
            G=dec.G.to_array(),
            q=dec.q,
            block_dims=tuple(dec.block_dims),
            active_inputs=tuple(dec.active_inputs),
            M_inv=dec.M_inv.to_array(),
        )
        return MultiInputDesign(
            system=system,
            box=spec_to_box(self.constraints, system.n, system.m),
            decoupled=form,
            blocks=[b.to_design() for b in dec.blocks],
            N=self.N,
            z_radius=_level(dec.z_radius),
            shrink=dec.shrink,
        )


def design_artifact(
    problem: str,
    kind: Literal["linear", "multi_input", "nonlinear"],
    design: ControllerDesign | MultiInputDesign,
    report: DesignReport | None = None,
    block_reports: list[DesignReport] | None = None,
    baseline_N: int | None = None,
) -> DesignArtifact:
    decoupling = None
    controller = None
    if isinstance(design, MultiInputDesign):
        dec = design.decoupled
        decoupling = DecouplingArtifact(
            M=MatrixSpec.from_array(dec.M),
            F=MatrixSpec.from_array(dec.F),
            G=MatrixSpec.from_array(dec.G),
            M_inv=MatrixSpec.from_array(dec.M_inv),
            q=dec.q,
            block_dims=list(dec.block_dims),
            active_inputs=list(dec.active_inputs),
            z_radius=_finite_or_none(design.z_radius),
            shrink=design.shrink,
            blocks=[ControllerArtifact.from_design(b) for b in design.blocks],
        )
    else:
        controller = ControllerArtifact.from_design(design)
    return DesignArtifact(
        problem=problem,
        kind=kind,
        N=design.N,
        baseline_N=baseline_N,
        A=MatrixSpec.from_array(design.system.A),
        B=MatrixSpec.from_array(design.system.B),
        constraints=box_to_spec(design.box),
        controller=controller,
        decoupling=decoupling,
        report=None if report is None else ReportArtifact.from_report(report),
        block_reports=[ReportArtifact.from_report(r) for r in block_reports or []],
    )


def save_design(path: str | Path, artifact: DesignArtifact) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(artifact.model_dump_json(indent=2) + "\n")
    logger.info(f"design written to {target}")
    return target


def load_design(path: str | Path) -> DesignArtifact:
    return DesignArtifact.model_validate_json(Path(path).read_text())


def trajectory_frame(traj: Trajectory) -> pd.DataFrame:
    """One row per recorded state; the final row carries no input."""
    n = traj.states.shape[1]
    m = traj.inputs.shape[1] if traj.inputs.ndim == 2 else 0
    rows = traj.states.shape[0]
    frame = pd.DataFrame({"k": np.arange(rows)})
    for i in range(n):
        frame[f"x_{i + 1}"] = traj.states[:, i]
    pad = rows - traj.steps
    for j in range(m):
        frame[f"u_{j + 1}"] = np.concatenate([traj.inputs[:, j], np.full(pad, np.nan)])
    frame["objective"] = list(traj.costs) + [np.nan] * pad
    frame["status"] = list(traj.statuses) + [""] * pad
    frame["iterations"] = pd.array(
        list(traj.iterations) + [None] * pad, dtype="Int64"
    )
    return frame


def write_trajectory_csv(path: str | Path, traj: Trajectory) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    settle = "none" if traj.settle_step is None else str(traj.settle_step)
    with target.open("w", newline="") as handle:
        handle.write(f"# settle T={settle}\n")
        if traj.truncated:
            handle.write(f"# truncated: {traj.reason}\n")
        trajectory_frame(traj).to_csv(handle, index=False, lineterminator="\n")
    return target


def read_trajectory_csv(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def write_feasibility_csv(path: str | Path, fmap: FeasibilityMap) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    grid = fmap.grid
    frame = pd.DataFrame(
        {
            "x1": fmap.points[:, 0],
            "x2": fmap.points[:, 1],
            "label": [label.value for label in fmap.labels],
        }
    )
    with target.open("w", newline="") as handle:
        handle.write(
            f"# window lo={list(grid.lo)} hi={list(grid.hi)} "
            f"resolution={list(grid.resolution)}\n"
        )
        handle.write(
            f"# proposed={fmap.proposed_count} baseline={fmap.baseline_count} "
            f"ratio={fmap.ratio:.6g} containment={fmap.containment_holds}\n"
        )
        frame.to_csv(handle, index=False, lineterminator="\n")
    return target


class MonteCarloReport(Artifact):
    runs: int
    seed: int
    w_bound: float
    tail_start: int
    tail_bound: float | None
    max_abs_input: float
    infeasible_runs: int
    settle_steps: list[int | None]

    @classmethod
    def from_summary(
        cls, summary: MonteCarloSummary, seed: int, w_bound: float
    ) -> "MonteCarloReport":
        return cls(
            runs=len(summary.runs),
            seed=seed,
            w_bound=w_bound,
            tail_start=summary.tail_start,
            tail_bound=_finite_or_none(summary.tail_bound),
            max_abs_input=summary.max_abs_input,
            infeasible_runs=summary.infeasible_runs,
            settle_steps=[t.settle_step for t in summary.runs],
        )


def _save_svg(fig: plt.Figure, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(target, format="svg", metadata={"Date": None})
    plt.close(fig)
    return target


def _bands(ax: plt.Axes, lo: np.ndarray, hi: np.ndarray) -> None:
    for value in np.concatenate([lo, hi]):
        if math.isfinite(value):
            ax.axhline(value, color="grey", linestyle=":", linewidth=1.0)


def plot_trajectory(
    path: str | Path, traj: Trajectory, box: BoxConstraintSet | None = None
) -> Path:
    """States and inputs over time with dotted constraint bands."""
    fig, (ax_x, ax_u) = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
    steps = np.arange(traj.states.shape[0])
    for i in range(traj.states.shape[1]):
        ax_x.plot(steps, traj.states[:, i], marker="o", label=f"x_{i + 1}")
    for j in range(traj.inputs.shape[1] if traj.inputs.ndim == 2 else 0):
        ax_u.step(
            np.arange(traj.steps), traj.inputs[:, j], where="post", label=f"u_{j + 1}"
        )
    if box is not None:
        _bands(ax_x, box.x_lo, box.x_hi)
        _bands(ax_u, box.u_lo, box.u_hi)
    if traj.settle_step is not None:
        ax_x.axvline(traj.settle_step, color="black", linewidth=0.8)
    ax_x.set_ylabel("state")
    ax_u.set_ylabel("input")
    ax_u.set_xlabel("k")
    ax_x.legend(loc="upper right")
    ax_u.legend(loc="upper right")
    return _save_svg(fig, path)


def plot_feasibility(path: str | Path, fmap: FeasibilityMap) -> Path:
    """Region boundaries: proposed solid, baseline dashed."""
    nx, ny = fmap.grid.resolution
    xs, ys = fmap.grid.axes()
    labels = np.array([label.value for label in fmap.labels]).reshape(ny, nx)
    proposed = np.isin(
        labels,
        [CellLabel.FEASIBLE_BOTH.value, CellLabel.FEASIBLE_PROPOSED_ONLY.value],
    )
    baseline = np.isin(
        labels,
        [CellLabel.FEASIBLE_BOTH.value, CellLabel.FEASIBLE_BASELINE_ONLY.value],
    )
    fig, ax = plt.subplots(figsize=(6, 6))
    if proposed.any() and not proposed.all():
        ax.contour(xs, ys, proposed.astype(float), levels=[0.5], colors="C0")
    if baseline.any() and not baseline.all():
        ax.contour(
            xs,
            ys,
            baseline.astype(float),
            levels=[0.5],
            colors="C1",
            linestyles="dashed",
        )
    ax.plot([], [], color="C0", label=f"proposed ({fmap.proposed_count} cells)")
    ax.plot(
        [],
        [],
        color="C1",
        linestyle="--",
        label=f"baseline ({fmap.baseline_count} cells)",
    )
    ax.set_xlabel("x_1")
    ax.set_ylabel("x_2")
    ax.set_xlim(fmap.grid.lo[0], fmap.grid.hi[0])
    ax.set_ylim(fmap.grid.lo[1], fmap.grid.hi[1])
    ax.legend(loc="upper right")
    return _save_svg(fig, path)
