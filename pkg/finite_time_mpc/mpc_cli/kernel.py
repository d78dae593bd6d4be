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
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from mpc_core.artifacts import (
    DesignArtifact,
    MonteCarloReport,
    ReportArtifact,
    design_artifact,
    load_design,
    plot_feasibility,
    plot_trajectory,
    save_design,
    write_feasibility_csv,
    write_trajectory_csv,
)
from mpc_core.controller import (
    LinearMPC,
    MultiInputMPC,
    NonlinearMPC,
    build_multi_input_program,
    nl_terminal_design,
)
from mpc_core.design import (
    ControllerDesign,
    DesignReport,
    MultiInputDesign,
    build_design,
    build_multi_input_design,
    validate_design,
)
from mpc_core.errors import DesignError, InfeasibleAtState
from mpc_core.problems import (
    BUILTINS,
    Problem,
    ProblemConfig,
    builtin_config,
    load_config,
    resolve,
)
from mpc_core.qpsolver import CondensedProgram, build_condensed, check_feasible
from mpc_core.simharness import (
    Controller,
    FeasibilityMap,
    MonteCarloSummary,
    Trajectory,
    feasibility_scan,
    monte_carlo,
    simulate,
)

logger = logging.getLogger(__name__)


@dataclass
class SimulationOutcome:
    trajectory: Trajectory
    csv_path: Path
    svg_path: Path | None


@dataclass
class FeasibilityOutcome:
    fmap: FeasibilityMap
    csv_path: Path
    svg_path: Path | None


@dataclass
class MonteCarloOutcome:
    summary: MonteCarloSummary
    report: MonteCarloReport
    report_path: Path


class Kernel:
    def __init__(
        self,
        output_dir: Path | None = None,
        workers: int = 1,
        seed: int | None = None,
    ):
        self.output_dir = output_dir
        self.workers = workers
        self.seed = seed

    def load_problem(self, config: str) -> Problem:
        """Load a JSON problem file, or a built-in problem by name."""
        if config in BUILTINS and not Path(config).exists():
            parsed: ProblemConfig = builtin_config(config)  # type: ignore[arg-type]
        else:
            parsed = load_config(config)
        if self.seed is not None:
            parsed = parsed.model_copy(update={"seed": self.seed})
        return resolve(parsed)

    def output_path(self, problem: Problem, name: str) -> Path:
        base = self.output_dir or Path(problem.output_dir or "output")
        base.mkdir(parents=True, exist_ok=True)
        return base / name

    def synthesize(
        self, problem: Problem, horizon: int | None = None
    ) -> ControllerDesign | MultiInputDesign:
        N = horizon or problem.horizon
        if problem.kind == "nonlinear":
            assert problem.model is not None
            return nl_terminal_design(
                problem.model,
                problem.box,
                problem.Q,
                problem.R,
                N,
                problem.K,
                seed=problem.seed,
            )
        assert problem.system is not None
        if problem.kind == "multi_input":
            return build_multi_input_design(
                problem.system, problem.box, N, problem.Q, problem.R, seed=problem.seed
            )
        return build_design(
            problem.system, problem.box, N, problem.Q, problem.R, problem.K
        )

    def design(
        self, config: str, target: str | None = None
    ) -> tuple[Path, DesignArtifact]:
        problem = self.load_problem(config)
        design = self.synthesize(problem)
        report, block_reports = self._reports(design, problem.seed)
        artifact = design_artifact(
            problem.name,
            problem.kind,
            design,
            report=report,
            block_reports=block_reports,
            baseline_N=problem.baseline_horizon,
        )
        path = Path(target) if target else self.output_path(
            problem, f"design_{problem.name}.json"
        )
        return save_design(path, artifact), artifact

    @staticmethod
    def _reports(
        design: ControllerDesign | MultiInputDesign, seed: int
    ) -> tuple[DesignReport | None, list[DesignReport]]:
        if isinstance(design, MultiInputDesign):
            return None, [validate_design(b, seed=seed) for b in design.blocks]
        return validate_design(design, seed=seed), []

    def _matching_design(
        self, problem: Problem, design_path: str | None
    ) -> ControllerDesign | MultiInputDesign:
        if design_path is None:
            return self.synthesize(problem)
        artifact = load_design(design_path)
        if artifact.kind != problem.kind:
            raise ValueError(
                f"design is for a {artifact.kind} problem, config is {problem.kind}"
            )
        if problem.system is not None and not (
            np.array_equal(artifact.A.to_array(), problem.system.A)
            and np.array_equal(artifact.B.to_array(), problem.system.B)
        ):
            raise ValueError("design file does not match the config plant")
        if artifact.kind == "multi_input":
            return artifact.multi_input_design()
        return artifact.controller_design()

    def _controller(
        self,
        problem: Problem,
        design: ControllerDesign | MultiInputDesign,
        peeling: bool = False,
    ) -> tuple[Controller, CondensedProgram | None]:
        if isinstance(design, MultiInputDesign):
            return (
                MultiInputMPC(design, peeling=peeling),
                build_multi_input_program(design),
            )
        if problem.kind == "nonlinear":
            assert problem.model is not None
            return NonlinearMPC(problem.model, design, problem.box), None
        controller = LinearMPC(design)
        return controller, controller.program

    @staticmethod
    def _initial_state(
        problem: Problem,
        design: ControllerDesign | MultiInputDesign,
        program: CondensedProgram | None,
        x0: Sequence[float] | None,
    ) -> np.ndarray:
        state = problem.x0 if x0 is None else np.asarray(x0, dtype=np.float64)
        if state.shape != (problem.n,):
            raise ValueError(f"x0 must have {problem.n} entries")
        if program is not None:
            z = state
            if isinstance(design, MultiInputDesign):
                z = design.decoupled.M @ state
            if not check_feasible(program, z):
                raise InfeasibleAtState(
                    f"x0={state.tolist()} is infeasible (check_feasible=False)",
                    state=state,
                )
        return state

    def simulate(
        self,
        config: str,
        design_path: str | None = None,
        x0: Sequence[float] | None = None,
        steps: int | None = None,
        svg: bool = False,
        peeling: bool = False,
    ) -> SimulationOutcome:
        problem = self.load_problem(config)
        design = self._matching_design(problem, design_path)
        controller, program = self._controller(problem, design, peeling)
        state = self._initial_state(problem, design, program, x0)
        traj = simulate(
            controller, problem.plant, state, steps or problem.steps, box=problem.box
        )
        csv_path = write_trajectory_csv(
            self.output_path(problem, f"trajectory_{problem.name}.csv"), traj
        )
        svg_path = None
        if svg:
            svg_path = plot_trajectory(
                self.output_path(problem, f"trajectory_{problem.name}.svg"),
                traj,
                problem.box,
            )
        if traj.truncated:
            raise InfeasibleAtState(
                f"trajectory truncated after {traj.steps} steps: {traj.reason}",
                state=traj.states[-1],
            )
        return SimulationOutcome(traj, csv_path, svg_path)

    def feasibility(self, config: str, svg: bool = False) -> FeasibilityOutcome:
        problem = self.load_problem(config)
        if problem.kind == "nonlinear":
            raise ValueError("feasibility scans need a linear plant")
        proposed = self.synthesize(problem)
        baseline = self.synthesize(problem, problem.baseline_horizon)
        fmap = feasibility_scan(
            self._program(proposed),
            self._program(baseline),
            problem.grid,
            workers=self.workers,
        )
        csv_path = write_feasibility_csv(
            self.output_path(problem, f"feasibility_{problem.name}.csv"), fmap
        )
        svg_path = None
        if svg and problem.n == 2:
            svg_path = plot_feasibility(
                self.output_path(problem, f"feasibility_{problem.name}.svg"), fmap
            )
        elif svg:
            logger.warning("feasibility plot skipped: state is not two-dimensional")
        return FeasibilityOutcome(fmap, csv_path, svg_path)

    @staticmethod
    def _program(design: ControllerDesign | MultiInputDesign) -> CondensedProgram:
        if isinstance(design, MultiInputDesign):
            # grid points are taken in z-coordinates for decoupled plants
            return build_multi_input_program(design)
        return build_condensed(design.system, design)

    def montecarlo(
        self,
        config: str,
        design_path: str | None = None,
        x0: Sequence[float] | None = None,
        steps: int | None = None,
        seed: int | None = None,
        peeling: bool = False,
    ) -> MonteCarloOutcome:
        problem = self.load_problem(config)
        design = self._matching_design(problem, design_path)
        controller, program = self._controller(problem, design, peeling)
        state = self._initial_state(problem, design, program, x0)
        run_seed = problem.seed if seed is None else seed
        summary = monte_carlo(
            controller,
            problem.plant,
            state,
            steps or problem.steps,
            runs=problem.disturbance.runs,
            seed=run_seed,
            w_bound=problem.disturbance.bound,
            box=problem.box,
        )
        for i, traj in enumerate(summary.runs):
            write_trajectory_csv(
                self.output_path(problem, f"montecarlo_{problem.name}_{i:02d}.csv"),
                traj,
            )
        report = MonteCarloReport.from_summary(
            summary, run_seed, problem.disturbance.bound
        )
        report_path = self.output_path(problem, f"montecarlo_{problem.name}.json")
        report_path.write_text(report.model_dump_json(indent=2) + "\n")
        return MonteCarloOutcome(summary, report, report_path)

    def validate(self, design_path: str) -> tuple[list[ReportArtifact], Path]:
        """Recompute residuals and sampled invariance for a design file."""
        artifact = load_design(design_path)
        if artifact.kind == "multi_input":
            designs = artifact.multi_input_design().blocks
        else:
            designs = [artifact.controller_design()]
        seed = self.seed or 0
        reports = [
            ReportArtifact.from_report(validate_design(d, seed=seed)) for d in designs
        ]
        target = Path(design_path).with_name(
            Path(design_path).stem + "_validation.json"
        )
        target.write_text(
            "[\n"
            + ",\n".join(r.model_dump_json(indent=2) for r in reports)
            + "\n]\n"
        )
        failed = [i for i, r in enumerate(reports) if not r.passed]
        if failed:
            raise DesignError(f"validation failed for controller(s) {failed}")
        return reports, target
