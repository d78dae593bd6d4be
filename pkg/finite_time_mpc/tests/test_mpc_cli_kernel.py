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
import json

import numpy as np
import pandas as pd
import pytest

from mpc_cli.kernel import Kernel
from mpc_core.errors import DesignError, InfeasibleAtState


def write_config(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture
def kernel(tmp_path):
    return Kernel(output_dir=tmp_path / "out")


@pytest.fixture
def coarse_config(tmp_path):
    return write_config(
        tmp_path / "coarse.json",
        {
            "plant": "si_linear",
            "scan": {"lo": [-3.0, -3.0], "hi": [3.0, 3.0], "resolution": [7, 7]},
            "disturbance": {"bound": 0.5, "runs": 2},
            "steps": 12,
        },
    )


class TestKernel:
    def test_load_builtin_by_name(self, kernel):
        problem = kernel.load_problem("si_linear")
        assert problem.name == "si_linear"
        assert problem.kind == "linear"

    def test_load_missing_file(self, kernel):
        with pytest.raises(FileNotFoundError):
            kernel.load_problem("no_such_problem.json")

    def test_output_dir_from_config(self, tmp_path):
        """Test that the config output_dir is used without an override."""
        target = tmp_path / "from_config"
        config = write_config(
            tmp_path / "p.json", {"plant": "si_linear", "output_dir": str(target)}
        )
        kernel = Kernel()
        problem = kernel.load_problem(config)
        assert kernel.output_path(problem, "x.csv") == target / "x.csv"
        assert target.is_dir()

    def test_seed_overrides_config(self, tmp_path):
        """Test that a kernel seed replaces the seed of any loaded problem."""
        config = write_config(tmp_path / "p.json", {"plant": "si_linear", "seed": 4})
        assert Kernel().load_problem(config).seed == 4
        assert Kernel(seed=11).load_problem(config).seed == 11
        assert Kernel(seed=11).load_problem("mi_linear").seed == 11


    def test_design_writes_file(self, kernel, tmp_path):
        path, artifact = kernel.design("si_linear")
        assert path == tmp_path / "out" / "design_si_linear.json"
        assert path.exists()
        assert artifact.report is not None and artifact.report.passed
        assert artifact.baseline_N == 2
        assert 4.0 <= artifact.controller.eps <= 4.3

    def test_design_explicit_target(self, kernel, tmp_path):
        path, _ = kernel.design("si_linear", str(tmp_path / "d" / "mine.json"))
        assert path == tmp_path / "d" / "mine.json"

    def test_design_horizon_too_short(self, kernel, tmp_path):
        config = write_config(tmp_path / "p.json", {"plant": "si_linear", "horizon": 1})
        with pytest.raises(DesignError):
            kernel.design(config)

    def test_multi_input_design(self, kernel):
        _, artifact = kernel.design("mi_linear")
        assert artifact.decoupling is not None
        assert len(artifact.block_reports) == len(artifact.decoupling.blocks)

    def test_simulate_from_design_file(self, kernel):
        """Test a stored design drives the loop to the origin."""
        path, _ = kernel.design("si_linear")
        outcome = kernel.simulate("si_linear", str(path), steps=15, svg=True)
        traj = outcome.trajectory
        assert traj.steps == 15
        assert traj.settle_step is not None and traj.settle_step <= 10
        assert traj.max_violation <= 1e-6
        assert outcome.svg_path is not None and outcome.svg_path.exists()
        frame = pd.read_csv(outcome.csv_path, comment="#")
        assert len(frame) == 16

    def test_simulate_at_origin(self, kernel):
        outcome = kernel.simulate("si_linear", x0=[0.0, 0.0], steps=3)
        np.testing.assert_allclose(outcome.trajectory.inputs, 0.0, atol=1e-9)
        assert outcome.svg_path is None

    def test_simulate_rejects_infeasible_start(self, kernel):
        with pytest.raises(InfeasibleAtState, match="check_feasible=False"):
            kernel.simulate("si_linear", x0=[50.0, 50.0])

    def test_simulate_rejects_wrong_x0_length(self, kernel):
        with pytest.raises(ValueError, match="2 entries"):
            kernel.simulate("si_linear", x0=[0.1, 0.0, 0.0])

    def test_design_kind_mismatch(self, kernel):
        path, _ = kernel.design("mi_linear")
        with pytest.raises(ValueError, match="multi_input problem"):
            kernel.simulate("si_linear", str(path))

    def test_design_plant_mismatch(self, kernel, tmp_path):
        path, _ = kernel.design("si_linear")
        config = write_config(
            tmp_path / "p.json",
            {
                "plant": {
                    "A": {"rows": 2, "cols": 2, "data": [[1.0, 1.0], [0.0, 1.0]]},
                    "B": {"rows": 2, "cols": 1, "data": [[0.0], [1.0]]},
                },
                "constraints": {"u_lo": [-5.0], "u_hi": [5.0]},
            },
        )
        with pytest.raises(ValueError, match="does not match"):
            kernel.simulate(config, str(path))

    def test_multi_input_keeps_second_input_idle(self, kernel):
        outcome = kernel.simulate("mi_linear", steps=12)
        np.testing.assert_allclose(outcome.trajectory.inputs[:, 1], 0.0)

    def test_feasibility(self, kernel, coarse_config):
        outcome = kernel.feasibility(coarse_config, svg=True)
        fmap = outcome.fmap
        assert len(fmap.labels) == 49
        assert fmap.containment_holds
        assert fmap.proposed_count >= fmap.baseline_count
        assert outcome.csv_path.name == "feasibility_si_linear.csv"
        assert outcome.svg_path is not None

    def test_feasibility_rejects_nonlinear(self, kernel):
        with pytest.raises(ValueError, match="linear plant"):
            kernel.feasibility("nonlinear")

    def test_montecarlo(self, kernel, coarse_config):
        outcome = kernel.montecarlo(coarse_config, seed=5)
        report = outcome.report
        assert report.runs == 2
        assert report.seed == 5
        assert report.w_bound == 0.5
        assert report.tail_start == 6
        assert outcome.report_path.exists()
        assert (outcome.report_path.parent / "montecarlo_si_linear_01.csv").exists()

    def test_validate(self, kernel):
        path, _ = kernel.design("si_linear")
        reports, target = kernel.validate(str(path))
        assert len(reports) == 1 and reports[0].passed
        assert target.name == "design_si_linear_validation.json"
        assert json.loads(target.read_text())[0]["passed"] is True

    def test_validate_reports_failure(self, kernel, tmp_path):
        """Test that a tampered terminal weight fails the Lyapunov check."""
        path, _ = kernel.design("si_linear")
        payload = json.loads(path.read_text())
        payload["controller"]["P"]["data"][0][0] += 1.0
        tampered = tmp_path / "tampered.json"
        tampered.write_text(json.dumps(payload))
        with pytest.raises(DesignError, match="validation failed"):
            kernel.validate(str(tampered))
        assert (tmp_path / "tampered_validation.json").exists()
