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
import itertools
import math

import numpy as np
import pytest

from mpc_core.controller import (
    LinearMPC,
    LinearWarmState,
    MultiInputMPC,
    NonlinearModel,
    NonlinearMPC,
    NonlinearWarmState,
    SQPSettings,
    _initial_guess,
    build_multi_input_program,
    lin_step,
    nl_terminal_design,
    nl_terminal_invariant,
    rollout,
)
from mpc_core.design import build_design
from mpc_core.errors import InfeasibleAtState, SQPNoConvergence
from mpc_core.qpsolver import SolveStatus, build_condensed, check_feasible, solve
from mpc_core.simharness import finite_time_check, simulate


class TestNonlinearModel:
    def test_requires_origin_equilibrium(self):
        with pytest.raises(ValueError, match="f\\(0, 0\\) = 0"):
            NonlinearModel(n=1, m=1, step=lambda x, u: x + u + 1.0)

    def test_finite_difference_jacobians(self, nl_model):
        """Test central differences against the analytic jacobians."""
        numeric = NonlinearModel(n=2, m=1, step=nl_model.step)
        x, u = np.array([0.3, -0.4]), np.array([0.7])
        A_ref, B_ref = nl_model.linearize(x, u)
        A, B = numeric.linearize(x, u)
        np.testing.assert_allclose(A, A_ref, atol=1e-7)
        np.testing.assert_allclose(B, B_ref, atol=1e-7)

    def test_from_linear(self, si_system):
        model = NonlinearModel.from_linear(si_system)
        x, u = np.array([1.0, 2.0]), np.array([3.0])
        np.testing.assert_allclose(model.step(x, u), si_system.step(x, u))

    def test_rollout(self, si_system):
        model = NonlinearModel.from_linear(si_system)
        X = rollout(model, np.array([1.0, 0.0]), np.zeros((3, 1)))
        np.testing.assert_allclose(X[3], np.linalg.matrix_power(si_system.A, 3)[:, 0])


class TestLinearMPC:
    def test_origin_gives_zero_input(self, si_design):
        controller = LinearMPC(si_design)
        step = controller.step(np.zeros(2))
        assert step.status == SolveStatus.OPTIMAL
        assert step.u.shape == (1,)
        assert abs(step.u[0]) <= 1e-12
        assert step.predicted_cost == pytest.approx(0.0, abs=1e-12)

    def test_deadbeat_endgame(self, si_design):
        """Test that an unsaturated step applies the deadbeat law."""
        x = np.array([0.1, -0.03])
        step = LinearMPC(si_design).step(x)
        expected = -(si_design.K_db @ x)
        np.testing.assert_allclose(step.u, expected, atol=1e-6)

    def test_inputs_within_bounds(self, si_design):
        step = LinearMPC(si_design).step(np.array([0.5, 0.1]))
        assert abs(step.u[0]) <= 5.0 + 1e-6
        assert step.predicted_states.shape == (8, 2)

    def test_cost_decrease_along_closed_loop(self, si_design, si_system):
        """Test J(k+1) <= J(k) - x(n|k)' Q x(n|k) on the nominal loop."""
        for x0 in ([1.0, -0.3], [0.5, 0.1]):
            x = np.array(x0)
            program = build_condensed(si_system, si_design)
            assert check_feasible(program, x)
            controller = LinearMPC(si_design)
            previous = None
            for _ in range(10):
                step = controller.step(x)
                if previous is not None:
                    cost, x_n = previous
                    assert step.predicted_cost <= cost - float(x_n @ x_n) + 1e-6
                previous = (step.predicted_cost, step.predicted_states[si_design.n - 1])
                x = si_system.step(x, step.u)

    def test_infeasible_state_raises(self, si_system, si_state_box):
        design = build_design(
            si_system, si_state_box, 8, np.eye(2), [[0.1]], [[4.3, 24.7]]
        )
        with pytest.raises(InfeasibleAtState) as excinfo:
            LinearMPC(design).step(np.array([4.0, 2.0]))
        np.testing.assert_array_equal(excinfo.value.state, [4.0, 2.0])

    def test_warm_start_is_shifted(self, si_design):
        controller = LinearMPC(si_design)
        warm = LinearWarmState()
        lin_step(controller.program, si_design, np.array([0.5, 0.1]), warm)
        assert warm.start is not None
        assert warm.start.U.shape == (si_design.N,)
        controller.reset()
        assert controller.warm.start is None

    def test_warm_start_is_no_slower_than_cold(self, si_design, si_system):
        """Test warm and cold iteration counts along seeded nominal loops."""
        rng = np.random.default_rng(5)
        program = build_condensed(si_system, si_design)
        no_slower = total = 0
        for _ in range(4):
            x = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-0.4, 0.4)])
            if not check_feasible(program, x):
                continue
            controller = LinearMPC(si_design)
            for _ in range(12):
                cold = solve(program, x)
                warm = controller.step(x)
                no_slower += warm.solve_iterations <= cold.iterations
                total += 1
                x = si_system.step(x, warm.u)
        assert total >= 12
        assert no_slower >= 0.9 * total

    def test_finite_time_convergence(self, si_design, si_system):
        traj = simulate(
            LinearMPC(si_design), si_system, [1.0, -0.3], 25, box=si_design.box
        )
        T = finite_time_check(traj)
        assert T is not None
        assert T <= 10
        assert not traj.violated


class TestMultiInputMPC:
    def test_program_in_decoupled_coordinates(self, mi_design):
        prog = build_multi_input_program(mi_design)
        assert prog.n == 3
        assert prog.m == mi_design.decoupled.q
        assert len(prog.ellipsoids) == mi_design.decoupled.q

    def test_second_input_stays_zero(self, mi_design, mi_system):
        """Test that the inactive input of the reference plant is never used."""
        traj = simulate(
            MultiInputMPC(mi_design),
            mi_system,
            [0.2, -0.05, 0.05],
            30,
            box=mi_design.box,
        )
        assert not traj.truncated
        np.testing.assert_array_equal(traj.inputs[:, 1], 0.0)
        assert finite_time_check(traj) is not None
        assert np.abs(traj.inputs).max() <= 5.0 + 1e-6

    def test_scanned_states_settle(self, mi_design, mi_system):
        """Test settling from every feasible state of a small grid."""
        program = build_multi_input_program(mi_design)
        M = mi_design.decoupled.M
        axis = np.linspace(-0.2, 0.2, 5)
        settles = []
        for x1, x2 in itertools.product(axis, axis):
            x0 = np.array([x1, x2, 0.0])
            if not check_feasible(program, M @ x0):
                continue
            traj = simulate(
                MultiInputMPC(mi_design), mi_system, x0, 30, box=mi_design.box
            )
            assert not traj.truncated, x0
            assert not traj.violated, x0
            np.testing.assert_array_equal(traj.inputs[:, 1], 0.0)
            T = finite_time_check(traj, tol=1e-9)
            assert T is not None, x0
            if np.abs(x0).max() > 0.0:
                settles.append(T)
        assert settles
        assert min(settles) <= 11

    def test_peeling_mode_agrees_on_single_block(self, mi_design):

        """Test that block peeling matches the joint solve when q = 1."""
        x = np.array([0.2, -0.05, 0.05])
        joint = MultiInputMPC(mi_design).step(x)
        peeled = MultiInputMPC(mi_design, peeling=True).step(x)
        np.testing.assert_allclose(peeled.u, joint.u, atol=1e-5)

    def test_reset_keeps_program(self, mi_design):
        controller = MultiInputMPC(mi_design)
        controller.step(np.array([0.1, 0.0, 0.0]))
        program = controller.warm.program
        controller.reset()
        assert controller.warm.program is program
        assert controller.warm.start is None


class TestNonlinearMPC:
    def test_agrees_with_linear_controller(self, si_design, si_system):
        """Test that SQP on a linear model reproduces the linear solve."""
        model = NonlinearModel.from_linear(si_system)
        program = build_condensed(si_system, si_design)
        rng = np.random.default_rng(17)
        for _ in range(20):
            x = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.2, 0.2)])
            assert check_feasible(program, x)
            linear = LinearMPC(si_design).step(x)
            nonlinear = NonlinearMPC(model, si_design, si_design.box).step(x)
            np.testing.assert_allclose(nonlinear.u, linear.u, atol=1e-6)
            assert nonlinear.sqp_iterations >= 1
            assert nonlinear.dynamics_residual <= 1e-8


    def test_cold_start_rolls_out_zero_inputs(self, si_design, si_system):
        model = NonlinearModel.from_linear(si_system)
        x = np.array([0.5, 0.1])
        U, X = _initial_guess(model, si_design, x, NonlinearWarmState())
        np.testing.assert_array_equal(U, np.zeros((si_design.N, 1)))
        np.testing.assert_allclose(X, rollout(model, x, U))

    def test_sqp_iteration_cap(self, si_design, si_system):

        model = NonlinearModel.from_linear(si_system)
        controller = NonlinearMPC(
            model, si_design, si_design.box, settings=SQPSettings(max_iter=1)
        )
        with pytest.raises(SQPNoConvergence) as excinfo:
            controller.step(np.array([0.5, 0.1]))
        assert excinfo.value.step_norm > 0.0

    def test_reference_nonlinear_plant(self, nl_model, nl_box):
        """Test settling and the |x_2| band on the nonlinear plant."""
        design = nl_terminal_design(nl_model, nl_box, np.eye(2), [[0.1]], 8)
        traj = simulate(
            NonlinearMPC(nl_model, design, nl_box), nl_model, [1.0, 0.5], 15, box=nl_box
        )
        assert not traj.truncated
        assert np.abs(traj.states[:, 1]).max() < math.pi / 2.0
        assert np.abs(traj.inputs).max() <= 2.0 + 1e-6
        T = finite_time_check(traj, tol=1e-9)
        assert T is not None
        assert T <= 5



class TestNonlinearTerminalSet:
    def test_invariance_check_passes(self, nl_model, nl_box):
        design = nl_terminal_design(nl_model, nl_box, np.eye(2), [[0.1]], 8)
        rng = np.random.default_rng(1)
        assert 0.0 < design.eps < math.inf
        assert nl_terminal_invariant(nl_model, design, nl_box, design.eps, rng)

    def test_linear_model_keeps_level(self, si_system, si_box, si_design):
        """Test that no shrinking happens when the model is exactly linear."""
        model = NonlinearModel.from_linear(si_system)
        design = nl_terminal_design(
            model, si_box, np.eye(2), [[0.1]], 8, K_opt=[[4.3, 24.7]]
        )
        assert design.eps == pytest.approx(si_design.eps, rel=1e-12)
