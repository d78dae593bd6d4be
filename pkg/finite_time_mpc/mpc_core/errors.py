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
"""Exception hierarchy shared by the design, solver and controller layers."""

from typing import Any


class MPCError(Exception):
    """Base class for every error raised by the toolkit."""


class DesignError(MPCError):
    """Offline synthesis could not produce a valid controller design."""


class SingularMatrix(DesignError):
    """A linear solve hit a pivot below the singularity threshold."""

    def __init__(self, message: str, pivot: float | None = None) -> None:
        super().__init__(message)
        self.pivot = pivot


class NotPositiveDefinite(DesignError):
    """A Cholesky factorization met a non-positive pivot."""


class NoConvergence(DesignError):
    """An iterative method exhausted its iteration budget."""

    def __init__(self, message: str, iterations: int = 0) -> None:
        super().__init__(message)
        self.iterations = iterations


class NotContractive(DesignError):
    """The spectral-radius certificate rho(Acl) < 1 could not be established."""


class NotStabilizing(DesignError):
    """A user supplied gain K does not stabilize the plant."""


class NotControllable(DesignError):
    """The controllability matrix of (A, B) is rank deficient."""

    def __init__(self, message: str, rank: int = 0) -> None:
        super().__init__(message)
        self.rank = rank


class UnboundedTerminalSet(DesignError):
    """Every constraint row was skipped, so the terminal level is infinite."""


class DegenerateConstraints(DesignError):
    """The origin is not strictly inside the constraint box."""


class StructureViolation(DesignError):
    """The decoupled form does not have the block triangular pattern."""

    def __init__(self, message: str, entries: list[tuple[int, int, float]]) -> None:
        super().__init__(message)
        self.entries = entries


class NoInvariantSetFound(DesignError):
    """Terminal level shrinking reached the floor without passing the check."""


class HorizonTooShort(DesignError):
    """The control horizon must be greater than the system dimension."""


class RuntimeControlError(MPCError):
    """The online controller failed at a measured state."""


class InfeasibleAtState(RuntimeControlError):
    """The receding-horizon program has no feasible point at this state."""

    def __init__(self, message: str, state: Any = None) -> None:
        super().__init__(message)
        self.state = state


class SQPNoConvergence(RuntimeControlError):
    """The nonlinear SQP loop hit its major-iteration cap."""

    def __init__(
        self, message: str, step_norm: float = 0.0, dynamics_residual: float = 0.0
    ) -> None:
        super().__init__(message)
        self.step_norm = step_norm
        self.dynamics_residual = dynamics_residual
