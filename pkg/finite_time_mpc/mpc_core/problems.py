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
"""Problem configuration schema and the built-in reference problems."""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .controller import NonlinearModel
from .design import BoxConstraintSet, LinearSystem
from .matrixcore import Mat, Vec
from .simharness import GridSpec

logger = logging.getLogger(__name__)

BuiltinName = Literal["si_linear", "mi_linear", "nonlinear"]
ProblemKind = Literal["linear", "multi_input", "nonlinear"]

HALF_PI_MARGIN = math.pi / 2.0 - 1e-9


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MatrixSpec(StrictModel):
    """Row-major matrix with explicit dimensions."""

    rows: int = Field(ge=1)
    cols: int = Field(ge=1)
    data: list[list[float]]

    @model_validator(mode="after")
    def check_shape(self) -> "MatrixSpec":
        if len(self.data) != self.rows or any(len(r) != self.cols for r in self.data):
            raise ValueError(f"data does not match rows={self.rows}, cols={self.cols}")
        if not all(math.isfinite(v) for r in self.data for v in r):
            raise ValueError("matrix entries must be finite")
        return self

    def to_array(self) -> Mat:
        return np.array(self.data, dtype=np.float64).reshape(self.rows, self.cols)

    @classmethod
    def from_array(cls, array: Any) -> "MatrixSpec":
        arr = np.atleast_2d(np.asarray(array, dtype=np.float64))
        return cls(rows=arr.shape[0], cols=arr.shape[1], data=arr.tolist())


class PlantSpec(StrictModel):
    A: MatrixSpec
    B: MatrixSpec


Bound = list[float | None]


class ConstraintSpec(StrictModel):
    """Box bounds; ``null`` entries or omitted vectors are unbounded."""

    x_lo: Bound | None = None
    x_hi: Bound | None = None
    u_lo: Bound | None = None
    u_hi: Bound | None = None


class ScanSpec(StrictModel):
    lo: tuple[float, float] = (-3.0, -3.0)
    hi: tuple[float, float] = (3.0, 3.0)
    resolution: tuple[int, int] = (61, 61)

    def to_grid(self) -> GridSpec:
        return GridSpec(lo=self.lo, hi=self.hi, resolution=self.resolution)


class DisturbanceConfig(StrictModel):
    bound: float = Field(default=1.0, ge=0.0)
    runs: int = Field(default=10, ge=1)


class ProblemConfig(StrictModel):
    plant: BuiltinName | PlantSpec
    constraints: ConstraintSpec | None = None
    horizon: int | None = Field(default=None, ge=1)
    baseline_horizon: int | None = Field(default=None, ge=1)
    Q: MatrixSpec | None = None
    R: MatrixSpec | None = None
    K: MatrixSpec | None = None
    x0: list[float] | None = None
    steps: int = Field(default=30, ge=1)
    scan: ScanSpec = ScanSpec()
    disturbance: DisturbanceConfig = DisturbanceConfig()
    seed: int = 0
    output_dir: str | None = None

    @model_validator(mode="after")
    def check_dimensions(self) -> "ProblemConfig":
        if isinstance(self.plant, str):
            n, m = BUILTINS[self.plant].dims
        else:
            n, m = self.plant.A.rows, self.plant.B.cols
            if self.plant.A.cols != n or self.plant.B.rows != n:
                raise ValueError("plant.A must be square and plant.B must have n rows")
        expected = {"Q": (n, n), "R": (m, m), "K": (m, n)}
        for name, shape in expected.items():
            spec = getattr(self, name)
            if spec is not None and (spec.rows, spec.cols) != shape:
                raise ValueError(
                    f"{name} is {spec.rows}x{spec.cols}, expected {shape[0]}x{shape[1]}"
                )
        if self.constraints is not None:
            for name, size in (("x_lo", n), ("x_hi", n), ("u_lo", m), ("u_hi", m)):
                values = getattr(self.constraints, name)
                if values is not None and len(values) != size:
                    raise ValueError(
                        f"constraints.{name} has length {len(values)}, expected {size}"
                    )
        if self.x0 is not None and len(self.x0) != n:
            raise ValueError(f"x0 has length {len(self.x0)}, expected {n}")
        return self


@dataclass(frozen=True)
class Builtin:
    kind: ProblemKind
    dims: tuple[int, int]
    A: Mat | None
    B: Mat | None
    constraints: ConstraintSpec
    horizon: int
    Q: Mat
    R: Mat
    K: Mat | None
    x0: tuple[float, ...]


def _nonlinear_step(x: Vec, u: Vec) -> Vec:
    return np.array(
        [-1.1 * x[0] + 2.0 * math.sin(x[1]), 0.2 * x[0] * x[1] + 0.79 * u[0]]
    )


def _nonlinear_jacobians(x: Vec, u: Vec) -> tuple[Mat, Mat]:
    A = np.array([[-1.1, 2.0 * math.cos(x[1])], [0.2 * x[1], 0.2 * x[0]]])
    B = np.array([[0.0], [0.79]])
    return A, B


def nonlinear_model() -> NonlinearModel:
    """``x1+ = -1.1 x1 + 2 sin x2``, ``x2+ = 0.2 x1 x2 + 0.79 u``."""
    return NonlinearModel(
        n=2, m=1, step=_nonlinear_step, jacobians=_nonlinear_jacobians
    )


BUILTINS: dict[str, Builtin] = {
    "si_linear": Builtin(
        kind="linear",
        dims=(2, 1),
        A=np.array([[1.1, 2.0], [0.0, 0.95]]),
        B=np.array([[0.0], [0.079]]),
        constraints=ConstraintSpec(u_lo=[-5.0], u_hi=[5.0]),
        horizon=8,
        Q=np.eye(2),
        R=np.array([[0.1]]),
        K=np.array([[4.3, 24.7]]),
        x0=(1.0, -0.3),
    ),
    "mi_linear": Builtin(
        kind="multi_input",
        dims=(3, 2),
        A=np.array([[1.1, 2.0, -0.4], [0.0, 0.95, -0.8], [0.0, 0.1, 1.0]]),
        B=np.array([[0.0, 0.0], [0.079, 0.0], [-0.1, 0.1]]),
        constraints=ConstraintSpec(u_lo=[-5.0, -5.0], u_hi=[5.0, 5.0]),
        horizon=8,
        Q=np.eye(3),
        R=0.1 * np.eye(2),
        K=None,
        x0=(0.2, -0.05, 0.05),
    ),
    "nonlinear": Builtin(
        kind="nonlinear",
        dims=(2, 1),
        A=None,
        B=None,
        constraints=ConstraintSpec(
            x_lo=[None, -HALF_PI_MARGIN],
            x_hi=[None, HALF_PI_MARGIN],
            u_lo=[-2.0],
            u_hi=[2.0],
        ),
        horizon=8,
        Q=np.eye(2),
        R=np.array([[0.1]]),
        K=None,
        x0=(1.0, 0.5),
    ),
}


@dataclass
class Problem:
    """Numeric problem resolved from a config."""

    name: str
    kind: ProblemKind
    n: int
    m: int
    system: LinearSystem | None
    model: NonlinearModel | None
    box: BoxConstraintSet
    horizon: int
    baseline_horizon: int
    Q: Mat
    R: Mat
    K: Mat | None
    x0: Vec
    steps: int
    grid: GridSpec
    disturbance: DisturbanceConfig
    seed: int
    output_dir: str | None

    @property
    def plant(self) -> LinearSystem | NonlinearModel:
        if self.model is not None:
            return self.model
        assert self.system is not None
        return self.system


def resolve(config: ProblemConfig) -> Problem:
    """Merge config fields over the built-in defaults and build numeric objects."""
    if isinstance(config.plant, str):
        name = config.plant
        base = BUILTINS[name]
        kind = base.kind
        n, m = base.dims
        A, B = base.A, base.B
        defaults = base
    else:
        name = "custom"
        A = config.plant.A.to_array()
        B = config.plant.B.to_array()
        n, m = B.shape
        kind = "multi_input" if m > 1 else "linear"
        defaults = None
    constraints = config.constraints or (
        defaults.constraints if defaults else ConstraintSpec()
    )
    system = LinearSystem(A, B) if A is not None and B is not None else None
    model = nonlinear_model() if kind == "nonlinear" else None
    box = BoxConstraintSet.from_bounds(
        n, m, constraints.x_lo, constraints.x_hi, constraints.u_lo, constraints.u_hi
    )
    if config.Q is not None:
        Q = config.Q.to_array()
    elif defaults is not None:
        Q = defaults.Q
    else:
        Q = np.eye(n)
    if config.R is not None:
        R = config.R.to_array()
    elif defaults is not None:
        R = defaults.R
    else:
        R = np.eye(m)
    K = config.K.to_array() if config.K is not None else None
    if K is None and defaults is not None:
        K = defaults.K
    horizon = config.horizon or (defaults.horizon if defaults else 2 * n)
    if config.x0 is not None:
        x0 = np.array(config.x0, dtype=np.float64)
    elif defaults is not None:
        x0 = np.array(defaults.x0, dtype=np.float64)
    else:
        x0 = np.zeros(n)
    return Problem(
        name=name,
        kind=kind,
        n=n,
        m=m,
        system=system,
        model=model,
        box=box,
        horizon=horizon,
        baseline_horizon=config.baseline_horizon or n,
        Q=Q,
        R=R,
        K=K,
        x0=x0,
        steps=config.steps,
        grid=config.scan.to_grid(),
        disturbance=config.disturbance,
        seed=config.seed,
        output_dir=config.output_dir,
    )


def load_config(path: str | Path) -> ProblemConfig:
    """Parse and validate a JSON problem file."""
    text = Path(path).read_text()
    logger.debug(f"loading problem config from {path}")
    return ProblemConfig.model_validate(json.loads(text))


def builtin_config(name: BuiltinName) -> ProblemConfig:
    return ProblemConfig(plant=name)
