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
import math
import os

import numpy as np
import pytest

from mpc_core.design import (
    BoxConstraintSet,
    LinearSystem,
    build_design,
    build_multi_input_design,
)
from mpc_core.problems import nonlinear_model

SI_A = [[1.1, 2.0], [0.0, 0.95]]
SI_B = [[0.0], [0.079]]
SI_K = [[4.3, 24.7]]

MI_A = [[1.1, 2.0, -0.4], [0.0, 0.95, -0.8], [0.0, 0.1, 1.0]]
MI_B = [[0.0, 0.0], [0.079, 0.0], [-0.1, 0.1]]


@pytest.fixture
def tests_path():
    path = os.path.split(os.path.abspath(__file__))[0]
    return path


@pytest.fixture
def root_path(tests_path):
    path = os.path.split(tests_path)[0]
    return path


@pytest.fixture
def si_system():
    return LinearSystem(np.array(SI_A), np.array(SI_B))


@pytest.fixture
def si_box():
    return BoxConstraintSet.from_bounds(2, 1, u_lo=[-5.0], u_hi=[5.0])


@pytest.fixture
def si_design(si_system, si_box):
    return build_design(si_system, si_box, 8, np.eye(2), [[0.1]], SI_K)


@pytest.fixture
def si_baseline(si_system, si_box):
    return build_design(si_system, si_box, 2, np.eye(2), [[0.1]], SI_K)


@pytest.fixture
def si_state_box():
    """Single-input box with |x_i| <= 5 so that x_1(1) is a constant row."""
    return BoxConstraintSet.symmetric([5.0, 5.0], [5.0])


@pytest.fixture
def mi_system():
    return LinearSystem(np.array(MI_A), np.array(MI_B))


@pytest.fixture
def mi_box():
    return BoxConstraintSet.from_bounds(3, 2, u_lo=[-5.0, -5.0], u_hi=[5.0, 5.0])


@pytest.fixture
def mi_design(mi_system, mi_box):
    return build_multi_input_design(mi_system, mi_box, 8, np.eye(3), 0.1 * np.eye(2))


@pytest.fixture
def nl_model():
    return nonlinear_model()


@pytest.fixture
def nl_box():
    bound = math.pi / 2.0 - 1e-9
    return BoxConstraintSet.from_bounds(
        2, 1, x_lo=[None, -bound], x_hi=[None, bound], u_lo=[-2.0], u_hi=[2.0]
    )
