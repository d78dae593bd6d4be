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
import os
from pathlib import Path
from unittest.mock import MagicMock, patch

import pytest

from mpc_cli.environment import Environment
from mpc_cli.kernel import Kernel


class TestEnvironment:
    def test_init_default_values(self):
        """Test initialization with default values."""
        with patch.dict(os.environ, {}, clear=True):
            env = Environment()

            assert env.output_dir is None
            assert env.workers == 1
            assert env.log_level == logging.INFO

    def test_init_with_parameters(self):
        """Test initialization with explicitly provided parameters."""
        with patch.dict(os.environ, {}, clear=True):
            env = Environment(output_dir="results", workers=4, log_level="debug")

            assert env.output_dir == Path("results")
            assert env.workers == 4
            assert env.log_level == logging.DEBUG

    def test_init_with_environment_variables(self):
        """Test initialization with values from environment variables."""
        env_vars = {
            "FTMPC_OUTPUT_DIR": "/tmp/ftmpc",
            "FTMPC_WORKERS": "3",
            "FTMPC_LOG_LEVEL": "WARNING",
        }

        with patch.dict(os.environ, env_vars, clear=True):
            env = Environment()

            assert env.output_dir == Path("/tmp/ftmpc")
            assert env.workers == 3
            assert env.log_level == logging.WARNING

    def test_parameters_override_environment_variables(self):
        """Test that explicit options take precedence over the environment."""
        env_vars = {"FTMPC_OUTPUT_DIR": "/tmp/ftmpc", "FTMPC_WORKERS": "3"}

        with patch.dict(os.environ, env_vars, clear=True):
            env = Environment(output_dir="results", workers=2)

            assert env.output_dir == Path("results")
            assert env.workers == 2

    def test_invalid_workers(self):
        with patch.dict(os.environ, {"FTMPC_WORKERS": "0"}, clear=True):
            with pytest.raises(ValueError, match="workers"):
                Environment()

    def test_non_numeric_workers(self):
        with patch.dict(os.environ, {"FTMPC_WORKERS": "many"}, clear=True):
            with pytest.raises(ValueError):
                Environment()

    def test_invalid_log_level(self):
        with patch.dict(os.environ, {}, clear=True):
            with pytest.raises(ValueError, match="unknown log level"):
                Environment(log_level="chatty")

    @patch("mpc_cli.environment.Kernel")
    def test_interface_property(self, mock_kernel):
        """Test that the interface property returns a Kernel instance."""
        with patch.dict(os.environ, {}, clear=True):
            mock_kernel_instance = MagicMock(spec=Kernel)
            mock_kernel.return_value = mock_kernel_instance

            env = Environment(output_dir="results", workers=2)
            interface = env.interface

            mock_kernel.assert_called_once_with(
                output_dir=Path("results"),
                workers=2,
                seed=None,
            )
            assert interface == mock_kernel_instance

    def test_interface_without_output_dir(self):
        with patch.dict(os.environ, {}, clear=True):
            with patch("mpc_cli.environment.Kernel") as mock_kernel:
                _ = Environment().interface

                mock_kernel.assert_called_once_with(
                    output_dir=None, workers=1, seed=None
                )

    def test_seed_from_option_and_environment(self):
        """Test that the seed option beats FTMPC_SEED and reaches the kernel."""
        with patch.dict(os.environ, {"FTMPC_SEED": "5"}, clear=True):
            assert Environment().seed == 5
            env = Environment(seed=9)
            assert env.seed == 9
            assert env.interface.seed == 9

    def test_seed_defaults_to_config(self):
        with patch.dict(os.environ, {}, clear=True):
            assert Environment().seed is None
