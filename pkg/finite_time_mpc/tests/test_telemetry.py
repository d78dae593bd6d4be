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
import io
import logging
import os
from unittest.mock import patch

import pytest
from opentelemetry.sdk.trace import TracerProvider

from mpc_cli import telemetry
from mpc_cli.telemetry import parse_log_level, setup_logging, setup_tracing


@pytest.fixture
def reset_provider():
    telemetry._provider = None
    yield
    telemetry._provider = None


class TestSetupLogging:
    def test_replaces_handlers(self):
        logger = logging.getLogger("ftmpc-test")
        logger.addHandler(logging.NullHandler())
        stream = io.StringIO()

        setup_logging(logger, stream, logging.DEBUG)
        logger.debug("solver converged")

        assert len(logger.handlers) == 1
        assert logger.level == logging.DEBUG
        assert " - DEBUG - solver converged" in stream.getvalue()


class TestParseLogLevel:
    @pytest.mark.parametrize(
        "value,expected",
        [
            ("DEBUG", logging.DEBUG),
            ("info", logging.INFO),
            ("30", logging.WARNING),
            (logging.ERROR, logging.ERROR),
        ],
    )
    def test_levels(self, value, expected):
        assert parse_log_level(value) == expected

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown log level"):
            parse_log_level("loud")


class TestSetupTracing:
    def test_installs_once(self, reset_provider):
        """Test that repeated calls return the same provider."""
        with patch.dict(os.environ, {}, clear=True):
            with patch("mpc_cli.telemetry.trace.set_tracer_provider") as mock_set:
                first = setup_tracing()
                second = setup_tracing()

        assert isinstance(first, TracerProvider)
        assert first is second
        mock_set.assert_called_once_with(first)

    def test_otlp_exporter_when_endpoint_set(self, reset_provider):
        env_vars = {"OTEL_EXPORTER_OTLP_ENDPOINT": "http://localhost:4318"}
        with patch.dict(os.environ, env_vars, clear=True):
            with patch("mpc_cli.telemetry.trace.set_tracer_provider"):
                with patch("mpc_cli.telemetry.OTLPSpanExporter") as mock_exporter:
                    setup_tracing()

        mock_exporter.assert_called_once_with()

    def test_no_exporter_by_default(self, reset_provider):
        with patch.dict(os.environ, {}, clear=True):
            with patch("mpc_cli.telemetry.trace.set_tracer_provider"):
                with patch("mpc_cli.telemetry.OTLPSpanExporter") as mock_exporter:
                    setup_tracing()

        mock_exporter.assert_not_called()
