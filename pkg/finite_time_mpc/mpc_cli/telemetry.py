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
import sys
from typing import TextIO

from opentelemetry import trace
from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter
from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import ConsoleSpanExporter, SimpleSpanProcessor

root = logging.getLogger()

_provider: TracerProvider | None = None


def setup_logging(
    logger: logging.Logger,
    stream: TextIO = sys.stderr,
    log_level: int = logging.INFO,
) -> None:
    logger.setLevel(log_level)

    handler_stream = logging.StreamHandler(stream)
    handler_stream.setLevel(log_level)
    formatter = logging.Formatter("%(asctime)s - %(levelname)s - %(message)s")
    handler_stream.setFormatter(formatter)

    while len(logger.handlers) > 0:
        logger.removeHandler(logger.handlers[0])

    logger.addHandler(handler_stream)


def parse_log_level(value: str | int) -> int:
    """Accept ``DEBUG``/``info``/``20`` style levels."""
    if isinstance(value, int):
        return value
    if value.isdigit():
        return int(value)
    level = logging.getLevelName(value.upper())
    if not isinstance(level, int):
        raise ValueError(f"unknown log level: {value}")
    return level


def _truthy(value: str | None) -> bool:
    return (value or "").strip().lower() in {"1", "true", "yes", "on"}


def setup_tracing() -> TracerProvider:
    """Install the tracer provider once per process.

    Spans go to the OTLP HTTP exporter when ``OTEL_EXPORTER_OTLP_ENDPOINT`` is
    set and to stderr when ``FTMPC_TRACE_CONSOLE`` is truthy; otherwise they are
    dropped.
    """
    global _provider
    if _provider is not None:
        return _provider
    provider = TracerProvider(
        resource=Resource.create({"service.name": "finite-time-mpc"})
    )
    if os.environ.get("OTEL_EXPORTER_OTLP_ENDPOINT"):
        root.info("OTEL_EXPORTER_OTLP_ENDPOINT set, exporting spans")
        provider.add_span_processor(SimpleSpanProcessor(OTLPSpanExporter()))
    if _truthy(os.environ.get("FTMPC_TRACE_CONSOLE")):
        provider.add_span_processor(
            SimpleSpanProcessor(ConsoleSpanExporter(out=sys.stderr))
        )
    trace.set_tracer_provider(provider)
    _provider = provider
    return provider
