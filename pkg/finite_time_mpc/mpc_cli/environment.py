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
from typing import Optional

from .kernel import Kernel
from .telemetry import parse_log_level


class Environment:
    """Runtime settings: explicit options first, then ``FTMPC_*`` variables."""

    def __init__(
        self,
        output_dir: Optional[str] = None,
        workers: Optional[int] = None,
        log_level: Optional[str] = None,
        seed: Optional[int] = None,
    ):
        out = output_dir or os.environ.get("FTMPC_OUTPUT_DIR")
        self.output_dir = Path(out) if out else None
        self.workers = workers or int(os.environ.get("FTMPC_WORKERS") or 1)
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        self.log_level = parse_log_level(
            log_level or os.environ.get("FTMPC_LOG_LEVEL") or logging.INFO
        )
        env_seed = os.environ.get("FTMPC_SEED")
        self.seed = seed if seed is not None else (int(env_seed) if env_seed else None)

    @property
    def interface(self) -> Kernel:
        return Kernel(
            output_dir=self.output_dir,
            workers=self.workers,
            seed=self.seed,
        )
