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
import functools
import sys
from typing import Any, Callable, TypeVar

import click
import pydantic
from dotenv import load_dotenv

from mpc_cli.environment import Environment
from mpc_cli.telemetry import root, setup_logging, setup_tracing
from mpc_core.errors import DesignError, RuntimeControlError

pass_environment = click.make_pass_decorator(Environment)

F = TypeVar("F", bound=Callable[..., Any])


class ConfigError(click.ClickException):
    exit_code = 1


class DesignFailure(click.ClickException):
    exit_code = 2


class RuntimeInfeasible(click.ClickException):
    exit_code = 3


def translate_errors(func: F) -> F:
    """Map domain exceptions onto the CLI exit codes."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except DesignError as e:
            raise DesignFailure(f"{type(e).__name__}: {e}") from e
        except RuntimeControlError as e:
            raise RuntimeInfeasible(f"{type(e).__name__}: {e}") from e
        except pydantic.ValidationError as e:
            raise ConfigError(f"invalid config: {e}") from e
        except (FileNotFoundError, ValueError) as e:
            raise ConfigError(str(e)) from e

    return wrapper  # type: ignore[return-value]


def parse_x0(value: str | None) -> list[float] | None:
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise click.UsageError(f"--x0 must be a comma separated list: {value}") from e


@click.group()
@click.option("--out", default=None, help="Directory for written artifacts.")
@click.option(
    "--workers", default=None, type=int, help="Processes for feasibility scans."
)
@click.option("--log-level", default=None, help="Logging level, e.g. DEBUG.")
@click.option(
    "--seed", default=None, type=int, help="Seed for sampling and disturbances."
)
@click.pass_context
def cli(
    ctx: Any,
    out: str | None,
    workers: int | None,
    log_level: str | None,
    seed: int | None,
) -> None:
    """Design and simulate finite-time model predictive controllers.

    A config is a JSON problem file or the name of a built-in problem
    (si_linear, mi_linear, nonlinear).

    Common examples:

    # Synthesize the single-input controller and write its design file
    > task cli -- design --config si_linear

    # Simulate the closed loop from a given state and plot it
    > task cli -- simulate --config si_linear --x0 1.0,-0.3 --svg

    # Compare feasible initial states of the N=8 and N=2 controllers
    > task cli -- feasibility --config si_linear --svg

    # Bounded input disturbance runs
    > task cli -- montecarlo --config si_linear --seed 7

    # Fix the seed of design sampling and disturbances for every command
    > task cli -- --seed 3 design --config mi_linear

    # Recheck a stored design
    > task cli -- validate --design output/design_si_linear.json
    """
    load_dotenv()
    try:
        ctx.obj = Environment(out, workers, log_level, seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    setup_logging(root, sys.stderr, ctx.obj.log_level)
    setup_tracing()


@cli.command()
@pass_environment
@click.option("--config", required=True, help="Problem file or built-in name.")
@click.option("--design", "target", default=None, help="Where to write the design.")
@translate_errors
def design(environment: Any, config: str, target: str | None) -> None:
    """Run the offline synthesis and write a JSON design file.

    Example:

    > task cli -- design --config configs/mi_linear.json
    """
    path, artifact = environment.interface.design(config, target)
    click.echo(f"Design written to {path}")
    if artifact.controller is not None:
        eps = artifact.controller.eps
        click.echo(f"N={artifact.N} eps={'inf' if eps is None else f'{eps:.6g}'}")
    if artifact.decoupling is not None:
        click.echo(
            f"N={artifact.N} blocks={artifact.decoupling.block_dims} "
            f"shrink={artifact.decoupling.shrink:.6g}"
        )


@cli.command()
@pass_environment
@click.option("--config", required=True, help="Problem file or built-in name.")
@click.option("--design", default=None, help="Design file; synthesized if omitted.")
@click.option("--x0", default=None, help="Initial state as a comma list.")
@click.option("--steps", default=None, type=int, help="Number of closed-loop steps.")
@click.option("--svg", is_flag=True, help="Also write a trajectory plot.")
@click.option("--peeling", is_flag=True, help="Solve decoupled blocks one by one.")
@translate_errors
def simulate(
    environment: Any,
    config: str,
    design: str | None,
    x0: str | None,
    steps: int | None,
    svg: bool,
    peeling: bool,
) -> None:
    """Run the receding-horizon loop and write the trajectory CSV.

    Example:

    > task cli -- simulate --config nonlinear --x0 1.0,0.5 --steps 20 --svg
    """
    outcome = environment.interface.simulate(
        config, design, parse_x0(x0), steps, svg, peeling
    )
    traj = outcome.trajectory
    click.echo(f"Trajectory written to {outcome.csv_path}")
    if outcome.svg_path is not None:
        click.echo(f"Plot written to {outcome.svg_path}")
    settle = "never" if traj.settle_step is None else str(traj.settle_step)
    click.echo(f"steps={traj.steps} T={settle} max_violation={traj.max_violation:.3g}")


@cli.command()
@pass_environment
@click.option("--config", required=True, help="Problem file or built-in name.")
@click.option("--svg", is_flag=True, help="Also write the region plot.")
@translate_errors
def feasibility(environment: Any, config: str, svg: bool) -> None:
    """Scan a grid of initial states under the proposed and baseline designs.

    Example:

    > task cli -- --workers 4 feasibility --config si_linear --svg
    """
    outcome = environment.interface.feasibility(config, svg)
    fmap = outcome.fmap
    click.echo(f"Feasibility map written to {outcome.csv_path}")
    if outcome.svg_path is not None:
        click.echo(f"Plot written to {outcome.svg_path}")
    click.echo(
        f"proposed={fmap.proposed_count} baseline={fmap.baseline_count} "
        f"ratio={fmap.ratio:.3f} containment={fmap.containment_holds}"
    )


@cli.command()
@pass_environment
@click.option("--config", required=True, help="Problem file or built-in name.")
@click.option("--design", default=None, help="Design file; synthesized if omitted.")
@click.option("--x0", default=None, help="Initial state as a comma list.")
@click.option("--steps", default=None, type=int, help="Steps per run.")
@click.option("--seed", default=None, type=int, help="Overrides the run seed.")
@click.option("--peeling", is_flag=True, help="Solve decoupled blocks one by one.")
@translate_errors
def montecarlo(
    environment: Any,
    config: str,
    design: str | None,
    x0: str | None,
    steps: int | None,
    seed: int | None,
    peeling: bool,
) -> None:
    """Repeat the closed loop under seeded bounded input disturbances.

    Example:

    > task cli -- montecarlo --config si_linear --steps 40 --seed 3
    """
    outcome = environment.interface.montecarlo(
        config, design, parse_x0(x0), steps, seed, peeling
    )
    report = outcome.report
    click.echo(f"Summary written to {outcome.report_path}")
    click.echo(
        f"runs={report.runs} tail_bound={report.tail_bound} "
        f"max_abs_input={report.max_abs_input:.4g} "
        f"infeasible_runs={report.infeasible_runs}"
    )


@cli.command()
@pass_environment
@click.option("--design", required=True, help="Design file to recheck.")
@translate_errors
def validate(environment: Any, design: str) -> None:
    """Recompute residuals and sampled invariance for a stored design.

    Example:

    > task cli -- validate --design output/design_si_linear.json
    """
    reports, path = environment.interface.validate(design)
    click.echo(f"Validation written to {path}")
    for i, report in enumerate(reports):
        nilpotency = report.nilpotency_residual
        click.echo(
            f"[{i}] lyapunov={report.lyapunov_residual:.3g} "
            f"nilpotency={'n/a' if nilpotency is None else f'{nilpotency:.3g}'} "
            f"passed={report.passed}"
        )


def main() -> None:
    try:
        cli(standalone_mode=False)
    except click.UsageError as e:
        e.show()
        sys.exit(1)
    except click.ClickException as e:
        e.show()
        sys.exit(e.exit_code)
    except click.Abort:
        click.echo("Aborted!", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
