# -*- coding: utf-8 -*-

"""Console script for urllc_allocator."""
import logging
import sys
from time import time

import click

from urllc_allocator import controller, recorder, __version__
from urllc_allocator.errors import InvalidInputError


@click.group()
@click.option(
    "--loglevel",
    type=click.Choice(
        ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"], case_sensitive=False
    ),
    default="INFO",
    help="Set the logging level.",
)
@click.option(
    "--logfile",
    type=click.Path(dir_okay=False, writable=True),
    default=None,
    help="Also write the log to this file.",
)
@click.option(
    "--monitor",
    "-m",
    is_flag=True,
    default=False,
    help="Monitor the resource usage of the trials. The log is saved as TSV "
    "into urllc-resource-usage_<date>.tsv.",
)
@click.version_option(version=__version__)
@click.pass_context
def main(ctx, loglevel, logfile, monitor):
    """Joint power and bandwidth allocation for URLLC."""
    ctx.ensure_object(dict)
    ctx.obj["monitor_log"] = None
    if monitor:
        ctx.obj["monitor_log"] = recorder.configure_ressource_logging()
    recorder.configure_logging(loglevel, filename=logfile)
    # For logging from the click commands
    ctx.obj["log"] = logging.getLogger(__name__)
    return 0


def common_options(f):
    """Options shared by every command."""
    options = [
        click.option(
            "--config",
            "configuration",
            type=click.Path(dir_okay=False),
            default=None,
            help="YAML configuration of the experiment (required).",
        ),
        click.option("--seed", type=int, default=None, help="Master seed."),
        click.option(
            "--out-dir",
            type=click.Path(file_okay=False, writable=True),
            default=".",
            show_default=True,
            help="Directory of the outputs and the manifest.",
        ),
        click.option(
            "--samples",
            type=int,
            default=None,
            help="Monte-Carlo draws of the QoS evaluation.",
        ),
        click.option(
            "--threads",
            type=int,
            default=None,
            help="Max. number of trials to run in parallel, each on a "
            "separate thread.",
        ),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def run_controller(ctx, key, configuration, seed, out_dir, samples, threads,
                   **kwargs):
    """Create and run the controller of a command, exit with its code.

    Exit codes: 0 success, 1 usage or configuration error, 2 unconverged or
    QoS check failed.
    """
    logger = ctx.obj["log"]
    if configuration is None:
        click.echo(ctx.get_usage(), err=True)
        click.secho("Error: Missing option '--config'.", fg="red", err=True)
        ctx.exit(controller.EXIT_USAGE)
    start = time()
    try:
        ctrl = controller.factory.create(
            key,
            configuration=configuration,
            overrides={"seed": seed, "evaluation.samples": samples},
            out_dir=out_dir,
            threads=threads,
            monitor_log=ctx.obj["monitor_log"],
            **kwargs,
        )
        code = ctrl.run()
    except InvalidInputError as e:
        logger.debug("Invalid input", exc_info=True)
        click.echo(ctx.get_usage(), err=True)
        click.secho(f"Error: {e}", fg="red", err=True)
        ctx.exit(controller.EXIT_USAGE)
    finish = time()
    logger.info(f"{key} completed in {(finish - start) / 60:.2f} minutes")
    ctx.exit(code)


@click.command("solve-symmetric")
@common_options
@click.pass_context
def solve_symmetric_cmd(ctx, configuration, seed, out_dir, samples, threads):
    """Optimal policy of a symmetric scenario: closed-form power and the
    common bandwidth from the stochastic iteration."""
    run_controller(
        ctx, "solve-symmetric", configuration, seed, out_dir, samples, threads
    )


@click.command("train")
@common_options
@click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False),
    default=None,
    help="Resume from this checkpoint (.npz with its .yml sidecar).",
)
@click.pass_context
def train_cmd(ctx, configuration, seed, out_dir, samples, threads, checkpoint):
    """Train the power allocation network and the bandwidths."""
    run_controller(
        ctx, "train", configuration, seed, out_dir, samples, threads,
        checkpoint=checkpoint,
    )


@click.command("evaluate")
@common_options
@click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False),
    default=None,
    help="Checkpoint of the learned policy.",
)
@click.option(
    "--policy",
    type=click.Choice(["optimal", "learned", "equal_power"]),
    default="learned",
    show_default=True,
    help="Policy to evaluate. 'learned' trains from scratch without "
    "--checkpoint.",
)
@click.pass_context
def evaluate_cmd(ctx, configuration, seed, out_dir, samples, threads,
                 checkpoint, policy):
    """Monte-Carlo check of the QoS constraints of a policy."""
    run_controller(
        ctx, "evaluate", configuration, seed, out_dir, samples, threads,
        checkpoint=checkpoint, policy=policy,
    )


@click.command("sweep")
@common_options
@click.pass_context
def sweep_cmd(ctx, configuration, seed, out_dir, samples, threads):
    """Total bandwidth against the number of users for every policy."""
    run_controller(
        ctx, "sweep", configuration, seed, out_dir, samples, threads
    )


@click.command("convergence-study")
@common_options
@click.pass_context
def convergence_study_cmd(ctx, configuration, seed, out_dir, samples,
                          threads):
    """Frames to convergence over random drops, with and without
    pre-training."""
    run_controller(
        ctx, "convergence-study", configuration, seed, out_dir, samples,
        threads,
    )


main.add_command(solve_symmetric_cmd)
main.add_command(train_cmd)
main.add_command(evaluate_cmd)
main.add_command(sweep_cmd)
main.add_command(convergence_study_cmd)

if __name__ == "__main__":
    sys.exit(main(obj={}))  # pragma: no cover
