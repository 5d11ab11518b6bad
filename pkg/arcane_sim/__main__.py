#!/usr/bin/env python3
"""CLI for arcane-sim.

Execute with:
  $ sim --trace out/trace run workloads/conv_layer.wl
  $ sim sweep speedup --sizes 64,128,256 --lanes 2,4,8 --eew 8,32 --out speedup.csv
  $ python -m arcane_sim encode "xmk4.w m2, m0, m1"
"""

import functools
import sys
from dataclasses import dataclass
from pathlib import Path

import click

from arcane_sim import harness, isa
from arcane_sim.config import SimConfig
from arcane_sim.dataclasses import Eew
from arcane_sim.errors import ArcaneError, ConfigInvariantViolated, ParseError
from arcane_sim.logging_config import get_logger, setup_logging
from arcane_sim.simulator import Simulator

logger = get_logger(__name__)

EXIT_PARSE_ERROR = 2
EXIT_SIMULATION_ERROR = 3


@dataclass(slots=True)
class CliState:
    config: SimConfig
    trace_dir: Path | None = None


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok, 0) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise click.BadParameter(f"Expected a comma-separated list of integers, got {text!r}") from None


def _eew_list(text: str) -> list[Eew]:
    try:
        return [Eew.parse(tok.strip()) for tok in text.split(",") if tok.strip()]
    except ArcaneError as e:
        raise click.BadParameter(str(e)) from None


def guarded(func):
    """Map simulator errors to the documented exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ParseError, ConfigInvariantViolated) as e:
            logger.error(str(e))
            sys.exit(EXIT_PARSE_ERROR)
        except ArcaneError as e:
            logger.error(f"{type(e).__name__}: {e}")
            sys.exit(EXIT_SIMULATION_ERROR)

    return wrapper


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        click.echo(text, nl=False)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    logger.info(f"Wrote {out}")


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="File whose [config] section overrides the defaults and ARCANE_* variables",
)
@click.option("--log-level", default=None, help="Logging level (defaults to LOG_LEVEL or info)")
@click.option(
    "--trace",
    "trace_dir",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Directory for ct.csv, at.csv, uops.csv and events.csv of a run",
)
@click.pass_context
@guarded
def main(ctx, config_path, log_level, trace_dir):
    """Simulate ARCANE compute-capable caches running offloaded matrix kernels."""
    setup_logging(log_level)
    config = SimConfig.from_env()
    if config_path is not None:
        config = harness.load_config(config_path, config)
        logger.debug(f"Loaded config overrides from {config_path}")
    ctx.obj = CliState(config, trace_dir)


@main.command()
@click.argument("workload", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Write the report CSV here instead of stdout")
@click.pass_obj
@guarded
def run(state, workload, out):
    """Run a workload file and print its execution report."""
    trace_dir = state.trace_dir
    config, program = harness.load_workload(workload, state.config)
    sim = Simulator(config, trace=trace_dir is not None)
    report = sim.run(program)
    if trace_dir is not None:
        sim.dump_trace(trace_dir)
    _emit(harness.reports_csv([report]), out)


@main.group()
def sweep():
    """Conv-layer experiment sweeps."""


def _sweep_options(func):
    options = [
        click.option("--sizes", default=",".join(map(str, harness.DEFAULT_SIZES)), help="Ascending input sizes"),
        click.option("--lanes", default=",".join(map(str, harness.DEFAULT_LANES)), help="Lane counts"),
        click.option("--seed", type=int, default=1, help="Seed of the random input data"),
        click.option("--jobs", type=int, default=1, help="Worker processes"),
        click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None),
        click.option("--plot-dir", type=click.Path(file_okay=False, path_type=Path), default=None,
                     help="Also write plot-ready CSVs, one per (eew, filter)"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@sweep.command()
@_sweep_options
@click.option("--eew", default="32", help="Element width (8, 16, 32 or b, h, w)")
@click.option("--filter", "filter_size", type=int, default=3, help="Filter size")
@click.pass_obj
@guarded
def overhead(state, sizes, lanes, seed, jobs, out, plot_dir, eew, filter_size):
    """Phase breakdown per input size and lane count."""
    widths = _eew_list(eew) or [Eew.W]
    rows = harness.sweep_overhead(
        _int_list(sizes), _int_list(lanes), widths[0], filter_size, state.config, seed, jobs
    )
    _emit(harness.rows_csv(rows), out)
    if plot_dir is not None:
        harness.write_plot_data(rows, plot_dir)


@sweep.command()
@_sweep_options
@click.option("--eew", default="8,32", help="Element widths")
@click.option("--filters", default="3", help="Filter sizes")
@click.pass_obj
@guarded
def speedup(state, sizes, lanes, seed, jobs, out, plot_dir, eew, filters):
    """Speedup over the scalar and packed-SIMD host baselines."""
    rows = harness.sweep_speedup(
        _int_list(sizes), _int_list(lanes), _eew_list(eew), _int_list(filters), state.config, seed, jobs
    )
    _emit(harness.rows_csv(rows), out)
    if plot_dir is not None:
        harness.write_plot_data(rows, plot_dir)


@main.command()
@click.argument("asm")
@click.option("--rs", "rs_indices", default="10,11,12", help="Indices of the rs1, rs2, rs3 source registers")
@guarded
def encode(asm, rs_indices):
    """Assemble one xmnmc instruction."""
    try:
        inst = isa.assemble(asm, rs_indices=_int_list(rs_indices))
    except ArcaneError as e:
        raise ParseError(str(e), 1, 1, "<argument>") from None
    rs1, rs2, rs3 = inst.regs
    click.echo(f"word={inst.word:#010x} bytes={isa.to_bytes(inst.word).hex()}")
    click.echo(f"rs1={rs1:#010x} rs2={rs2:#010x} rs3={rs3:#010x}")


@main.command()
@click.argument("word")
@click.option("--rs1", default="0", help="Value of rs1")
@click.option("--rs2", default="0", help="Value of rs2")
@click.option("--rs3", default="0", help="Value of rs3")
@guarded
def decode(word, rs1, rs2, rs3):
    """Disassemble an instruction word given its register values."""
    try:
        values = [int(v, 0) for v in (word, rs1, rs2, rs3)]
    except ValueError:
        raise ParseError(f"Expected hexadecimal or decimal numbers, got {word!r}", 1, 1, "<argument>") from None
    op = isa.decode(*values)
    click.echo(isa.disassemble(op))
    click.echo(f"func5={op.func5} eew={int(op.eew)} rs=({op.rs1_idx}, {op.rs2_idx}, {op.rs3_idx})")


if __name__ == "__main__":
    main()
