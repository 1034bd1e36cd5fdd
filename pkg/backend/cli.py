"""
Command-line entry point: ``granular-tails``.

Exit codes: 0 success, 1 verification/compare failure or a failed pipeline,
2 usage or configuration error.
"""

import logging
import math
import sys
from typing import Callable, List, Optional, Sequence, Tuple

import click
import numpy as np
import pandas as pd
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from backend import __version__
from backend.dsmc_service.ensemble import init_ensemble, save_snapshot
from backend.dsmc_service.simulator import seed_sensitivity, simulate
from backend.dsmc_service.tail_fit import fit_tail
from backend.kernel_service.povzner import gamma_p
from backend.moment_service.grid import MomentGrid
from backend.moment_service.normalized import geometric_check, normalize
from backend.moment_service.propagation import propagate
from backend.moment_service.tail import estimate_tail_order
from backend.report_service.artifacts import (
    ArtifactWriter,
    compare,
    consistency_frame,
    histogram_frame,
    load_report,
    moments_frame,
)
from backend.shared.config import get_settings, load_experiment_config, theory_constants
from backend.shared.exceptions import (
    ConfigError,
    GranularTailsError,
    InconclusiveEstimateError,
)
from backend.shared.log_config import configure_logging
from backend.shared.models import (
    ArtifactRecord,
    ConsistencyReport,
    ExperimentConfig,
    ForcingKind,
    ForcingModel,
    MomentsBlock,
    RestitutionParams,
    SteadyStateReport,
    SuiteResult,
)
from backend.verification_service.suites import VerificationRunner


logger = logging.getLogger(__name__)
console = Console()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# Outcome of a pipeline body: exit code
Pipeline = Callable[[ArtifactWriter], int]


class RunContext:
    """Global options shared by every subcommand."""

    def __init__(self, seed: Optional[int], threads: int, out: str):
        self.seed = seed
        self.threads = threads
        self.out = out


def parse_range(text: str) -> List[float]:
    """'start:step:stop' (inclusive) or a comma-separated list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise click.BadParameter(f"Expected start:step:stop, got {text!r}")
        start, step, stop = (float(part) for part in parts)
        if step <= 0 or stop < start:
            raise click.BadParameter(f"Empty range {text!r}")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(count)]
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"Not a number list: {text!r}") from exc


def _execute(
    ctx: click.Context,
    command: str,
    body: Pipeline,
    out_dir: Optional[str] = None,
    prefix: str = "run",
    config_hash: Optional[str] = None,
    seed: Optional[int] = None,
) -> None:
    """Run a pipeline body under one manifest and map errors to exit codes."""
    run: RunContext = ctx.obj
    writer = ArtifactWriter(
        out_dir or run.out,
        command=command,
        prefix=prefix,
        config_hash=config_hash,
        seed=seed,
        threads=run.threads,
    )
    try:
        code = body(writer)
    except ConfigError as exc:
        writer.finish("failed", str(exc))
        click.echo(f"Configuration error: {exc}", err=True)
        ctx.exit(EXIT_USAGE)
    except GranularTailsError as exc:
        logger.error("%s failed: %s", command, exc)
        writer.finish("partial", str(exc))
        click.echo(f"Error: {exc}", err=True)
        ctx.exit(EXIT_FAILURE)
    else:
        writer.finish("complete")
        ctx.exit(code)


def _forcing_model(kind: str, mu: float, lam: float, kappa: float) -> ForcingModel:
    try:
        return ForcingModel(kind=ForcingKind(kind), mu=mu, lam=lam, kappa=kappa)
    except ValidationError as exc:
        raise click.BadParameter(exc.errors()[0]["msg"], param_hint="--model") from exc


def _restitution(e: float) -> RestitutionParams:
    try:
        return RestitutionParams(e=e)
    except ValidationError as exc:
        raise click.BadParameter(exc.errors()[0]["msg"], param_hint="--e") from exc


def _gamma_frame(betas: Sequence[float], orders: Sequence[float]) -> pd.DataFrame:
    rows = []
    for beta in betas:
        params = RestitutionParams.from_beta(beta)
        for p in orders:
            value = gamma_p(params, p)
            rows.append({"beta": beta, "p": p, "gamma_p": value.value, "err_estimate": value.err_estimate})
    return pd.DataFrame(rows, columns=["beta", "p", "gamma_p", "err_estimate"])


def _suite_table(results: Sequence[SuiteResult]) -> Table:
    table = Table(title="Verification suites")
    for column in ("suite", "checks", "violations", "worst margin", "status"):
        table.add_column(column)
    for result in results:
        table.add_row(
            result.suite,
            str(result.trials),
            str(result.violations),
            f"{result.worst_margin:.3g}",
            "[green]pass[/green]" if result.passed else "[red]FAIL[/red]",
        )
    return table


def _report_table(report: SteadyStateReport) -> Table:
    table = Table(title=f"Steady state (N={report.n_particles}, seed={report.seed})")
    table.add_column("p")
    table.add_column("m_p")
    table.add_column("stderr")
    table.add_column("reliable")
    for row in report.moments.rows:
        table.add_row(f"{row.p:g}", f"{row.m:.6g}", f"{row.stderr:.2g}", "yes" if row.reliable else "no")
    return table


@click.group()
@click.version_option(__version__, prog_name="granular-tails")
@click.option("--seed", type=int, default=None, help="Random seed (overrides the config seed).")
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    default=None,
    help="Worker threads; 1 is the bit-reproducible reference. [env GRANULAR_THREADS]",
)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory. [env GRANULAR_OUT_DIR]")
@click.option("--log-level", default=None, help="debug, info, warning or error.")
@click.option("--log-format", type=click.Choice(["console", "json"]), default=None)
@click.pass_context
def cli(
    ctx: click.Context,
    seed: Optional[int],
    threads: Optional[int],
    out: Optional[str],
    log_level: Optional[str],
    log_format: Optional[str],
) -> None:
    """Moment bounds and DSMC tail measurements for forced inelastic hard spheres."""
    current = get_settings()
    configure_logging(log_level or current.LOG_LEVEL, log_format or current.LOG_FORMAT)
    ctx.obj = RunContext(seed=seed, threads=threads or current.THREADS, out=out or current.OUT_DIR)


@cli.command()
@click.option("--beta", "betas", type=click.FloatRange(0.5, 1.0), multiple=True, required=True, help="beta in [1/2, 1]; repeatable.")
@click.option("--p", "p_range", default="1:0.5:10", show_default=True, help="start:step:stop or a list.")
@click.pass_context
def kernel(ctx: click.Context, betas: Tuple[float, ...], p_range: str) -> None:
    """Tabulate gamma_p to CSV (columns beta, p, gamma_p, err_estimate)."""
    orders = parse_range(p_range)

    def body(writer: ArtifactWriter) -> int:
        frame = _gamma_frame(betas, orders)
        writer.write_csv("gamma.csv", frame, "gamma_table")
        console.print(frame.to_string(index=False))
        return EXIT_OK

    _execute(ctx, "kernel", body, prefix="kernel")


@cli.command()
@click.argument("suites", nargs=-1)
@click.option("--trials", type=click.IntRange(min=1), default=None, help="Trials per suite.")
@click.pass_context
def verify(ctx: click.Context, suites: Tuple[str, ...], trials: Optional[int]) -> None:
    """Run property suites: gamma, povzner, binomial, collision, surplus, closure (default: all)."""
    run: RunContext = ctx.obj
    seed = 0 if run.seed is None else run.seed
    names = list(suites) or ["all"]
    unknown = [name for name in names if name != "all" and name not in VerificationRunner.SUITES]
    if unknown:
        raise click.BadParameter(
            f"unknown suite(s) {', '.join(unknown)}; choose from {', '.join(VerificationRunner.SUITES)}",
            param_hint="SUITES",
        )

    def body(writer: ArtifactWriter) -> int:
        results = VerificationRunner(seed=seed).run(names, trials=trials)
        writer.write_json_list("verify.json", results, "verification")
        console.print(_suite_table(results))
        return EXIT_OK if all(result.passed for result in results) else EXIT_FAILURE

    _execute(ctx, "verify", body, prefix="verify", seed=seed)


@cli.command()
@click.option("--model", "kind", type=click.Choice([kind.value for kind in ForcingKind]), required=True)
@click.option("--mu", type=float, default=0.0)
@click.option("--lambda", "lam", type=float, default=0.0)
@click.option("--kappa", type=float, default=0.0)
@click.option("--e", "restitution", type=float, default=0.8, show_default=True)
@click.option("--m1", type=float, required=True, help="Second moment m_1 (lower end when --m1-hi is given).")
@click.option("--m1-hi", type=float, default=None)
@click.option("--p-max", type=float, default=20.0, show_default=True)
@click.option("--a", "a", type=float, default=None, help="Growth exponent for the geometric check.")
@click.option("--b", "b", type=float, default=None)
@click.pass_context
def moments(
    ctx: click.Context,
    kind: str,
    mu: float,
    lam: float,
    kappa: float,
    restitution: float,
    m1: float,
    m1_hi: Optional[float],
    p_max: float,
    a: Optional[float],
    b: Optional[float],
) -> None:
    """Propagate steady-state moment intervals and check their growth."""
    model = _forcing_model(kind, mu, lam, kappa)
    params = _restitution(restitution)

    def body(writer: ArtifactWriter) -> int:
        grid = propagate(model, params, (m1, m1_hi if m1_hi is not None else m1), p_max)
        writer.write_grid("grid.csv", grid)
        _analyze_grid(writer, grid, a, b)
        return EXIT_OK

    _execute(ctx, "moments", body, prefix="moments")


def _analyze_grid(
    writer: ArtifactWriter,
    grid: MomentGrid,
    a: Optional[float],
    b: Optional[float],
    scan: Optional[MomentsBlock] = None,
) -> None:
    """Normalized export, geometric check and tail-order scan of a grid."""
    if a is None and "model" in grid.metadata:
        a = theory_constants.tail_exponent(ForcingKind(grid.metadata["model"]))
    if a is not None:
        b = theory_constants.default_b(a) if b is None else b
        z = normalize(grid, a, b)
        writer.write_csv("normalized.csv", z.to_frame(), "normalized_moments")
        if grid.p_max >= 5.5:
            fit = geometric_check(z, p_from=2.0)
            writer.write_json("geometric.json", fit, "geometric_fit")
            console.print(f"geometric check at a={a:g}, b={b:g}: holds={fit.holds} q={fit.q:.4g} Q={fit.Q:.4g}")
    if grid.p_max >= 10:
        try:
            if scan is None:
                estimate = estimate_tail_order(grid)
            else:
                estimate = estimate_tail_order(grid, s_min=scan.s_min, s_max=scan.s_max, s_step=scan.s_step)
        except InconclusiveEstimateError as exc:
            logger.warning("Tail-order scan inconclusive: %s", exc)
            return
        writer.write_json("tail.json", estimate, "tail_estimate")
        console.print(f"tail order s={estimate.s:.2f} r*={estimate.r_star:.4g} success={estimate.success}")


@cli.command(name="simulate")
@click.argument("config_path", type=click.Path())
@click.option("--replicas", type=click.IntRange(min=1), default=1, show_default=True, help="Runs with seeds seed, seed+1, ...")
@click.option("--snapshot/--no-snapshot", default=False, help="Also write the final ensemble.")
@click.pass_context
def simulate_command(ctx: click.Context, config_path: str, replicas: int, snapshot: bool) -> None:
    """Run the DSMC simulator to steady state from an experiment file."""
    config, config_hash = _load_config(config_path)
    run: RunContext = ctx.obj
    seed = config.seed if run.seed is None else run.seed

    def body(writer: ArtifactWriter) -> int:
        _simulate(writer, config, seed, run.threads, replicas, snapshot)
        return EXIT_OK

    _execute(ctx, "simulate", body, out_dir=config.output.dir, prefix=config.output.prefix, config_hash=config_hash, seed=seed)


def _simulate(
    writer: ArtifactWriter,
    config: ExperimentConfig,
    seed: int,
    threads: int,
    replicas: int = 1,
    snapshot: bool = False,
) -> SteadyStateReport:
    reports = []
    for offset in range(replicas):
        ensemble = init_ensemble(config.dsmc.n, config.dsmc.temperature, seed + offset, threads=threads)
        reports.append(simulate(config, ensemble=ensemble))
        if snapshot:
            suffix = "" if replicas == 1 else f"_seed{seed + offset}"
            path = save_snapshot(ensemble, writer.path(f"snapshot{suffix}.csv"))
            writer.manifest.artifacts.append(ArtifactRecord(path=path.name, kind="ensemble_snapshot"))
    if replicas > 1:
        sensitivity = seed_sensitivity(reports)
        for report in reports:
            report.diagnostics["seed_sensitivity"] = sensitivity
        if not sensitivity["consistent"]:
            logger.warning("Steady m_1 differs across seeds (max z = %.3g)", sensitivity["max_z"])

    for offset, report in enumerate(reports):
        suffix = "" if replicas == 1 else f"_seed{seed + offset}"
        writer.write_json(f"report{suffix}.json", report, "steady_state_report")
        writer.write_csv(f"moments{suffix}.csv", moments_frame(report.moments), "moment_table")
        writer.write_csv(f"histogram{suffix}.csv", histogram_frame(report.histogram), "speed_histogram")
    console.print(_report_table(reports[0]))
    return reports[0]


def _load_config(path: str) -> Tuple[ExperimentConfig, str]:
    try:
        return load_experiment_config(path)
    except ConfigError as exc:
        click.echo(f"Configuration error: {exc}", err=True)
        raise click.exceptions.Exit(EXIT_USAGE) from exc


@cli.command()
@click.argument("artifact", type=click.Path(exists=True, dir_okay=False))
@click.option("--a", "a", type=float, default=None)
@click.option("--b", "b", type=float, default=None)
@click.pass_context
def analyze(ctx: click.Context, artifact: str, a: Optional[float], b: Optional[float]) -> None:
    """Tail analysis of a moment grid (.csv) or a steady-state report (.json)."""
    run: RunContext = ctx.obj

    def body(writer: ArtifactWriter) -> int:
        if artifact.endswith(".csv"):
            grid = MomentGrid.from_csv(artifact)
            _analyze_grid(writer, grid, a, b)
            return EXIT_OK
        report = load_report(artifact)
        one_sided = report.model is not None and report.model.is_shear
        estimate = fit_tail(
            report.histogram,
            moments=report.moments,
            seed=report.seed if run.seed is None else run.seed,
            one_sided=one_sided,
        )
        writer.write_json("tail.json", estimate, "tail_estimate")
        console.print(f"histogram tail s={estimate.s:.3f} r={estimate.r_star:.4g} ci={estimate.s_ci}")
        return EXIT_OK

    _execute(ctx, "analyze", body, prefix="analyze")


@cli.command(name="compare")
@click.argument("report_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("grid_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--p-max", type=float, default=6.0, show_default=True)
@click.option("--ignore-restitution", is_flag=True, help="Compare against a grid propagated at another e.")
@click.pass_context
def compare_command(
    ctx: click.Context,
    report_path: str,
    grid_path: str,
    p_max: float,
    ignore_restitution: bool,
) -> None:
    """Check empirical moments of a report against a propagated grid."""

    def body(writer: ArtifactWriter) -> int:
        result = compare(
            load_report(report_path),
            MomentGrid.from_csv(grid_path),
            p_max=p_max,
            check_restitution=not ignore_restitution,
        )
        _write_consistency(writer, result)
        return EXIT_OK if result.passed else EXIT_FAILURE

    _execute(ctx, "compare", body, prefix="compare")


def _write_consistency(writer: ArtifactWriter, result: ConsistencyReport) -> None:
    writer.write_json("consistency.json", result, "consistency_report")
    writer.write_csv("consistency.csv", consistency_frame(result), "consistency_table")
    verdict = "[green]pass[/green]" if result.passed else f"[red]FAIL[/red] at p = {result.violations}"
    console.print(f"consistency: {verdict}")


@cli.command(name="run")
@click.argument("config_path", type=click.Path())
@click.pass_context
def run_command(ctx: click.Context, config_path: str) -> None:
    """Execute the pipeline named in an experiment file."""
    config, config_hash = _load_config(config_path)
    run: RunContext = ctx.obj
    seed = config.seed if run.seed is None else run.seed
    pipeline = config.pipeline

    def body(writer: ArtifactWriter) -> int:
        code = EXIT_OK
        params = config.params
        if pipeline == "kernel":
            orders = [float(p) for p in np.arange(1.0, config.moments.p_max + 0.25, 0.5)]
            frame = _gamma_frame([params.beta], orders)
            writer.write_csv("gamma.csv", frame, "gamma_table")
            return code

        if pipeline == "verify":
            results = VerificationRunner(seed=seed).run(["all"])
            writer.write_json_list("verify.json", results, "verification")
            console.print(_suite_table(results))
            return EXIT_OK if all(result.passed for result in results) else EXIT_FAILURE

        b = config.moments.b
        if pipeline == "moments":
            if config.moments.m1 is None:
                raise ConfigError("moments pipeline needs moments_m1", field="moments_m1")
            grid = propagate(config.model, params, config.moments.m1, config.moments.p_max)
            writer.write_grid("grid.csv", grid)
            _analyze_grid(writer, grid, None, b, scan=config.moments)
            return code

        report = _simulate(writer, config, seed, run.threads)
        if pipeline == "simulate":
            return code
        if report.tail is not None:
            writer.write_json("tail.json", report.tail, "tail_estimate")
        if pipeline == "analyze":
            return code

        m1_row = report.moments.get(1.0)
        if m1_row is None:
            raise ConfigError("dsmc_p_max must be at least 1 to seed propagation", field="dsmc_p_max")
        spread = 3.0 * m1_row.stderr
        seed_m1 = (max(m1_row.m - spread, 1e-12), m1_row.m + spread)
        grid = propagate(config.model, params, seed_m1, config.moments.p_max)
        writer.write_grid("grid.csv", grid)
        _analyze_grid(writer, grid, None, b, scan=config.moments)
        result = compare(report, grid, p_max=min(6.0, config.dsmc.p_max))
        _write_consistency(writer, result)
        return EXIT_OK if result.passed else EXIT_FAILURE

    _execute(
        ctx,
        f"run:{pipeline}",
        body,
        out_dir=config.output.dir,
        prefix=config.output.prefix,
        config_hash=config_hash,
        seed=seed,
    )


def main(argv: Optional[List[str]] = None) -> None:
    """Console-script entry point."""
    cli.main(args=argv, prog_name="granular-tails")


if __name__ == "__main__":
    main(sys.argv[1:])
