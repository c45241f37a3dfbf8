"""Command line interface for the massive-access simulator."""

import asyncio
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence

import click
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table

from .config import load_settings
from .dqn import load_checkpoint, save_checkpoint
from .errors import DimensionError, MassiveAccessError
from .harness import (
    ExperimentRunner,
    build_envs,
    evaluate_approach,
    seeded,
    train_approach,
)
from .metrics import (
    CELL_COLUMNS,
    EVENT_COLUMNS,
    FIGURE_SWEEPS,
    cell_rows,
    figure_tables,
    rows_to_csv,
)
from .models import (
    Approach,
    EpisodeMetrics,
    ExperimentSpec,
    SimulationConfig,
    SweepVariable,
)

console = Console()
logger = logging.getLogger(__name__)

ENV_PREFIX = "MASSIVE_ACCESS"
APPROACHES = [a.value for a in Approach]


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


@contextmanager
def reported_errors() -> Iterator[None]:
    """Turn library errors into a red message and exit status 1."""
    try:
        yield
    except KeyboardInterrupt:
        console.print(
            "\n[yellow]Interrupted. Runner state saved; rerun with --resume.[/yellow]"
        )
        sys.exit(130)
    except (MassiveAccessError, ValidationError) as e:
        console.print(f"[red]Error: {e}[/red]")
        sys.exit(1)


def _parse_list(text: Optional[str], cast: Callable[[str], Any]) -> List[Any]:
    if not text:
        return []
    try:
        return [cast(item.strip()) for item in text.split(",") if item.strip()]
    except ValueError as e:
        raise click.BadParameter(f"cannot parse '{text}': {e}") from e


def _settings(
    config: Optional[Path], episodes: Optional[int], faithful_loss: bool
) -> SimulationConfig:
    overrides: Dict[str, Any] = {}
    if episodes is not None:
        overrides["train.episodes"] = episodes
    if faithful_loss:
        overrides["train.target_sync_period"] = 0
    return load_settings(config, overrides)


def _metrics_table(
    title: str, rows: Sequence[EpisodeMetrics], limit: int = 10
) -> Table:
    table = Table(title=title)
    columns = ("index", "mean EE", "success", "URLLC", "normal", "reward", "outage")
    for column in columns:
        table.add_column(column, justify="right")

    def fmt(value: Optional[float]) -> str:
        return "-" if value is None else f"{value:.4f}"

    for row in rows[-limit:]:
        table.add_row(
            str(row.index),
            fmt(row.mean_ee),
            fmt(row.success),
            fmt(row.success_urllc),
            fmt(row.success_normal),
            fmt(row.mean_reward),
            fmt(row.sinr_outage),
        )
    return table


def config_option(f: Callable) -> Callable:
    return click.option(
        "--config",
        "-c",
        "config_path",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        default=None,
        help="Key/value config file (defaults to the built-in desk scenario)",
    )(f)


def out_option(f: Callable) -> Callable:
    return click.option(
        "--out",
        "-o",
        type=click.Path(file_okay=False, path_type=Path),
        default="output",
        show_default=True,
        help="Output directory",
    )(f)


def episodes_option(f: Callable) -> Callable:
    return click.option(
        "--episodes", "-e", type=click.IntRange(min=0), help="Override train.episodes"
    )(f)


def faithful_option(f: Callable) -> Callable:
    return click.option(
        "--faithful-loss",
        is_flag=True,
        help="Bootstrap TD targets from the online network (no target copy)",
    )(f)


def slots_options(f: Callable) -> Callable:
    f = click.option(
        "--window", type=click.IntRange(min=1), default=100, show_default=True
    )(f)
    return click.option(
        "--slots",
        "-s",
        type=click.IntRange(min=1),
        default=1000,
        show_default=True,
        help="Implementation-stage slots",
    )(f)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.version_option(package_name="urllc-massive-access")
def cli(verbose: bool) -> None:
    """Energy-efficient massive access with URLLC constraints.
    \n
       Ex:  massive-access sweep -c configs/desk.conf --sweep latency --values 1,5,10
    """
    setup_logging(verbose)


@cli.command(name="train")
@config_option
@click.option("--approach", "-a", type=click.Choice(APPROACHES), default="proposed")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@out_option
@episodes_option
@faithful_option
def train_command(
    config_path: Optional[Path],
    approach: str,
    seed: int,
    out: Path,
    episodes: Optional[int],
    faithful_loss: bool,
) -> None:
    """Run the training stage and save a checkpoint."""
    with reported_errors():
        settings = seeded(_settings(config_path, episodes, faithful_loss), seed)
        chosen = Approach(approach)
        env, _, groups = build_envs(settings)
        console.print(
            f"[bold blue]Training {chosen.value}[/bold blue] on {env.num_links} links"
        )

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
        ) as progress:
            task = progress.add_task(
                f"{settings.train.episodes} episodes...", total=None
            )
            models, rows = train_approach(settings, chosen, env, groups)
            progress.update(task, description="Complete!")

        out.mkdir(parents=True, exist_ok=True)
        (out / "train.csv").write_text(
            rows_to_csv(CELL_COLUMNS, cell_rows("train", rows))
        )
        if models:
            save_checkpoint(out / "checkpoint.npz", models)
            console.print(f"Checkpoint: {out / 'checkpoint.npz'}")
        if rows:
            console.print(_metrics_table("Last training episodes", rows))
        console.print(f"[bold green]Training metrics saved to {out / 'train.csv'}")


@cli.command(name="evaluate")
@config_option
@click.option("--approach", "-a", type=click.Choice(APPROACHES), default="proposed")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Trained models (defaults to <out>/checkpoint.npz)",
)
@out_option
@slots_options
def evaluate_command(
    config_path: Optional[Path],
    approach: str,
    seed: int,
    checkpoint: Optional[Path],
    out: Path,
    slots: int,
    window: int,
) -> None:
    """Run the implementation stage on unseen channel slots."""
    with reported_errors():
        settings = seeded(load_settings(config_path), seed)
        chosen = Approach(approach)
        _, eval_env, groups = build_envs(settings)

        models = []
        if chosen in (Approach.PROPOSED, Approach.FULLY_DISTRIBUTED):
            models = load_checkpoint(checkpoint or out / "checkpoint.npz")
            if len(models) != eval_env.num_links:
                raise DimensionError(
                    f"Checkpoint holds {len(models)} agents, "
                    f"scenario has {eval_env.num_links}"
                )
            if models[0].input_size != eval_env.state_size:
                raise DimensionError(
                    f"Checkpoint state size {models[0].input_size} "
                    f"!= {eval_env.state_size}"
                )

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
        ) as progress:
            task = progress.add_task(f"Evaluating {chosen.value}...", total=None)
            rows, events = evaluate_approach(
                settings, chosen, models, eval_env, groups, slots, window
            )
            progress.update(task, description="Complete!")

        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(
            rows_to_csv(CELL_COLUMNS, cell_rows("eval", rows))
        )
        (out / "events.csv").write_text(
            rows_to_csv(EVENT_COLUMNS, [event.model_dump() for event in events])
        )
        console.print(_metrics_table("Evaluation windows", rows))
        console.print(f"[bold green]Evaluation metrics saved to {out / 'eval.csv'}")


@cli.command(name="sweep")
@config_option
@click.option(
    "--approach",
    "-a",
    "approaches",
    type=click.Choice(APPROACHES),
    multiple=True,
    help="Approaches to compare (default: all)",
)
@click.option(
    "--sweep",
    type=click.Choice([s.value for s in SweepVariable]),
    default=SweepVariable.NONE.value,
    show_default=True,
)
@click.option("--values", help="Comma separated sweep values")
@click.option("--seeds", default="0", show_default=True, help="Comma separated seeds")
@out_option
@episodes_option
@slots_options
@faithful_option
@click.option(
    "--max-concurrent", type=click.IntRange(min=1), default=2, show_default=True
)
@click.option("--resume", is_flag=True, help="Skip cells finished by a previous run")
@click.option("--save-models", is_flag=True, help="Keep a checkpoint per learning cell")
def sweep_command(
    config_path: Optional[Path],
    approaches: tuple,
    sweep: str,
    values: Optional[str],
    seeds: str,
    out: Path,
    episodes: Optional[int],
    slots: int,
    window: int,
    faithful_loss: bool,
    max_concurrent: int,
    resume: bool,
    save_models: bool,
) -> None:
    """Run every (approach, sweep value, seed) cell and aggregate across seeds."""
    with reported_errors():
        settings = _settings(config_path, None, faithful_loss)
        spec = ExperimentSpec(
            config_path=str(config_path) if config_path else None,
            approaches=list(approaches) or list(Approach),
            sweep=sweep,
            sweep_values=_parse_list(values, float),
            seeds=_parse_list(seeds, int),
            episodes=episodes,
            slots=slots,
            window=window,
        )
        runner = ExperimentRunner(
            spec, settings, out, max_concurrent, resume=resume, save_models=save_models
        )
        cells = runner.cells()
        console.print("[bold blue]Massive access experiment[/bold blue]")
        console.print(f"Approaches: {', '.join(a.value for a in spec.approaches)}")
        console.print(f"Sweep: {spec.sweep.value} {spec.sweep_values or ''}")
        console.print(f"Seeds: {spec.seeds}  Cells: {len(cells)}")

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            console=console,
        ) as progress:
            task = progress.add_task("Running cells...", total=len(cells))
            aggregate = asyncio.run(runner.run(lambda _: progress.advance(task)))
            progress.update(task, description="Complete!")

        console.print(f"\n[bold green]Experiment completed![/bold green] {aggregate}")


@cli.command(name="figure")
@out_option
@click.option(
    "--figure",
    "-f",
    "figure_id",
    type=click.Choice([str(i) for i in sorted(FIGURE_SWEEPS)]),
    required=True,
)
def figure_command(out: Path, figure_id: str) -> None:
    """Build a plot-ready table from <out>/aggregate.csv."""
    with reported_errors():
        table = figure_tables(out / "aggregate.csv", int(figure_id))
        path = out / f"figure{figure_id}.csv"
        path.write_text(table.to_csv())

        view = Table(title=f"Figure {figure_id}")
        for column in table.columns:
            view.add_column(column, justify="right")
        for row in table.rows:
            view.add_row(*("" if v is None else f"{v:.6g}" for v in row))
        console.print(view)
        console.print(f"[bold green]Saved {path}[/bold green]")


def main() -> None:
    cli(auto_envvar_prefix=ENV_PREFIX)


if __name__ == "__main__":
    main()
