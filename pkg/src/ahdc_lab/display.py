"""Rich display utilities for console output."""

from __future__ import annotations

from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeRemainingColumn
from rich.table import Table

console = Console()


def training_progress() -> Progress:
    """Progress bar used by the training loops; one task per epoch."""
    return Progress(
        TextColumn("[bold blue]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeRemainingColumn(),
        console=console,
        transient=True,
    )


def display_stage_banner(stage: str, run_id: str, stage_dir: object) -> None:
    console.print(f"\n[bold cyan]Stage: {stage}[/] [dim](run {run_id})[/dim]")
    console.print(f"Output: {stage_dir}")


def display_dataset_counts(datasets: dict[str, object]) -> None:
    """Display labelled/unlabelled/test counts of each dataset."""
    table = Table(show_header=True, header_style="bold")
    table.add_column("Dataset")
    table.add_column("Labelled", justify="right")
    table.add_column("Unlabelled", justify="right")
    table.add_column("Test", justify="right")
    for name, dataset in datasets.items():
        counts = dataset.counts
        table.add_row(name, str(counts.n_labelled), str(counts.n_unlabelled), str(counts.n_test))
    console.print(table)


def display_summary(title: str, summary: dict) -> None:
    """Display the aggregate block of an evaluation summary."""
    console.print()
    console.print(f"[bold]{title}[/] n={summary['n']}, excluded={len(summary['excluded'])}")
    table = Table(show_header=True, header_style="bold")
    table.add_column("Metric")
    table.add_column("Mean", justify="right")
    table.add_column("Std", justify="right")
    for metric in ("dsc", "ji", "asd"):
        agg = summary[metric]
        mean = "N/A" if agg["mean"] is None else f"{agg['mean']:.4f}"
        std = "N/A" if agg["std"] is None else f"{agg['std']:.4f}"
        table.add_row(metric.upper(), mean, std)
    console.print(table)


def display_layer_values(title: str, rows: list[dict], key: str) -> None:
    """Display per-layer analysis values such as feature correlations."""
    console.print()
    console.print(f"[bold]{title}[/]")
    if not rows:
        console.print("[yellow]No layers.[/yellow]")
        return
    table = Table(show_header=True, header_style="bold")
    table.add_column("Layer")
    table.add_column(key, justify="right")
    for row in rows:
        table.add_row(str(row["layer"]), f"{row[key]:.4f}")
    console.print(table)


def display_study(rows: list[dict]) -> None:
    """Display one line per study variant."""
    table = Table(show_header=True, header_style="bold")
    for column in ("variant", "label_ratio", "patch_size", "lambda_ow", "seed", "dsc_mean", "featcorr_mean"):
        table.add_column(column, justify="left" if column == "variant" else "right")
    for row in rows:
        table.add_row(
            row["variant"],
            str(row["label_ratio"]),
            str(row["patch_size"]),
            str(row["lambda_ow"]),
            str(row["seed"]),
            "N/A" if row["dsc_mean"] is None else f"{row['dsc_mean']:.4f}",
            "N/A" if row["featcorr_mean"] is None else f"{row['featcorr_mean']:.4f}",
        )
    console.print(table)
