"""CLI interface for gpvit-desk"""

import functools
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import click
import numpy as np
import pandas as pd
from pydantic import ValidationError
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TaskProgressColumn, TextColumn
from rich.table import Table

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, config_digest, load_config
from .cost import count_flops, count_params, emit_report, scaling_series_channels, scaling_table
from .errors import DivergenceError, GPViTError, UsageError
from .gradcheck import DEFAULT_PARAM_CAP, DEFAULT_STEP, DEFAULT_TOLERANCE, run_gradcheck
from .image_io import image_to_input, read_pnm, write_group_maps
from .invariants import FAULTS, SUITES, run_invariants
from .manifest import RunManifest
from .model import build_model, forward_classify
from .presets import get_preset, list_presets
from .synthetic import SyntheticDataset
from .tensor import PRECISIONS, Tensor, no_grad
from .tensor import precision as use_precision
from .training import TrainConfig, train_smoke

console = Console()
logger = logging.getLogger(__name__)

# Token counts of the layer-wise FLOP curves (224 to 896 pixel inputs at patch 8, and beyond)
SCALING_TOKENS = (196, 784, 1568, 3136, 6272, 12544, 25088, 50176)
SCALING_CHANNELS = (216, 348, 432, 624)
CONSTANT_LOSS_BOUND = 1e-12


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def model_options(default_preset: str):
    """Options shared by every command that builds or analyses a model"""

    def decorator(func):
        options = [
            click.option('--preset', '-p', help=f'Preset name (default: {default_preset})'),
            click.option('--config', 'config_path', type=click.Path(dir_okay=False),
                         help='YAML config file (may name a preset: to start from)'),
            click.option('--seed', default=0, show_default=True, help='Seed for initialisation and data'),
            click.option('--precision', type=click.Choice(sorted(PRECISIONS)), default='f32',
                         show_default=True, help='Floating point precision'),
            click.option('--out', 'out_dir', type=click.Path(file_okay=False),
                         help='Output directory (default: runs/<command>)'),
        ]
        for option in reversed(options):
            func = option(func)

        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            kwargs["default_preset"] = default_preset
            return func(*args, **kwargs)

        return wrapper

    return decorator


def resolve_config(preset: Optional[str], config_path: Optional[str], default_preset: str) -> ModelConfig:
    if preset and config_path:
        raise click.UsageError("use either --preset or --config, not both")
    if config_path:
        return load_config(Path(config_path))
    return get_preset(preset or default_preset)


def resolve_out(out_dir: Optional[str], command: str) -> Path:
    return Path(out_dir) if out_dir else Path("runs") / command


def apply_classes(cfg: ModelConfig, classes: Optional[int]) -> ModelConfig:
    if classes is None or classes == cfg.num_classes:
        return cfg
    return ModelConfig(**{**cfg.model_dump(), "num_classes": classes})


def record_failure(manifest: Optional[RunManifest], out_dir: Optional[Path], error: Exception) -> None:
    """Write a failed manifest carrying the error; a second failure is only logged"""
    if manifest is None or out_dir is None:
        return
    manifest.error = str(error)
    try:
        manifest.write(out_dir, succeeded=False)
    except OSError as e:
        logger.warning(f"Could not record failure: {e}")


@contextmanager
def command_errors(manifest: Optional[RunManifest] = None, out_dir: Optional[Path] = None) -> Iterator[None]:
    """Turn package errors into a red diagnostic, a failed manifest and a nonzero exit code"""
    try:
        yield
    except UsageError as e:
        record_failure(manifest, out_dir, e)
        raise click.UsageError(str(e)) from e
    except click.UsageError as e:
        record_failure(manifest, out_dir, e)
        raise
    except (GPViTError, ValidationError, OSError) as e:
        console.print(f"[red]Error: {e}[/red]")
        record_failure(manifest, out_dir, e)
        sys.exit(1)


def start_manifest(command: str, seed: int, precision: str, config_path: Optional[str],
                   out_dir: Path, **options: Any) -> RunManifest:
    return RunManifest(
        command=command,
        config_path=config_path,
        seed=seed,
        precision=precision,
        out_dir=str(out_dir),
        options=options,
    )


def bind_config(manifest: RunManifest, cfg: ModelConfig) -> ModelConfig:
    manifest.model = cfg.name
    manifest.config_digest = config_digest(cfg).hex()
    return cfg


def write_json(path: Path, data: Dict[str, Any]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2) + "\n")
    except OSError as e:
        raise OSError(f"Cannot write {path}: {e.strerror or e}") from e
    return path


def finish(manifest: RunManifest, out_dir: Path, succeeded: bool) -> None:
    manifest.write(out_dir, succeeded)
    console.print(f"[dim]Results in {out_dir}[/dim]")
    if not succeeded:
        sys.exit(1)


def _giga(value: float) -> str:
    return f"{value / 1e9:.3f}G"


def _mega(value: float) -> str:
    return f"{value / 1e6:.3f}M"


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Debug logging')
def cli(verbose):
    """gpvit-desk - GP Block vision transformers at desk scale

    Cost analysis, gradient checks, invariant suites, smoke training and
    group-map export for GPViT models and their ablations.
    """
    setup_logging(verbose)


@cli.command()
@model_options("gpvit-l1")
@click.option('--input', 'input_size', type=click.IntRange(min=1),
              help='Input image side in pixels (default: the config input size)')
def analyze(preset, config_path, seed, precision, out_dir, default_preset, input_size):
    """Parameter and FLOP breakdown plus layer-wise scaling curves

    Examples:
        \b
        # GPViT-L1 at 224x224
        gpvit-desk analyze --preset gpvit-l1 --input 224

        \b
        # A ViT baseline from a config file
        gpvit-desk analyze --config vit.yaml --out runs/vit
    """
    out = resolve_out(out_dir, "analyze")
    manifest = start_manifest("analyze", seed, precision, config_path, out, input_size=input_size)
    with command_errors(manifest, out), use_precision(precision):
        cfg = bind_config(manifest, resolve_config(preset, config_path, default_preset))

        report = emit_report(cfg, input_size)
        for path in report.write(out):
            manifest.add(path, out)

        curves = scaling_table(cfg.channels, SCALING_TOKENS)
        curves_path = out / "scaling_tokens.csv"
        curves.to_csv(curves_path, index=False)
        manifest.add(curves_path, out)

        widths = {"channels": list(SCALING_CHANNELS)}
        for kind in ("self-attn", "window", "lepe", "gp"):
            widths[kind] = scaling_series_channels(kind, SCALING_CHANNELS, cfg.num_tokens)
        widths_path = out / "scaling_channels.csv"
        pd.DataFrame(widths).to_csv(widths_path, index=False)
        manifest.add(widths_path, out)

        console.print(Panel.fit(
            f"[bold blue]{cfg.name}[/bold blue] at {report.input_size}x{report.input_size}\n"
            f"Parameters: {_mega(report.total_params)} ({report.total_params:,})\n"
            f"FLOPs (multiply-accumulates): {_giga(report.total_flops)}",
            border_style="blue",
        ))
        table = Table(title="Per-layer cost", show_header=True, header_style="bold cyan")
        table.add_column("Layer")
        table.add_column("Kind")
        table.add_column("Params", justify="right")
        table.add_column("FLOPs", justify="right")
        for entry in report.entries:
            table.add_row(entry.layer, entry.kind, f"{entry.params:,}", _giga(entry.flops))
        console.print(table)

        finish(manifest, out, succeeded=True)


@cli.command()
@model_options("tiny-gradcheck")
@click.option('--max-params', default=DEFAULT_PARAM_CAP, show_default=True,
              help='Refuse models with more parameters than this')
@click.option('--step', default=DEFAULT_STEP, show_default=True, help='Finite difference step')
@click.option('--tolerance', default=DEFAULT_TOLERANCE, show_default=True,
              help='Maximum accepted relative error')
@click.option('--constant-loss', is_flag=True,
              help='Zero the head and use uniform targets; every gradient must vanish')
@click.option('--only', multiple=True, help='Parameter name prefix to check (repeatable)')
def gradcheck(preset, config_path, seed, precision, out_dir, default_preset,
              max_params, step, tolerance, constant_loss, only):
    """Analytic vs central-difference gradients (always float64)

    Examples:
        \b
        gpvit-desk gradcheck --preset tiny-gradcheck --seed 3
    """
    out = resolve_out(out_dir, "gradcheck")
    manifest = start_manifest(
        "gradcheck", seed, "f64", config_path, out,
        max_params=max_params, step=step, tolerance=tolerance,
        constant_loss=constant_loss, only=list(only),
    )
    with command_errors(manifest, out), use_precision(precision):
        cfg = bind_config(manifest, resolve_config(preset, config_path, default_preset))

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
            transient=True,
        ) as progress:
            task = progress.add_task("Checking gradients...", total=None)
            report = run_gradcheck(
                cfg, seed, step=step, tolerance=tolerance, max_params=max_params,
                constant_loss=constant_loss, only=list(only) or None,
                on_block=lambda b: progress.update(task, description=f"Checked {b.name}"),
            )

        passed = report.passed
        if constant_loss:
            passed = report.max_abs_gradient < CONSTANT_LOSS_BOUND
        result = report.to_dict()
        result["passed"] = passed
        manifest.add(write_json(out / "gradcheck.json", result), out)

        table = Table(title=f"Gradient check: {cfg.name}", show_header=True, header_style="bold cyan")
        table.add_column("Parameter", overflow="fold")
        table.add_column("Size", justify="right")
        table.add_column("max |analytic|", justify="right")
        table.add_column("Rel error", justify="right")
        for block in report.blocks:
            style = "" if block.rel_error < tolerance else "red"
            table.add_row(block.name, str(block.size), f"{block.max_analytic:.3e}",
                          f"{block.rel_error:.3e}", style=style)
        console.print(table)
        colour = "green" if passed else "red"
        console.print(
            f"[{colour}]max rel error {report.max_rel_error:.3e}, "
            f"max |gradient| {report.max_abs_gradient:.3e}: {'PASS' if passed else 'FAIL'}[/{colour}]"
        )
        finish(manifest, out, passed)


@cli.command('train-smoke')
@model_options("tiny-train")
@click.option('--epochs', default=200, show_default=True, type=click.IntRange(min=1))
@click.option('--lr', default=2e-3, show_default=True, type=click.FloatRange(min=0.0))
@click.option('--batch-size', default=16, show_default=True, type=click.IntRange(min=1))
@click.option('--schedule', type=click.Choice(['constant', 'cosine']), default='constant', show_default=True)
@click.option('--clip-norm', type=float, help='Clip gradients to this global L2 norm')
@click.option('--classes', type=click.IntRange(min=1), help='Synthetic classes (default: the config num_classes)')
@click.option('--samples-per-class', default=8, show_default=True, type=click.IntRange(min=1))
@click.option('--stop-at', type=click.FloatRange(0.0, 1.0), help='Stop once train accuracy reaches this')
@click.option('--min-accuracy', type=click.FloatRange(0.0, 1.0),
              help='Fail unless the best train accuracy reaches this')
def train_smoke_command(preset, config_path, seed, precision, out_dir, default_preset,
                        epochs, lr, batch_size, schedule, clip_norm, classes,
                        samples_per_class, stop_at, min_accuracy):
    """Overfit a small model on synthetic shapes

    Writes per-epoch metrics (CSV), a checkpoint and a summary.

    Examples:
        \b
        gpvit-desk train-smoke --preset tiny-train --epochs 200 --stop-at 0.95
    """
    out = resolve_out(out_dir, "train-smoke")
    manifest = start_manifest("train-smoke", seed, precision, config_path, out, classes=classes)
    with command_errors(manifest, out), use_precision(precision):
        cfg = apply_classes(resolve_config(preset, config_path, default_preset), classes)
        bind_config(manifest, cfg)
        train_cfg = TrainConfig(
            epochs=epochs, lr=lr, batch_size=batch_size, schedule=schedule,
            clip_norm=clip_norm, stop_at=stop_at, seed=seed,
        )
        dataset = SyntheticDataset(
            num_classes=cfg.num_classes, samples_per_class=samples_per_class, image_size=cfg.input_size
        )
        manifest.options.update(train=train_cfg.model_dump(), dataset=dataset.model_dump())

        images, labels = dataset.generate(seed)
        model = build_model(cfg, seed)

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TaskProgressColumn(),
            console=console,
            transient=True,
        ) as progress:
            task = progress.add_task("Training...", total=epochs)

            def on_epoch(m):
                progress.update(task, advance=1,
                                description=f"epoch {m.epoch} loss {m.loss:.3f} acc {m.accuracy:.2f}")

            try:
                result = train_smoke(model, images, labels.astype(np.int64), train_cfg, on_epoch)
            except DivergenceError as e:
                last = "none" if e.last_good_epoch is None else str(e.last_good_epoch)
                console.print(f"[red]Error: training diverged: {e} (last good epoch: {last})[/red]")
                manifest.options["last_good_epoch"] = e.last_good_epoch
                manifest.error = f"training diverged: {e}"
                finish(manifest, out, succeeded=False)
                return

        manifest.add(result.write_csv(out / "metrics.csv"), out)
        manifest.add(save_checkpoint(model, out / "checkpoint.gpvt"), out)

        passed = min_accuracy is None or result.best_accuracy >= min_accuracy
        summary = {
            "model": cfg.name,
            "epochs_run": len(result.metrics),
            "final_loss": result.metrics[-1].loss,
            "final_accuracy": result.final_accuracy,
            "best_accuracy": result.best_accuracy,
            "min_accuracy": min_accuracy,
            "passed": passed,
        }
        manifest.add(write_json(out / "train.json", summary), out)

        colour = "green" if passed else "red"
        console.print(Panel.fit(
            f"[bold blue]{cfg.name}[/bold blue] on {dataset.size} synthetic images, "
            f"{dataset.num_classes} classes\n"
            f"Epochs run: {len(result.metrics)}\n"
            f"Final loss: {result.metrics[-1].loss:.4f}\n"
            f"[{colour}]Final accuracy: {result.final_accuracy:.3f} "
            f"(best {result.best_accuracy:.3f})[/{colour}]",
            border_style="blue",
        ))
        finish(manifest, out, passed)


def _default_image(cfg: ModelConfig, seed: int) -> np.ndarray:
    dataset = SyntheticDataset(num_classes=1, samples_per_class=1, image_size=cfg.input_size)
    images, _ = dataset.generate(seed)
    return images[0]


@cli.command('export-groups')
@model_options("tiny-forward")
@click.option('--checkpoint', 'checkpoint_path', type=click.Path(dir_okay=False),
              help='Checkpoint written by train-smoke (default: seeded initialisation)')
@click.option('--image', 'image_path', type=click.Path(dir_okay=False),
              help='Binary PGM/PPM input (default: a synthetic image)')
@click.option('--constant', type=click.FloatRange(0.0, 1.0),
              help='Use a constant image of this intensity instead')
@click.option('--classes', type=click.IntRange(min=1),
              help='Classes of the checkpointed model (as passed to train-smoke --classes)')
def export_groups(preset, config_path, seed, precision, out_dir, default_preset,
                  checkpoint_path, image_path, constant, classes):
    """Write argmax group maps (PGM, PPM) and grouping weights (CSV) per GP block

    Examples:
        \b
        gpvit-desk train-smoke --preset tiny-train --out runs/t
        gpvit-desk export-groups --preset tiny-train --checkpoint runs/t/checkpoint.gpvt

        \b
        # a checkpoint trained with --classes needs the same value here
        gpvit-desk export-groups --preset tiny-train --classes 3 --checkpoint runs/t/checkpoint.gpvt
    """
    out = resolve_out(out_dir, "export-groups")
    manifest = start_manifest(
        "export-groups", seed, precision, config_path, out,
        checkpoint=checkpoint_path, image=image_path, constant=constant, classes=classes,
    )
    with command_errors(manifest, out), use_precision(precision):
        if image_path and constant is not None:
            raise click.UsageError("use either --image or --constant, not both")
        cfg = apply_classes(resolve_config(preset, config_path, default_preset), classes)
        bind_config(manifest, cfg)

        model = build_model(cfg, seed)
        if checkpoint_path:
            load_checkpoint(model, Path(checkpoint_path))
        if image_path:
            image = image_to_input(read_pnm(Path(image_path)))
        elif constant is not None:
            image = np.full((cfg.input_size, cfg.input_size, 3), constant)
        else:
            image = _default_image(cfg, seed)

        with no_grad():
            # validates the image size and yields the predicted class
            logits = forward_classify(model, image)
            _, assignments = model.forward_features(
                Tensor(image[None]), collect_assignments=True
            )

        if not assignments:
            console.print(f"[yellow]{cfg.name} has no GP blocks; nothing to export[/yellow]")

        table = Table(title=f"Group maps: {cfg.name}", show_header=True, header_style="bold cyan")
        table.add_column("Layer", justify="right")
        table.add_column("Groups", justify="right")
        table.add_column("Grid")
        table.add_column("Groups used", justify="right")
        blocks: List[Dict[str, Any]] = []
        for layer, assignment in assignments:
            for path in write_group_maps(out, layer, assignment):
                manifest.add(path, out)
            used = int(np.unique(assignment.argmax_map()[0]).size)
            grid = f"{assignment.grid[0]}x{assignment.grid[1]}"
            blocks.append({"layer": layer, "num_groups": assignment.num_groups, "grid": grid, "groups_used": used})
            table.add_row(str(layer), str(assignment.num_groups), grid, str(used))
        console.print(table)

        summary = {"model": cfg.name, "predicted_class": int(np.argmax(logits.data)), "blocks": blocks}
        manifest.add(write_json(out / "groups.json", summary), out)
        finish(manifest, out, succeeded=True)


@cli.command()
@model_options("tiny-invariants")
@click.option('--only', help=f'Comma-separated suites to run ({", ".join(SUITES)})')
@click.option('--inject-fault', type=click.Choice(FAULTS), help='Inject a known fault into the harness')
def invariants(preset, config_path, seed, precision, out_dir, default_preset, only, inject_fault):
    """Run the invariant suites and report pass/fail

    Examples:
        \b
        gpvit-desk invariants
        gpvit-desk invariants --only grouping,support --inject-fault softmax-axis
    """
    out = resolve_out(out_dir, "invariants")
    selection = None if only is None else [s.strip() for s in only.split(",") if s.strip()]
    manifest = start_manifest(
        "invariants", seed, precision, config_path, out, only=selection, inject_fault=inject_fault
    )
    with command_errors(manifest, out), use_precision(precision):
        cfg = bind_config(manifest, resolve_config(preset, config_path, default_preset))

        report = run_invariants(cfg, only=selection, inject_fault=inject_fault, seed=seed)
        manifest.add(write_json(out / "invariants.json", report.to_dict()), out)

        table = Table(title=f"Invariants: {cfg.name}", show_header=True, header_style="bold cyan")
        table.add_column("Suite")
        table.add_column("Check")
        table.add_column("Value", justify="right")
        table.add_column("Threshold", justify="right")
        table.add_column("Result")
        for r in report.results:
            verdict = "[green]pass[/green]" if r.passed else "[red]FAIL[/red]"
            table.add_row(r.suite, r.check, f"{r.value:.3e}", f"{r.threshold:.1e}", verdict)
        console.print(table)

        failed = len(report.failures)
        colour = "green" if report.passed else "red"
        console.print(f"[{colour}]{len(report.results) - failed}/{len(report.results)} checks passed[/{colour}]")
        finish(manifest, out, report.passed)


@cli.command()
@click.option('--format', 'output_format', type=click.Choice(['table', 'json']), default='table',
              help='Output format')
def presets(output_format):
    """List shipped presets with their parameter count and FLOPs"""
    with command_errors():
        rows = []
        for name in list_presets():
            cfg = get_preset(name)
            rows.append({
                "name": name,
                "family": cfg.family,
                "channels": cfg.channels,
                "depth": cfg.depth,
                "input_size": cfg.input_size,
                "params": count_params(cfg),
                "flops": count_flops(cfg),
            })

        if output_format == 'json':
            console.print_json(json.dumps(rows))
            return

        table = Table(title="Presets", show_header=True, header_style="bold cyan")
        table.add_column("Name")
        table.add_column("Family")
        table.add_column("C", justify="right")
        table.add_column("Depth", justify="right")
        table.add_column("Input", justify="right")
        table.add_column("Params", justify="right")
        table.add_column("FLOPs", justify="right")
        for row in rows:
            table.add_row(row["name"], row["family"], str(row["channels"]), str(row["depth"]),
                          str(row["input_size"]), _mega(row["params"]), _giga(row["flops"]))
        console.print(table)


if __name__ == '__main__':
    cli()
