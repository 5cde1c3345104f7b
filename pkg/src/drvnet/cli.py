"""
Command-line entry point.

Exit codes: 0 on success, 2 for user errors (bad flags, config keys, missing
dataset files, incompatible checkpoints), 1 when an internal invariant breaks;
in that case a diagnostics JSON is printed to stderr.
"""
import functools
import json
import logging
import sys

import click

from . import experiment as E
from .evaluation import format_table
from .exceptions import ConfigError, DRVNetError, InvariantViolation

log = logging.getLogger("drvnet")


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InvariantViolation as exc:
            click.echo(f"internal error: {exc}", err=True)
            click.echo(json.dumps({"error": str(exc), "diagnostics": exc.diagnostics}, indent=2, default=str),
                       err=True)
            sys.exit(1)
        except (DRVNetError, FileNotFoundError) as exc:
            raise click.UsageError(str(exc)) from exc

    return wrapper


def training_options(fn):
    options = [
        click.option("--config", "config_file", type=click.Path(dir_okay=False),
                     help="YAML/JSON config (or a previous manifest.json)."),
        click.option("--dataset", type=click.Choice(["drive", "chasedb", "stare"], case_sensitive=False)),
        click.option("--data-root", type=click.Path(file_okay=False)),
        click.option("--out", type=click.Path(file_okay=False)),
        click.option("--variant", type=click.Choice([v.value for v in E.Variant], case_sensitive=False)),
        click.option("--seeds", help="Run count (e.g. 5 -> seeds 0..4) or a comma list (e.g. 3,7)."),
        click.option("--epochs", type=int, help="Epoch cap for both phases (desk-scale runs)."),
        click.option("--epochs-backbone", type=int),
        click.option("--epochs-tail", type=int),
        click.option("--base-channels", type=int),
        click.option("--patch", type=int, help="Train on random square crops of this size."),
        click.option("--pad-size", type=int, help="Override the per-dataset padded size."),
        click.option("--batch-size", type=int),
        click.option("--lr", type=float),
        click.option("--threshold", type=float),
        click.option("--augment/--no-augment", default=None),
        click.option("--deterministic/--no-deterministic", default=None),
        click.option("--jobs", type=int, help="Train runs in parallel processes."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def build_config(config_file, seeds, epochs, **flags):
    file_values = E.RunConfig.from_file(config_file) if config_file else {}
    if epochs is not None:
        flags["epochs_backbone"] = flags.get("epochs_backbone") or epochs
        flags["epochs_tail"] = flags.get("epochs_tail") or epochs
    return E.merge_config(file_values, seeds=E.parse_seeds(seeds), **flags)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress.")
def cli(verbose):
    """Dense residual UNet retinal vessel segmentation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@cli.command()
@training_options
@handle_errors
def train(config_file, seeds, epochs, **flags):
    """Run the two-phase training protocol for every seed (and fold)."""
    cfg = build_config(config_file, seeds, epochs, **flags)
    manifest = E.run_training(cfg)
    click.echo(f"trained {len(manifest['runs'])} run(s); manifest at {cfg.out}/manifest.json")
    for run in manifest["runs"]:
        click.echo(f"  {run['dir']}: {run['eval_checkpoint']}")


@cli.command("eval")
@click.option("--run-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--threshold", type=float)
@click.option("--checkpoint", "which", type=click.Choice(["best", "final"]))
@click.option("--data-root", type=click.Path(file_okay=False))
@click.option("--no-masks", is_flag=True, help="Skip writing per-image PNG outputs.")
@handle_errors
def evaluate(run_dir, threshold, which, data_root, no_masks):
    """Evaluate trained runs on their test splits and write tables and figures."""
    overall, _ = E.run_evaluation(run_dir, threshold, which, data_root, write_masks=not no_masks)
    click.echo(format_table([overall]))
    click.echo(f"reports written to {run_dir}/eval")


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--image", "image_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", default=".", type=click.Path(file_okay=False))
@click.option("--dataset", type=click.Choice(["drive", "chasedb", "stare"], case_sensitive=False))
@click.option("--pad-size", type=int)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@handle_errors
def predict(checkpoint, image_path, out, dataset, pad_size, threshold):
    """Segment a single fundus image."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    paths, seconds, _ = E.predict_image(checkpoint, image_path, out, pad_size, dataset, threshold)
    for kind, path in paths.items():
        click.echo(f"{kind}: {path}")
    click.echo(f"inference time: {seconds:.3f} s")


@cli.command()
@training_options
@handle_errors
def ablate(config_file, seeds, epochs, **flags):
    """Train and compare the BC, D, BC&D and full-network configurations."""
    cfg = build_config(config_file, seeds, epochs, **flags)
    rows, reports = E.run_ablation(cfg)
    click.echo(format_table(reports))
    click.echo(f"ablation table at {cfg.out}/ablation.csv")


@cli.command()
@click.option("--dataset", required=True, type=click.Choice(["drive", "chasedb", "stare"], case_sensitive=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n-images", type=int, help="Defaults to the real dataset's image count.")
@click.option("--size", nargs=2, type=int, default=(48, 56), show_default=True, help="Height and width.")
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def synth(dataset, out, n_images, size, seed):
    """Write a small synthetic dataset in the given dataset's layout."""
    from .synthetic import write_synthetic_dataset

    root = write_synthetic_dataset(out, dataset, n_images, tuple(size), seed)
    click.echo(f"synthetic {dataset} dataset written to {root}")


def main():
    cli()


if __name__ == "__main__":
    main()
