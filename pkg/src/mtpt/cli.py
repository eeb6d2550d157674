"""Command-line interface: gen, pretrain, run, sweep, report.

Log level comes from the MTPT_LOG environment variable (DEBUG/INFO/...).
"""

from __future__ import annotations

import logging
import os
from pathlib import Path

import click

from . import __version__
from .checkpoint import save_model
from .datasets import BUILTIN_DOMAINS, gen_split, save_split
from .harness import SWEEP_KINDS, load_config, run_experiment, summarize, sweep
from .model import ModelConfig, PretrainConfig, pretrain_source

log = logging.getLogger("mtpt")


def _setup_logging() -> None:
    level = os.environ.get("MTPT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Meta test-time prompt tuning laboratory."""
    _setup_logging()


@main.command()
@click.option("--domain", "domains", multiple=True, help="Built-in domain name; repeatable. Default: all five.")
@click.option("--n-per-class", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default="data", show_default=True)
def gen(domains, n_per_class, seed, out) -> None:
    """Generate labeled splits for the built-in domains."""
    names = list(domains) if domains else list(BUILTIN_DOMAINS)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in names:
        if name not in BUILTIN_DOMAINS:
            raise click.ClickException(
                f"unknown domain {name!r}; choose from {sorted(BUILTIN_DOMAINS)}"
            )
        split = gen_split(BUILTIN_DOMAINS[name], n_per_class=n_per_class, seed=seed)
        path = save_split(out_dir / f"{name}.bin", split)
        log.info("wrote %s (%d samples)", path, len(split.labels))
        click.echo(f"{path}  samples={len(split.labels)}")


@main.command()
@click.option("--data", type=click.Path(exists=True), default=None, help="Source split file; generated on the fly when omitted.")
@click.option("--n-per-class", type=int, default=200, show_default=True, help="Only used when --data is omitted.")
@click.option("--epochs", type=int, default=40, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--checkpoint", type=click.Path(), default="runs/model.mtpt", show_default=True)
def pretrain(data, n_per_class, epochs, seed, checkpoint) -> None:
    """Train the dual-encoder on the source domain and write a checkpoint."""
    from .datasets import load_split

    if data is not None:
        split = load_split(data)
    else:
        split = gen_split(BUILTIN_DOMAINS["source"], n_per_class=n_per_class, seed=seed)
    cfg = ModelConfig()
    train_cfg = PretrainConfig(epochs=epochs)
    frozen, prompts, meta = pretrain_source(split.images, split.labels, cfg, train_cfg, seed=seed)
    path = Path(checkpoint)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(path, frozen, prompts, meta)
    click.echo(
        f"{path}  holdout_accuracy={meta['holdout_accuracy']:.4f} "
        f"final_loss={meta['final_loss']:.4f}"
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(), default=None, help="Override the config's checkpoint.")
@click.option("--dataset", "datasets", multiple=True, help="Override the config's dataset list.")
@click.option("--method", default=None)
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def run(config_path, checkpoint, datasets, method, seed, workers, out) -> None:
    """Run one adaptation experiment; write results.jsonl + manifest.json."""
    cfg = load_config(
        config_path,
        {
            "checkpoint": checkpoint,
            "datasets": list(datasets),
            "method": method,
            "seed": seed,
            "workers": workers,
            "out": out,
        },
    )
    results = run_experiment(cfg)
    click.echo(str(results))


@main.command("sweep")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--kind", type=click.Choice(SWEEP_KINDS), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def sweep_cmd(config_path, kind, seed, workers, out) -> None:
    """Grid sweep (lambda / rho / views / loss components); long-form CSV."""
    cfg = load_config(config_path, {"seed": seed, "workers": workers, "out": out})
    csv_path = sweep(cfg, kind)
    click.echo(str(csv_path))


@main.command()
@click.argument("results", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="Also write the summary CSV here.")
def report(results, out) -> None:
    """Aggregate results.jsonl files into the method x domain accuracy table."""
    text, _csv = summarize(list(results), csv_path=out)
    click.echo(text, nl=False)


if __name__ == "__main__":
    main()
