"""Command line entry point: ``dartslab search|oracle|theorems|experiment|diag``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import config as C
from . import data
from . import diagnostics as D
from . import experiments as X
from . import oracle
from . import search as T
from . import space as S


def _common(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="key = value config file"),
        click.option("--seed", type=int, default=None),
        click.option("--regime", type=click.Choice(T.REGIMES), default=None),
        click.option("--activation", type=click.Choice(S.ACTIVATIONS), default=None),
        click.option("--lr", type=float, default=None, help="weight learning rate"),
        click.option("--optimizer", type=click.Choice(["adam", "sgd"]), default=None,
                     help="architecture-parameter optimizer"),
        click.option("--epochs", type=int, default=None),
        click.option("--space", type=click.Choice(sorted(S.SPACES)), default=None),
        click.option("--out", type=click.Path(file_okay=False), default="runs", show_default=True),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _overrides(seed, regime, activation, lr, optimizer, epochs, space) -> dict:
    return {
        "seed": seed, "regime": regime, "activation": activation, "w_lr": lr,
        "alpha_optimizer": optimizer, "epochs": epochs, "space": space,
    }


def _resolve(config_path, **kw) -> C.RunConfig:
    try:
        return C.parse_config(config_path, _overrides(**kw))
    except C.ConfigParseError as exc:
        raise click.UsageError(str(exc)) from None


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Differentiable architecture search dynamics lab."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command()
@_common
def search(config_path, out, **kw):
    """Run one search and write trace.csv / summary.json."""
    rc = _resolve(config_path, **kw)
    out = Path(out)
    rc.echo(out)
    task = data.generate(rc.task)
    try:
        res = T.run_search(rc.search, task)
    except T.SearchAborted as exc:
        D.emit_traces(exc.result, out, extra={"aborted": str(exc)})
        click.echo(str(exc), err=True)
        sys.exit(2)
    D.emit_traces(res, out, extra={"task_fingerprint": rc.task.fingerprint()})
    click.echo(res.architecture.to_string(res.spec))


@main.command("oracle")
@_common
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--allow-large", is_flag=True, help="lift the 1000-architecture guard")
def oracle_cmd(config_path, out, workers, allow_large, **kw):
    """Train every architecture of the space and write the ranked table."""
    rc = _resolve(config_path, **kw)
    out = Path(out)
    rc.echo(out)
    task = data.cached(rc.task, out / "cache")
    try:
        table = oracle.evaluate_all(rc.search.cell_spec, task, workers=workers, allow_large=allow_large,
                                    cache_dir=out / "cache")
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    (out / "oracle.json").write_text(json.dumps(table.to_json(), indent=1, sort_keys=True) + "\n")
    means = table.mean_accuracy()
    for a, v in sorted(means.items(), key=lambda kv: -kv[1]):
        click.echo(f"{v:.4f}  {a.to_string(table.spec)}")


@main.command()
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(file_okay=False), default="runs", show_default=True)
def theorems(seed, out):
    """Numerical checks of the softmax-dynamics results."""
    summary = X.run_experiment(X.make_recipe("theorem_suite", out, seeds=[seed]))
    for c in summary.checks:
        click.echo(c.line())
    sys.exit(summary.exit_code)


@main.command()
@click.argument("name", type=click.Choice(X.NAMES))
@_common
@click.option("--seeds", type=int, default=5, show_default=True, help="number of seeds, starting at --seed")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--cache", "cache_dir", type=click.Path(file_okay=False), default=None)
def experiment(name, config_path, out, seeds, workers, cache_dir, **kw):
    """Run a named recipe; exit code 1 if any of its checks fails."""
    first = kw.pop("seed") or 0
    rc = _resolve(config_path, seed=None, **kw)
    base = {k: v for k, v in rc.flat.items() if v != C.default_flat()[k]}
    recipe = X.make_recipe(name, Path(out) / name, seeds=range(first, first + seeds), base=base)
    summary = X.run_experiment(recipe, cache_dir=cache_dir, workers=workers)
    if summary.rows:
        click.echo(X.markdown_table(summary.rows))
    for line in summary.invalid:
        click.echo(f"INVALID  {line}", err=True)
    for c in summary.checks:
        click.echo(c.line())
    sys.exit(summary.exit_code)


@main.group()
def diag():
    """Diagnostics on a fresh or briefly trained supernet."""


@diag.command("corr")
@_common
@click.option("--pairs", type=int, default=200, show_default=True)
@click.option("--warmup", type=int, multiple=True, default=(0, 10, 50), show_default=True,
              help="single-level warm-up epochs per snapshot (repeatable)")
def diag_corr(config_path, out, pairs, warmup, **kw):
    """Same-batch vs cross-batch gradient correlation per cell."""
    if kw.get("space") is None:
        kw["space"] = "nas201-desk"
    rc = _resolve(config_path, **kw)
    task = data.generate(rc.task)
    rep = X.correlation_study(task, rc.search.space, pairs=pairs, warmup_epochs=tuple(warmup), seed=rc.search.seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "correlation.json").write_text(json.dumps(rep, indent=1) + "\n")
    for snap in rep["snapshots"]:
        for name, c in rep["cells"].items():
            click.echo(f"epoch {snap['warmup_epochs']:>3} cell {c} ({name}): same {snap['same_batch_mean'][c]:.4e}  "
                       f"|cross| {snap['cross_batch_abs_mean'][c]:.4e}  ratio {snap['ratio'][c]:.4f}")


if __name__ == "__main__":
    main()
