"""Command-line entry point: ``mimicseg <command> ...``.

Every command writes into one run directory (``--run-dir``, default
``$MIMIC_RUN_ROOT/<command>``, with ``MIMIC_RUN_ROOT`` defaulting to ``runs``)
alongside a ``command.json`` snapshot of its arguments.  Exit status is 0 on
success and nonzero on any error.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import click
import yaml

from . import data_io, experiments, training
from .errors import MimicError

log = logging.getLogger("mimicseg")

RUN_ROOT_ENV = "MIMIC_RUN_ROOT"


def _run_dir(run_dir, command):
    path = Path(run_dir) if run_dir else Path(os.environ.get(RUN_ROOT_ENV, "runs")) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot(run_dir, command, params):
    clean = {k: (str(v) if isinstance(v, Path) else v) for k, v in params.items()}
    (run_dir / "command.json").write_text(
        json.dumps({"command": command, "params": clean}, indent=1, sort_keys=True, default=str))


def _parse_overrides(pairs):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.BadParameter(f"expected key=value, got {pair!r}", param_hint="--set")
        key, value = pair.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _train_config(config_path, overrides, preset=None):
    extra = _parse_overrides(overrides)
    if preset:
        extra.update(training.ABLATION_MODES[preset])
    if config_path:
        return training.TrainConfig.from_file(config_path, extra)
    return training.TrainConfig.from_mapping(extra)


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="Flat key: value file with TrainConfig keys.")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                          help="Override one TrainConfig key; repeatable.")
run_dir_option = click.option("--run-dir", type=click.Path(file_okay=False), default=None,
                              help="Output directory (default: $MIMIC_RUN_ROOT/<command>).")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Multi-view contrastive segmentation with MI-guided view selection."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--n-subjects", default=20, show_default=True)
@click.option("--slices", "slices_per_subject", default=16, show_default=True)
@click.option("--lesions", "lesion_count", default="1,2", show_default=True, help="min,max lesions per slice")
@click.option("--radius", "lesion_radius", default="4,12", show_default=True, help="min,max ellipse semi-axis")
@click.option("--noise", "texture_noise_level", default=0.08, show_default=True)
@click.option("--contrast", "lesion_contrast", default=250.0, show_default=True)
@click.option("--image-size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
def synth(out_dir, n_subjects, slices_per_subject, lesion_count, lesion_radius, texture_noise_level,
          lesion_contrast, image_size, seed):
    """Write a synthetic lesion dataset (NIfTI volumes + masks)."""
    spec = data_io.SyntheticSpec(
        n_subjects=n_subjects, slices_per_subject=slices_per_subject,
        lesion_count_range=_ints(lesion_count), lesion_radius_range=_floats(lesion_radius),
        texture_noise_level=texture_noise_level, lesion_contrast=lesion_contrast,
        image_size=image_size, seed=seed)
    path = data_io.make_synthetic(spec, out_dir)
    click.echo(str(path))


@cli.command()
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--patch-size", default=8, show_default=True)
@click.option("--order", type=click.Choice(["zigzag", "row_major"]), default="zigzag", show_default=True)
@click.option("--drop-empty/--keep-empty", default=True, show_default=True,
              help="Drop lesion-free slices from the training split.")
@click.option("--image-size", default=256, show_default=True)
@click.option("--fn-mode", type=click.Choice(["per_cube", "global"]), default="per_cube", show_default=True)
@click.option("--split-seed", default=0, show_default=True)
@click.option("--overwrite", is_flag=True, help="Rebuild even if a cache exists.")
def preprocess(in_dir, out_dir, patch_size, order, drop_empty, image_size, fn_mode, split_seed, overwrite):
    """Normalize, slice and DCT-transform volumes into a cache."""
    cfg = data_io.CacheConfig(patch_size=patch_size, channel_order=order, fn_mode=fn_mode,
                              drop_empty=drop_empty, image_size=image_size, split_seed=split_seed)
    path = data_io.build_cache(in_dir, out_dir, cfg, overwrite=overwrite)
    counts = data_io.read_cache_meta(path)["record_counts"]
    click.echo(f"{path} " + " ".join(f"{k}={v}" for k, v in sorted(counts.items())))


@cli.command()
@click.option("--cache", "cache_dir", required=True, type=click.Path(exists=True, file_okay=False))
@config_option
@set_option
@click.option("--preset", type=click.Choice(list(training.ABLATION_MODES)), default=None,
              help="Loss configuration preset.")
@run_dir_option
def train(cache_dir, config_path, overrides, preset, run_dir):
    """Train on a cache; writes history.csv, view_hist.csv, best.pt, last.pt."""
    cfg = _train_config(config_path, overrides, preset)
    run = _run_dir(run_dir, "train")
    _snapshot(run, "train", {"cache": cache_dir, "config": dataclasses.asdict(cfg)})
    result = training.train(cfg, cache_dir, run)
    stop = f" (early stop at epoch {result.stopped_epoch})" if result.stopped_epoch is not None else ""
    click.echo(f"{result.best_checkpoint} best val DSC {result.best_val_dsc:.4f}{stop}")


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--cache", "cache_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", type=click.Choice(list(data_io.SPLITS)), default="test", show_default=True)
@click.option("--method", default="U-Net+MIMIC", show_default=True, help="Row label in the summary.")
@run_dir_option
def evaluate(checkpoint, cache_dir, split, method, run_dir):
    """Score a checkpoint: per-slice CSV plus a DSC/mIoU/HD95/ASD summary row."""
    run = _run_dir(run_dir, "evaluate")
    _snapshot(run, "evaluate", {"checkpoint": checkpoint, "cache": cache_dir, "split": split})
    model, cfg, _ = training.load_checkpoint(checkpoint)
    report = training.evaluate_split(model, cache_dir, split, cfg)
    summary = experiments.evaluation_outputs(report, run, method)
    (run / "conventions.json").write_text(json.dumps(report.conventions, indent=1, sort_keys=True))
    click.echo("  ".join(f"{k} {v}" for k, v in summary.items()))


@cli.command("mi-probe")
@click.option("--steps", default=3000, show_default=True, help="Critic training steps per case.")
@click.option("--seed", default=0, show_default=True)
@click.option("--tolerance", default=0.1, show_default=True, help="Allowed |estimate - closed form| in nats.")
@run_dir_option
def mi_probe(steps, seed, tolerance, run_dir):
    """Check MINE against Gaussian and discrete closed forms; writes mi_probe.csv."""
    run = _run_dir(run_dir, "mi-probe")
    _snapshot(run, "mi-probe", {"steps": steps, "seed": seed, "tolerance": tolerance})
    rows = experiments.mi_probe(steps=steps, seed=seed, tolerance=tolerance)
    experiments.write_csv(run / "mi_probe.csv", rows)
    for r in rows:
        click.echo(f"{'PASS' if r['passed'] else 'FAIL'} {r['case']}: "
                   f"estimate {r['estimate']:.4f} vs {r['closed_form']:.4f}")
    if not all(r["passed"] for r in rows):
        sys.exit(1)


@cli.command()
@click.option("--cache-root", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory holding one cache per patch size as p<size>/.")
@click.option("--patch-sizes", default="8", show_default=True)
@click.option("--sigmas", default="0.1,0.2,0.3,0.4,0.5", show_default=True)
@config_option
@set_option
@run_dir_option
def sweep(cache_root, patch_sizes, sigmas, config_path, overrides, run_dir):
    """Grid over patch size and sigma; writes sweep.csv and one plot per metric."""
    cfg = _train_config(config_path, overrides)
    run = _run_dir(run_dir, "sweep")
    _snapshot(run, "sweep", {"cache_root": cache_root, "patch_sizes": patch_sizes, "sigmas": sigmas,
                             "config": dataclasses.asdict(cfg)})
    rows = experiments.sweep(cfg, cache_root, run, _ints(patch_sizes), _floats(sigmas))
    click.echo(f"{run / 'sweep.csv'} ({len(rows)} rows)")


@cli.command()
@click.option("--cache", "cache_dir", required=True, type=click.Path(exists=True, file_okay=False))
@config_option
@set_option
@run_dir_option
def ablate(cache_dir, config_path, overrides, run_dir):
    """Train and test U-Net, +MI, +CL and +MIMIC; writes ablation.csv."""
    cfg = _train_config(config_path, overrides)
    run = _run_dir(run_dir, "ablate")
    _snapshot(run, "ablate", {"cache": cache_dir, "config": dataclasses.asdict(cfg)})
    rows = experiments.ablate(cfg, cache_dir, run)
    for r in rows:
        click.echo(f"{r['Methods']:<12} DSC {100 * r['dsc']:.2f}  mIoU {100 * r['miou']:.2f}  "
                   f"HD95 {r['hd95']:.2f}  ASD {r['asd']:.2f}")


@cli.command()
@click.option("--sweep-csv", required=True, type=click.Path(exists=True, dir_okay=False))
@run_dir_option
def plot(sweep_csv, run_dir):
    """Re-render the per-metric sweep plots from a sweep.csv."""
    run = _run_dir(run_dir, "plot")
    for path in experiments.plot_sweep(sweep_csv, run):
        click.echo(str(path))


def main(argv=None):
    """Console-script entry; package errors become exit status 2 with a one-line message."""
    try:
        cli.main(args=argv, prog_name="mimicseg", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except MimicError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
