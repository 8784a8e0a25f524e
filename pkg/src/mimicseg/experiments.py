"""Batch experiments behind the CLI: MI probe, ablation, hyperparameter sweep, plots."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from pathlib import Path

import numpy as np
import torch

from . import training
from .eval_metrics import MetricReport
from .info_metrics import (Critic, MiEstimatorState, discrete_mi_oracle, evaluate_mine, fit_mine,
                           gaussian_mi)

log = logging.getLogger(__name__)

METRICS = ("dsc", "miou", "hd95", "asd")
PROBE_TABLE = ((0.4, 0.1), (0.1, 0.4))


def write_csv(path, rows, fields=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# MI probe


def gaussian_sampler(rho, generator):
    def sample(n):
        x = torch.randn(n, 1, generator=generator)
        e = torch.randn(n, 1, generator=generator)
        return x, rho * x + math.sqrt(1.0 - rho * rho) * e
    return sample


def table_sampler(table, generator):
    table = np.asarray(table, dtype=np.float64)
    probs = torch.tensor(table.ravel())
    cols = table.shape[1]

    def sample(n):
        idx = torch.multinomial(probs, n, replacement=True, generator=generator)
        return (idx // cols).float()[:, None], (idx % cols).float()[:, None]
    return sample


def probe_case(sample, steps, seed, batch_size=512, eval_size=100_000):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    state = MiEstimatorState(Critic(1, 1))
    fit_mine(state, lambda: sample(batch_size), steps, gen)
    u, v = sample(eval_size)
    return evaluate_mine(state, u, v, gen)


def mi_probe(steps=3000, seed=0, tolerance=0.1, rhos=(0.0, 0.5, 0.9)):
    """Train MINE on Gaussian pairs and on a discrete table; compare with closed forms."""
    rows = []
    for k, rho in enumerate(rhos):
        gen = torch.Generator().manual_seed(seed + k)
        est = probe_case(gaussian_sampler(rho, gen), steps, seed + k)
        rows.append(_probe_row(f"gaussian_rho={rho}", gaussian_mi(rho), est, tolerance))
    gen = torch.Generator().manual_seed(seed + 100)
    est = probe_case(table_sampler(PROBE_TABLE, gen), steps, seed + 100)
    rows.append(_probe_row("discrete_table", discrete_mi_oracle(PROBE_TABLE), est, tolerance))
    return rows


def _probe_row(case, target, estimate, tolerance):
    err = abs(estimate - target)
    return {"case": case, "closed_form": float(target), "estimate": float(estimate),
            "abs_error": float(err), "tolerance": tolerance, "passed": bool(err <= tolerance)}


# ---------------------------------------------------------------------------
# training + evaluation helpers


def train_and_evaluate(cfg: training.TrainConfig, cache_dir, run_dir, split="test"):
    result = training.train(cfg, cache_dir, run_dir)
    model, _, _ = training.load_checkpoint(result.best_checkpoint)
    report = training.evaluate_split(model, cache_dir, split, cfg)
    return result, report


def _metric_row(report: MetricReport):
    return {"dsc": report.dsc, "miou": report.miou, "hd95": report.hd95, "asd": report.asd,
            "undefined_distances": report.undefined_distance_count}


def ablate(base_cfg: training.TrainConfig, cache_dir, out_dir, modes=None):
    """Train and test every ablation mode; rows carry the Table-3 style labels."""
    out_dir = Path(out_dir)
    rows = []
    for label in modes or training.ABLATION_MODES:
        cfg = dataclasses.replace(base_cfg, **training.ABLATION_MODES[label])
        result, report = train_and_evaluate(cfg, cache_dir, out_dir / _slug(label))
        last = result.history[-1]
        row = {"Methods": label, "use_mi": cfg.use_mi, "use_contrast": cfg.use_contrast}
        row.update(_metric_row(report))
        row.update(final_contrastive=last["contrastive"], final_mi=last["mi"],
                   final_total=last["total"], epochs_run=len(result.history))
        rows.append(row)
    write_csv(out_dir / "ablation.csv", rows)
    return rows


def _slug(label):
    return label.replace("+", "_").replace("-", "").lower()


def sweep(base_cfg: training.TrainConfig, cache_root, out_dir, patch_sizes=(8,),
          sigmas=(0.1, 0.2, 0.3, 0.4, 0.5)):
    """Grid over patch size and sigma with one MIMIC-disabled baseline row.

    Caches are looked up as ``cache_root/p{p}``; missing ones are skipped with
    a warning.
    """
    cache_root, out_dir = Path(cache_root), Path(out_dir)
    available = []
    for p in patch_sizes:
        cache = cache_root / f"p{p}"
        if (cache / "meta.json").exists():
            available.append(p)
        else:
            log.warning("no cache for patch size %d under %s; skipping its cells", p, cache)
    rows = []
    if not available:
        write_csv(out_dir / "sweep.csv", rows, ["mode", "patch_size", "sigma", *METRICS])
        return rows
    base_p = base_cfg.patch_size if base_cfg.patch_size in available else available[0]
    cfg = dataclasses.replace(base_cfg, patch_size=base_p, use_mi=False, use_contrast=False)
    _, report = train_and_evaluate(cfg, cache_root / f"p{base_p}", out_dir / "baseline")
    rows.append({"mode": "baseline", "patch_size": base_p, "sigma": "", **_metric_row(report)})
    for p in available:
        for sigma in sigmas:
            cfg = dataclasses.replace(base_cfg, patch_size=p, sigma=float(sigma),
                                      use_mi=True, use_contrast=True)
            _, report = train_and_evaluate(cfg, cache_root / f"p{p}", out_dir / f"p{p}_s{sigma}")
            rows.append({"mode": "mimic", "patch_size": p, "sigma": float(sigma), **_metric_row(report)})
    write_csv(out_dir / "sweep.csv", rows,
              ["mode", "patch_size", "sigma", *METRICS, "undefined_distances"])
    plot_sweep(out_dir / "sweep.csv", out_dir)
    return rows


METRIC_LABELS = {"dsc": "DSC", "miou": "mIoU", "hd95": "HD95", "asd": "ASD"}


def plot_sweep(csv_path, out_dir):
    """One line plot per metric against the swept hyperparameter, baseline dashed."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_csv(csv_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [r for r in rows if r["mode"] != "baseline"]
    base = [r for r in rows if r["mode"] == "baseline"]
    sigmas = sorted({float(r["sigma"]) for r in cells})
    by_sigma = len(sigmas) > 1 or len({r["patch_size"] for r in cells}) <= 1
    paths = []
    for metric in METRICS:
        fig, ax = plt.subplots(figsize=(4, 3))
        if by_sigma:
            for p in sorted({int(r["patch_size"]) for r in cells}):
                pts = sorted((float(r["sigma"]), float(r[metric])) for r in cells if int(r["patch_size"]) == p)
                ax.plot([x for x, _ in pts], [y for _, y in pts], marker="o", label=f"p={p}")
            ax.set_xlabel("sigma")
        else:
            for s in sigmas:
                pts = sorted((int(r["patch_size"]), float(r[metric])) for r in cells if float(r["sigma"]) == s)
                ax.plot([x for x, _ in pts], [y for _, y in pts], marker="o", label=f"sigma={s}")
            ax.set_xscale("log", base=2)
            ax.set_xlabel("patch size")
        if base:
            ax.axhline(float(base[0][metric]), linestyle="--", color="gray", label="U-Net")
        ax.set_ylabel(METRIC_LABELS[metric])
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"sweep_{metric}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def evaluation_outputs(report: MetricReport, out_dir, method="U-Net+MIMIC"):
    """Per-slice CSV plus a one-row summary laid out like the comparison tables."""
    out_dir = Path(out_dir)
    write_csv(out_dir / "metrics_per_slice.csv", report.per_slice,
              ["record", "dsc", "miou", "hd95", "asd"])
    summary = report.summary_row(method)
    summary["undefined_distances"] = report.undefined_distance_count
    write_csv(out_dir / "summary.csv", [summary])
    return summary
