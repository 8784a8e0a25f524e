"""Optimization of BCE + Dice + contrastive + MI with the warm-up/poly schedule."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from . import data_io
from .contrastive import multiview_loss
from .errors import ConfigurationError, IngestionError, ShapeError, TrainingError
from .eval_metrics import MetricReport, aggregate, slice_metrics
from .frequency_views import SliceSample, build_dct_cube, freq_normalize
from .info_metrics import Critic, MiEstimatorState, PerViewCritics, per_view_scores, train_view_critic
from .seg_net import MimicSegNet
from .view_selection import MiRanking, check_sigma, mi_loss, selected_index_tensor, selection_histogram

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DICE_EPS = 1e-6

ABLATION_MODES = {
    "U-Net": {"use_mi": False, "use_contrast": False},
    "U-Net+MI": {"use_mi": True, "use_contrast": False},
    "U-Net+CL": {"use_mi": False, "use_contrast": True},
    "U-Net+MIMIC": {"use_mi": True, "use_contrast": True},
}


@dataclass
class TrainConfig:
    sigma: float = 0.2
    patch_size: int = 8
    tau: float = 0.1
    lr0: float = 5e-4
    weight_decay: float = 5e-5
    batch_size: int = 20
    max_epochs: int = 300
    warmup_epochs: int = 5
    early_stop_patience: int = 50
    lr_power: float = 0.9
    mode: str = "self"
    seed: int = 0
    base_width: int = 64
    mi_dim: int = 64
    critic_hidden: int = 128
    critic_per_view: bool = False  # independent critic per view instead of one conditioned critic
    critic_lr: Optional[float] = None  # defaults to lr0
    ema_decay: float = 0.99
    use_mi: bool = True
    use_contrast: bool = True
    w_bce: float = 1.0
    w_dice: float = 1.0
    w_contrast: float = 1.0
    w_mi: float = 1.0
    augment: bool = True
    mask_unselected: bool = False
    num_workers: int = 0

    def __post_init__(self):
        check_sigma(self.sigma)
        if self.mode not in ("self", "semi"):
            raise ConfigurationError(f"mode must be 'self' or 'semi', got {self.mode!r}")
        for name in ("patch_size", "tau", "lr0", "batch_size", "max_epochs", "early_stop_patience",
                     "base_width", "mi_dim", "critic_hidden"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigurationError("weight_decay and warmup_epochs must be nonnegative")
        if self.warmup_epochs > self.max_epochs:
            raise ConfigurationError("warmup cannot outlast max_epochs")

    @property
    def widths(self):
        return (self.base_width, 2 * self.base_width, 4 * self.base_width)

    @property
    def n_views(self):
        return self.patch_size * self.patch_size

    def fingerprint(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(mapping) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**mapping)

    @classmethod
    def from_file(cls, path, overrides=None) -> "TrainConfig":
        """Flat ``key: value`` YAML (or JSON) file, then ``overrides`` on top."""
        import yaml
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected a flat key-value mapping")
        data.update(overrides or {})
        return cls.from_mapping(data)


@dataclass
class LossBreakdown:
    bce: torch.Tensor
    dice: torch.Tensor
    contrastive: torch.Tensor
    mi: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("bce", "dice", "contrastive", "mi", "total")}


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentDraw:
    scale: float = 1.0
    rotation: float = 0.0  # degrees
    shift: float = 0.0
    intensity_scale: float = 1.0

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentDraw":
        return cls(
            scale=float(rng.uniform(0.8, 1.2)),
            rotation=float(rng.uniform(-15.0, 15.0)),
            shift=float(rng.uniform(-0.1, 0.1)),
            intensity_scale=float(rng.uniform(0.9, 1.1)),
        )


def apply_augment(sample: SliceSample, draw: AugmentDraw, size=256) -> SliceSample:
    h, w = sample.image.shape
    matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), draw.rotation, draw.scale)
    image = cv2.warpAffine(sample.image.astype(np.float32), matrix, (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
    mask = None
    if sample.mask is not None:
        mask = cv2.warpAffine(sample.mask.astype(np.uint8), matrix, (w, h), flags=cv2.INTER_NEAREST,
                              borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    image = image * draw.intensity_scale + draw.shift
    image, mask = data_io.resize_pair(image, mask, size)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SliceSample(image=image, mask=mask, subject_id=sample.subject_id,
                       slice_index=sample.slice_index)


def augment(sample: SliceSample, rng: np.random.Generator, size=256) -> SliceSample:
    """Random scale, rotation and intensity jitter; geometric part shared with the mask."""
    return apply_augment(sample, AugmentDraw.sample(rng), size)


# ---------------------------------------------------------------------------
# schedule and stopping


def lr_at(epoch, lr0=5e-4, max_epochs=300, warmup_epochs=5, power=0.9):
    """Linear warm-up (epoch+1)/warmup * lr0, then lr0 * (1 - epoch/max_epochs) ** power."""
    if not (0 <= epoch < max_epochs):
        raise ConfigurationError(f"epoch {epoch} outside [0, {max_epochs})")
    if epoch < warmup_epochs:
        return lr0 * (epoch + 1) / warmup_epochs
    return lr0 * (1.0 - epoch / max_epochs) ** power


def lr_for(cfg: TrainConfig, epoch):
    return lr_at(epoch, cfg.lr0, cfg.max_epochs, cfg.warmup_epochs, cfg.lr_power)


class EarlyStopping:
    """Stop once the monitored loss has not strictly decreased for ``patience`` epochs."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.wait = 0

    def update(self, value) -> bool:
        if value < self.best:
            self.best = value
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


def run_epochs(epoch_fn: Callable[[int, float], dict], cfg: TrainConfig, on_epoch_end=None):
    """Drive ``epoch_fn(epoch, lr) -> stats`` under the schedule and early stopping.

    ``stats`` must hold ``total``.  Returns ``(history, stopped_epoch)`` where
    ``stopped_epoch`` is None if the run reached ``max_epochs``.
    """
    stopper = EarlyStopping(cfg.early_stop_patience)
    history = []
    for epoch in range(cfg.max_epochs):
        lr = lr_for(cfg, epoch)
        stats = dict(epoch_fn(epoch, lr))
        if not math.isfinite(stats["total"]):
            raise TrainingError(f"non-finite total loss at epoch {epoch}: {stats}")
        stats.setdefault("epoch", epoch)
        stats.setdefault("lr", lr)
        history.append(stats)
        if on_epoch_end is not None:
            on_epoch_end(epoch, stats)
        if stopper.update(stats["total"]):
            return history, epoch
    return history, None


# ---------------------------------------------------------------------------
# losses


def soft_dice_loss(logits, target, eps=DICE_EPS):
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps), per sample then averaged."""
    p = torch.sigmoid(logits).flatten(1)
    t = target.flatten(1).to(p.dtype)
    inter = (p * t).sum(1)
    return (1.0 - (2.0 * inter + eps) / (p.sum(1) + t.sum(1) + eps)).mean()


def total_loss(logits, target, latent_emb=None, view_emb=None, mi_scores=None, rankings=None,
               mask_emb=None, mode="self", tau=0.1, weights=None) -> LossBreakdown:
    """BCE + Dice + multiview contrastive + MI terms.

    Contrastive and MI terms are zero when their inputs are omitted.
    ``weights`` optionally scales each term (keys bce, dice, contrastive, mi).
    """
    if logits.shape != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    w = {"bce": 1.0, "dice": 1.0, "contrastive": 1.0, "mi": 1.0, **(weights or {})}
    target = target.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, target)
    dice = soft_dice_loss(logits, target)
    zero = logits.new_zeros(())
    con = zero
    if latent_emb is not None and view_emb is not None:
        con = multiview_loss(latent_emb, view_emb, mask_emb if mode == "semi" else None, mode, tau)
    mi = zero
    if rankings is not None:
        mi = mi_loss(rankings, mi_scores)
        mi = mi if torch.is_tensor(mi) else logits.new_tensor(mi)
    bce, dice, con, mi = w["bce"] * bce, w["dice"] * dice, w["contrastive"] * con, w["mi"] * mi
    return LossBreakdown(bce=bce, dice=dice, contrastive=con, mi=mi, total=bce + dice + con + mi)


# ---------------------------------------------------------------------------
# data


class CacheDataset(Dataset):
    """Slices from one cache split; training samples are augmented and re-transformed."""

    def __init__(self, cache_dir, split, cfg: TrainConfig, train=False, epoch_seed=0):
        self.cache_dir = Path(cache_dir)
        self.meta = data_io.read_cache_meta(cache_dir)
        if self.meta["patch_size"] != cfg.patch_size:
            raise ConfigurationError(
                f"cache patch size {self.meta['patch_size']} != config patch size {cfg.patch_size}")
        self.paths = data_io.cache_records(cache_dir, split)
        self.cfg = cfg
        self.train = train
        self.epoch_seed = epoch_seed
        self.order = self.meta["channel_order"]
        self.stats = data_io.channel_stats(cache_dir)
        self.size = self.meta["config"]["image_size"]

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        rec = data_io.read_record(self.paths[i])
        image, cube = rec["image"], rec["cube"]
        mask = rec.get("mask")
        if mask is None:
            mask = np.zeros_like(image, dtype=np.uint8)
        if self.train and self.cfg.augment:
            rng = np.random.default_rng([self.cfg.seed, self.epoch_seed, i])
            s = augment(SliceSample(image=image, mask=mask), rng, self.size)
            image, mask = s.image, s.mask
            raw = build_dct_cube(image, self.cfg.patch_size, self.order)
            cube = freq_normalize(raw, self.stats).coefficients.astype(np.float32)
        return {
            "image": torch.from_numpy(image[None].astype(np.float32)),
            "mask": torch.from_numpy(mask[None].astype(np.float32)),
            "cube": torch.from_numpy(cube.astype(np.float32)),
            "index": i,
        }

    def record_id(self, i):
        return self.paths[i].stem


# ---------------------------------------------------------------------------
# model state


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def build_model(cfg: TrainConfig) -> MimicSegNet:
    return MimicSegNet(n_views=cfg.n_views, patch_size=cfg.patch_size, widths=cfg.widths,
                       mi_dim=cfg.mi_dim, mask_branch=cfg.mode == "semi")


def build_estimator(cfg: TrainConfig) -> MiEstimatorState:
    if cfg.critic_per_view:
        critic = PerViewCritics(cfg.mi_dim, cfg.mi_dim, cfg.n_views, hidden=cfg.critic_hidden)
    else:
        critic = Critic(cfg.mi_dim, cfg.mi_dim, hidden=cfg.critic_hidden, n_views=cfg.n_views)
    # separate parameter group without weight decay
    # own optimizer, no weight decay
    return MiEstimatorState(critic, lr=cfg.critic_lr or cfg.lr0, ema_decay=cfg.ema_decay)


def save_checkpoint(path, model, estimator, cfg: TrainConfig, epoch, metrics, cache_meta=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(cfg),
        "config_fingerprint": cfg.fingerprint(),
        "cache_fingerprint": (cache_meta or {}).get("fingerprint"),
        "epoch": epoch,
        "metrics": metrics,
        "model": model.state_dict(),
        "estimator": estimator.state_dict() if estimator is not None else None,
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (model in eval mode, config, payload)."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: checkpoint not found")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    cfg = TrainConfig.from_mapping(payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, cfg, payload


# ---------------------------------------------------------------------------
# training step


def _mask_cube(cube, rankings):
    keep = torch.zeros_like(cube[:, :, :1, :1])
    for b, r in enumerate(rankings):
        keep[b, r.selected] = 1.0
    return cube * keep


def forward_losses(model, estimator, batch, cfg: TrainConfig, generator=None, update_critic=True):
    """Forward pass and loss terms for one batch.

    Returns ``(LossBreakdown, rankings)``; rankings are None when neither
    auxiliary term is active.
    """
    images, masks, cube = batch["image"], batch["mask"], batch["cube"]
    latent, skips = model.encode(images)
    logits = model.decode(latent, skips)
    weights = {"bce": cfg.w_bce, "dice": cfg.w_dice, "contrastive": cfg.w_contrast, "mi": cfg.w_mi}
    if not (cfg.use_mi or cfg.use_contrast) or images.shape[0] < 2:
        return total_loss(logits, masks, weights=weights), None

    _, view_feats = model.encode_views(cube)
    u, v = model.mi_embeddings(latent, view_feats)
    if update_critic:
        train_view_critic(estimator, u.detach(), v.detach(), generator)
    scores, _, _ = per_view_scores(estimator.critic, u, v, generator)
    rankings = [MiRanking.from_scores(row, cfg.sigma) for row in scores.detach().cpu().numpy()]

    z = v_emb = y = None
    if cfg.use_contrast:
        if cfg.mask_unselected:
            _, view_feats = model.encode_views(_mask_cube(cube, rankings))
        z, v_emb, y = model.contrastive_embeddings(
            latent, view_feats, selected_index_tensor(rankings),
            masks if cfg.mode == "semi" else None)
    losses = total_loss(
        logits, masks, latent_emb=z, view_emb=v_emb,
        mi_scores=scores if cfg.use_mi else None,
        rankings=rankings if cfg.use_mi else None,
        mask_emb=y, mode=cfg.mode, tau=cfg.tau, weights=weights)
    return losses, rankings


@torch.no_grad()
def predict(model, images, threshold=0.5):
    model.eval()
    return (torch.sigmoid(model(images)) > threshold).to(torch.uint8)


@torch.no_grad()
def split_loss(model, estimator, cache_dir, split, cfg: TrainConfig, seed=0) -> dict:
    """Mean loss terms over a split without augmentation or critic updates."""
    model.eval()
    ds = CacheDataset(cache_dir, split, cfg, train=False)
    loader = DataLoader(ds, batch_size=cfg.batch_size, shuffle=False)
    gen = torch.Generator().manual_seed(seed)
    sums, n = {}, 0
    for batch in loader:
        losses, _ = forward_losses(model, estimator, batch, cfg, gen, update_critic=False)
        bsz = batch["image"].shape[0]
        for k, val in losses.as_floats().items():
            sums[k] = sums.get(k, 0.0) + val * bsz
        n += bsz
    return {k: v / max(n, 1) for k, v in sums.items()}


def evaluate_split(model, cache_dir, split, cfg: TrainConfig, batch_size=None) -> MetricReport:
    ds = CacheDataset(cache_dir, split, cfg, train=False)
    loader = DataLoader(ds, batch_size=batch_size or cfg.batch_size, shuffle=False)
    rows = []
    for batch in loader:
        pred = predict(model, batch["image"]).numpy()[:, 0]
        gt = batch["mask"].numpy()[:, 0].astype(np.uint8)
        for k, idx in enumerate(batch["index"].tolist()):
            row = {"record": ds.record_id(idx)}
            row.update(slice_metrics(pred[k], gt[k]))
            rows.append(row)
    return aggregate(rows)


HISTORY_FIELDS = ["epoch", "lr", "bce", "dice", "contrastive", "mi", "total",
                  "val_total", "val_dsc", "val_miou", "val_hd95", "val_asd", "view_hist_path"]


@dataclass
class TrainResult:
    history: list
    best_checkpoint: Path
    last_checkpoint: Path
    stopped_epoch: Optional[int]
    best_val_dsc: float
    run_dir: Path
    view_histograms: list = field(default_factory=list)


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def train(cfg: TrainConfig, cache_dir, run_dir) -> TrainResult:
    """Fit the network on the cache's train split, checkpointing the best validation DSC.

    Writes ``config.json``, ``history.csv``, ``view_hist.csv``, ``best.pt`` and
    ``last.pt`` into ``run_dir``.
    """
    cache_dir, run_dir = Path(cache_dir), Path(run_dir)
    meta = data_io.read_cache_meta(cache_dir)
    if not data_io.cache_records(cache_dir, "train"):
        raise IngestionError(f"{cache_dir}: empty training split")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=1, sort_keys=True))

    seed_everything(cfg.seed)
    model = build_model(cfg)
    estimator = build_estimator(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    has_val = bool(data_io.cache_records(cache_dir, "val"))

    best = {"dsc": -math.inf}
    histograms = []
    hist_path = run_dir / "view_hist.csv"

    def epoch_fn(epoch, lr):
        for group in optimizer.param_groups:
            group["lr"] = lr
        for group in estimator.optimizer.param_groups:
            group["lr"] = lr * (cfg.critic_lr or cfg.lr0) / cfg.lr0
        ds = CacheDataset(cache_dir, "train", cfg, train=True, epoch_seed=epoch)
        loader = DataLoader(ds, batch_size=cfg.batch_size, shuffle=True, num_workers=cfg.num_workers,
                            generator=torch.Generator().manual_seed(cfg.seed * 100003 + epoch))
        model.train()
        sums = {k: 0.0 for k in ("bce", "dice", "contrastive", "mi", "total")}
        n = 0
        counts = np.zeros(cfg.n_views, dtype=np.int64)
        for batch in loader:
            losses, rankings = forward_losses(model, estimator, batch, cfg, gen)
            if not torch.isfinite(losses.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}: {losses.as_floats()}")
            optimizer.zero_grad()
            losses.total.backward()
            optimizer.step()
            bsz = batch["image"].shape[0]
            for k, val in losses.as_floats().items():
                sums[k] += val * bsz
            n += bsz
            if rankings is not None:
                counts += selection_histogram(rankings, cfg.n_views)
        stats = {k: s / max(n, 1) for k, s in sums.items()}
        histograms.append(counts)
        if has_val:
            report = evaluate_split(model, cache_dir, "val", cfg)
            val_total = split_loss(model, estimator, cache_dir, "val", cfg, seed=cfg.seed * 100003 + epoch)["total"]
            stats.update(val_total=val_total, val_dsc=report.dsc, val_miou=report.miou,
                         val_hd95=report.hd95, val_asd=report.asd)
        else:
            stats.update(val_total=math.nan, val_dsc=math.nan, val_miou=math.nan, val_hd95=math.nan,
                         val_asd=math.nan)
        stats["view_hist_path"] = hist_path.name
        return stats

    def on_epoch_end(epoch, stats):
        score = stats["val_dsc"] if has_val else -stats["total"]
        metrics = {k: stats[k] for k in ("val_dsc", "val_miou", "val_hd95", "val_asd", "total")}
        if score > best["dsc"]:
            best["dsc"] = score
            save_checkpoint(run_dir / "best.pt", model, estimator, cfg, epoch, metrics, meta)
        log.info("epoch %d total %.4f val_dsc %.4f", epoch, stats["total"], stats["val_dsc"])

    history, stopped = run_epochs(epoch_fn, cfg, on_epoch_end)
    save_checkpoint(run_dir / "last.pt", model, estimator, cfg, history[-1]["epoch"],
                    {k: history[-1][k] for k in ("val_dsc", "total")}, meta)
    write_history(run_dir / "history.csv", history)
    write_view_histograms(hist_path, histograms)
    return TrainResult(history=history, best_checkpoint=run_dir / "best.pt",
                       last_checkpoint=run_dir / "last.pt", stopped_epoch=stopped,
                       best_val_dsc=best["dsc"], run_dir=run_dir, view_histograms=histograms)


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: _fmt(row.get(k, "")) for k in HISTORY_FIELDS})


def write_view_histograms(path, histograms):
    if not histograms:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + [f"view_{j}" for j in range(len(histograms[0]))])
        for epoch, counts in enumerate(histograms):
            writer.writerow([epoch] + [int(c) for c in counts])
