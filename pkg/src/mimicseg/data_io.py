"""Volume ingestion, synthetic datasets, and the per-slice cube cache.

Input directory layout
----------------------
``<subject>.nii[.gz]`` or ``<subject>.npy``
    voxel volume; NIfTI volumes are stored X x Y x Z and read as Z x X x Y.
``<subject>_mask.nii[.gz]`` / ``<subject>_mask.npy``
    optional binary mask with the same shape.
``<subject>/`` containing ``*.png`` (sorted) and optional ``<subject>_mask/``
    a volume given as 2D slices.

Cache layout
------------
``meta.json``
    plain-text sidecar: patch size, channel order, normalization modes,
    split assignment, per-subject source checksums, config fingerprint.
``slices/<split>/<subject>__<slice:04d>.npz``
    one record per slice with ``image`` (H x W float32 in [0, 1]),
    ``mask`` (H x W uint8, absent at inference) and ``cube``
    (p*p x H/p x W/p float32, frequency-normalized).
``channel_stats.npz``
    present only with global frequency normalization.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .errors import ConfigurationError, IngestionError, StaleCacheError
from .frequency_views import (CHANNEL_ORDERS, DctCube, build_dct_cube, channel_min_max,
                              freq_normalize, subject_normalize)

log = logging.getLogger(__name__)

CACHE_FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
_VOLUME_SUFFIXES = (".nii.gz", ".nii", ".npy")


@dataclass
class CtVolume:
    voxels: np.ndarray  # D x H x W
    spacing: tuple = (1.0, 1.0, 1.0)
    subject_id: str = ""
    mask: Optional[np.ndarray] = None
    slice_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise IngestionError(f"{self.subject_id}: volume must be 3D, got {self.voxels.shape}")
        if self.mask is not None and self.mask.shape != self.voxels.shape:
            raise IngestionError(
                f"{self.subject_id}: mask shape {self.mask.shape} != volume shape {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise IngestionError(f"{self.subject_id}: spacing must be positive, got {self.spacing}")
        if self.slice_indices is None:
            self.slice_indices = np.arange(self.voxels.shape[0])


# ---------------------------------------------------------------------------
# reading and writing volumes


def _strip_suffix(name: str) -> Optional[str]:
    for suf in _VOLUME_SUFFIXES:
        if name.endswith(suf):
            return name[: -len(suf)]
    return None


def _read_array(path: Path):
    """Return (array, spacing) for one volume file or slice directory."""
    try:
        if path.is_dir():
            files = sorted(path.glob("*.png"))
            if not files:
                raise IngestionError(f"{path}: no .png slices")
            slices = [cv2.imread(str(f), cv2.IMREAD_UNCHANGED) for f in files]
            if any(s is None for s in slices):
                raise IngestionError(f"{path}: unreadable slice image")
            return np.stack([s if s.ndim == 2 else s[..., 0] for s in slices]), (1.0, 1.0, 1.0)
        if path.name.endswith(".npy"):
            return np.load(path, allow_pickle=False), (1.0, 1.0, 1.0)
        import nibabel as nib
        img = nib.load(str(path))
        data = np.asarray(img.dataobj)
        if data.ndim != 3:
            raise IngestionError(f"{path}: expected a 3D volume, got shape {data.shape}")
        zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
        return data.transpose(2, 0, 1), (zooms[2], zooms[0], zooms[1])
    except IngestionError:
        raise
    except Exception as exc:  # nibabel/numpy raise a zoo of types on corrupt input
        raise IngestionError(f"cannot read {path}: {exc}") from exc


def _mask_path(path: Path) -> Optional[Path]:
    if path.is_dir():
        cand = path.with_name(path.name + "_mask")
        return cand if cand.is_dir() else None
    stem = _strip_suffix(path.name)
    for suf in _VOLUME_SUFFIXES:
        cand = path.with_name(f"{stem}_mask{suf}")
        if cand.exists():
            return cand
    return None


def load_volume(path, require_mask=False) -> CtVolume:
    """Read a volume and, by naming convention, its mask."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    voxels, spacing = _read_array(path)
    subject = path.name if path.is_dir() else _strip_suffix(path.name)
    mpath = _mask_path(path)
    mask = None
    if mpath is not None:
        raw, _ = _read_array(mpath)
        if raw.shape != voxels.shape:
            raise IngestionError(f"{mpath}: mask shape {raw.shape} != volume shape {voxels.shape}")
        mask = (raw > 0).astype(np.uint8)
    elif require_mask:
        raise IngestionError(f"{path}: mask required but not found")
    return CtVolume(voxels=voxels.astype(np.float32), spacing=spacing, subject_id=subject, mask=mask)


def save_volume(volume: CtVolume, out_dir, fmt="nii"):
    """Write a volume (and mask) under the naming convention; returns the volume path."""
    import nibabel as nib
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def write(arr, name):
        if fmt == "npy":
            p = out_dir / f"{name}.npy"
            np.save(p, arr)
            return p
        dz, dx, dy = volume.spacing
        affine = np.diag([dx, dy, dz, 1.0])
        img = nib.Nifti1Image(np.ascontiguousarray(arr.transpose(1, 2, 0)), affine)
        img.header.set_zooms((dx, dy, dz))
        p = out_dir / f"{name}.{fmt}"
        nib.save(img, str(p))
        return p

    path = write(volume.voxels, volume.subject_id)
    if volume.mask is not None:
        write(volume.mask.astype(np.uint8), f"{volume.subject_id}_mask")
    return path


def discover_volumes(in_dir) -> list:
    """Volume paths in a directory, excluding masks, sorted by subject id."""
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise IngestionError(f"{in_dir}: not a directory")
    found = []
    for p in sorted(in_dir.iterdir()):
        if p.is_dir():
            if not p.name.endswith("_mask"):
                found.append(p)
            continue
        stem = _strip_suffix(p.name)
        if stem is not None and not stem.endswith("_mask"):
            found.append(p)
    return found


def file_checksum(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(path.rglob("*")) if path.is_dir() else [path]
    for f in files:
        if f.is_file():
            h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    n_subjects: int = 20
    slices_per_subject: int = 8
    lesion_count_range: tuple = (0, 2)
    lesion_radius_range: tuple = (4.0, 12.0)
    texture_noise_level: float = 0.08
    lesion_contrast: float = 250.0
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.lesion_count_range
        rlo, rhi = self.lesion_radius_range
        if not (0 <= lo <= hi) or not (0 < rlo <= rhi):
            raise ConfigurationError(f"invalid synthetic ranges in {self}")
        if self.n_subjects < 1 or self.slices_per_subject < 1:
            raise ConfigurationError("need at least one subject and one slice")


def ellipse_mask(shape, center, axes, angle) -> np.ndarray:
    """Exact rasterization of a rotated ellipse at pixel centers."""
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def _smooth_noise(rng, shape, sigma):
    from scipy.ndimage import gaussian_filter
    field_ = gaussian_filter(rng.standard_normal(shape), sigma)
    return field_ / (np.abs(field_).max() + 1e-12)


def synthetic_slice(rng, spec: SyntheticSpec):
    """One HU-like slice plus its mask and the lesion geometry used to draw it."""
    n = spec.image_size
    shape = (n, n)
    image = -750.0 + 120.0 * _smooth_noise(rng, shape, n / 8)
    image += 1000.0 * spec.texture_noise_level * rng.standard_normal(shape)
    mask = np.zeros(shape, dtype=bool)
    lesions = []
    count = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    rlo, rhi = spec.lesion_radius_range
    for _ in range(count):
        a, b = rng.uniform(rlo, rhi, size=2)
        margin = max(a, b) + 1
        cy, cx = rng.uniform(margin, n - 1 - margin, size=2) if n - 1 - 2 * margin > 0 else (n / 2, n / 2)
        angle = rng.uniform(0, np.pi)
        region = ellipse_mask(shape, (cy, cx), (a, b), angle)
        # lesions are brighter and carry a fine checker texture
        yy, xx = np.mgrid[:n, :n]
        texture = 60.0 * np.where((yy + xx) % 2 == 0, 1.0, -1.0)
        image[region] += spec.lesion_contrast + texture[region]
        mask |= region
        lesions.append({"center": (float(cy), float(cx)), "axes": (float(a), float(b)), "angle": float(angle)})
    return image.astype(np.float32), mask.astype(np.uint8), lesions


def make_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write a synthetic dataset: one uncompressed NIfTI volume + mask per subject."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    geometry = {}
    for s in range(spec.n_subjects):
        sid = f"subj{s:03d}"
        images, masks, geo = [], [], []
        for _ in range(spec.slices_per_subject):
            img, m, les = synthetic_slice(rng, spec)
            images.append(img)
            masks.append(m)
            geo.append(les)
        vol = CtVolume(voxels=np.stack(images), mask=np.stack(masks), subject_id=sid,
                       spacing=(5.0, 1.0, 1.0))
        save_volume(vol, out_dir, fmt="nii")
        geometry[sid] = geo
    manifest = {"spec": dataclasses.asdict(spec), "geometry": geometry}
    _atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return out_dir


def planted_view_embeddings(n, generator, n_views=64, dim=4, informative=(0, 1, 2), noise=0.3):
    """Latent embeddings and per-view embeddings with a planted informative subset.

    Informative views are a fixed orthogonal map of the latent plus Gaussian
    noise; every other view is independent noise.
    """
    import torch
    z = torch.randn(n, dim, generator=generator)
    views = torch.randn(n, n_views, dim, generator=generator)
    for j in informative:
        rot = torch.linalg.qr(torch.randn(dim, dim, generator=torch.Generator().manual_seed(1000 + j)))[0]
        views[:, j] = z @ rot.T + noise * torch.randn(n, dim, generator=generator)
    return z, views


# ---------------------------------------------------------------------------
# cache


@dataclass
class CacheConfig:
    patch_size: int = 8
    channel_order: str = "zigzag"
    fn_mode: str = "per_cube"
    drop_empty: bool = True
    image_size: int = 256
    split_seed: int = 0
    split_fractions: tuple = (0.7, 0.1, 0.2)
    subject_normalization: str = "subject_minmax"

    def __post_init__(self):
        if self.channel_order not in CHANNEL_ORDERS:
            raise ConfigurationError(f"unknown channel order {self.channel_order!r}")
        if self.fn_mode not in ("per_cube", "global"):
            raise ConfigurationError(f"unknown fn_mode {self.fn_mode!r}")
        if self.image_size % self.patch_size or self.image_size % 8:
            raise ConfigurationError(
                f"image_size {self.image_size} must be divisible by 8 and patch size {self.patch_size}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigurationError("split fractions must sum to 1")
        self.split_fractions = tuple(self.split_fractions)

    def fingerprint(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def split_subjects(subject_ids, fractions=(0.7, 0.1, 0.2), seed=0) -> dict:
    """Seeded subject-level split; every split with a positive fraction gets >= 1 subject when possible."""
    ids = sorted(subject_ids)
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_val = min(max(n_val, 1), n - n_train - 1)
    out = {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }
    return out


def resize_pair(image, mask, size):
    """Bilinear image resize and nearest-neighbour mask resize to size x size."""
    if image.shape != (size, size):
        image = cv2.resize(image.astype(np.float32), (size, size), interpolation=cv2.INTER_LINEAR)
        if mask is not None:
            mask = cv2.resize(mask.astype(np.uint8), (size, size), interpolation=cv2.INTER_NEAREST)
    return image, mask


def _atomic_write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: Path, text: str):
    _atomic_write_bytes(path, text.encode())


def write_record(path: Path, image, cube, mask=None):
    import io
    arrays = {"image": image.astype(np.float32), "cube": cube.astype(np.float32)}
    if mask is not None:
        arrays["mask"] = mask.astype(np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write_bytes(path, buf.getvalue())


def read_record(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def _slice_records(volume: CtVolume, cfg: CacheConfig, drop_empty: bool):
    vol = subject_normalize(volume, drop_lesion_free=drop_empty)
    for k in range(vol.voxels.shape[0]):
        mask = vol.mask[k] if vol.mask is not None else None
        image, mask = resize_pair(vol.voxels[k].astype(np.float32), mask, cfg.image_size)
        image = np.clip(image, 0.0, 1.0)
        yield int(vol.slice_indices[k]), image, mask


def build_cache(volumes, out_dir, config: CacheConfig, overwrite=False) -> Path:
    """Normalize, slice, transform and store every volume.

    ``volumes`` is an input directory or an iterable of paths / CtVolume.
    Lesion-free slices are dropped from the training split only.
    """
    out_dir = Path(out_dir)
    meta_path = out_dir / "meta.json"
    if isinstance(volumes, (str, os.PathLike)):
        volumes = discover_volumes(volumes)
    loaded, sources = [], {}
    for v in volumes:
        if isinstance(v, CtVolume):
            loaded.append(v)
            sources[v.subject_id] = hashlib.sha256(np.ascontiguousarray(v.voxels).tobytes()).hexdigest()
        else:
            vol = load_volume(v)
            loaded.append(vol)
            mpath = _mask_path(Path(v))
            sources[vol.subject_id] = file_checksum(v) + (file_checksum(mpath) if mpath else "")
    if not loaded:
        raise IngestionError("no volumes to cache")

    if meta_path.exists() and not overwrite:
        meta = json.loads(meta_path.read_text())
        if meta.get("fingerprint") != config.fingerprint() or meta.get("sources") != sources:
            raise StaleCacheError(
                f"{out_dir} was built with a different config or different sources; "
                "rebuild with overwrite")
        return out_dir

    splits = split_subjects([v.subject_id for v in loaded], config.split_fractions, config.split_seed)
    split_of = {sid: name for name, ids in splits.items() for sid in ids}
    if any(v.mask is None for v in loaded if split_of[v.subject_id] == "train") and config.drop_empty:
        raise ConfigurationError("training volumes need masks when drop_empty is set")

    staged = []  # (split, subject, index, image, mask, raw cube)
    for vol in sorted(loaded, key=lambda v: v.subject_id):
        split = split_of[vol.subject_id]
        drop = config.drop_empty and split == "train"
        for idx, image, mask in _slice_records(vol, config, drop):
            cube = build_dct_cube(image, config.patch_size, config.channel_order)
            staged.append((split, vol.subject_id, idx, image, mask, cube))

    # a rebuild must not leave records of the previous build behind
    shutil.rmtree(out_dir / "slices", ignore_errors=True)
    (out_dir / "channel_stats.npz").unlink(missing_ok=True)
    stats = None
    if config.fn_mode == "global":
        train_cubes = [c for s, *_, c in staged if s == "train"] or [c for *_, c in staged]
        mins = np.min([channel_min_max(c)[0] for c in train_cubes], axis=0)
        maxs = np.max([channel_min_max(c)[1] for c in train_cubes], axis=0)
        stats = (mins, maxs)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savez(out_dir / "channel_stats.npz", min=mins, max=maxs)

    counts = {s: 0 for s in SPLITS}
    for split, sid, idx, image, mask, cube in staged:
        norm = freq_normalize(cube, stats)
        write_record(out_dir / "slices" / split / f"{sid}__{idx:04d}.npz", image, norm.coefficients, mask)
        counts[split] += 1

    meta = {
        "format_version": CACHE_FORMAT_VERSION,
        "config": dataclasses.asdict(config),
        "fingerprint": config.fingerprint(),
        "patch_size": config.patch_size,
        "channel_order": config.channel_order,
        "fn_mode": config.fn_mode,
        "subject_normalization": config.subject_normalization,
        "splits": splits,
        "record_counts": counts,
        "sources": sources,
        "spacing": {v.subject_id: list(v.spacing) for v in loaded},
    }
    _atomic_write_text(meta_path, json.dumps(meta, indent=1, sort_keys=True))
    log.info("cached %s records under %s", counts, out_dir)
    return out_dir


def read_cache_meta(cache_dir) -> dict:
    meta_path = Path(cache_dir) / "meta.json"
    if not meta_path.exists():
        raise IngestionError(f"{cache_dir}: no cache (meta.json missing)")
    return json.loads(meta_path.read_text())


def cache_records(cache_dir, split) -> list:
    return sorted((Path(cache_dir) / "slices" / split).glob("*.npz"))


def channel_stats(cache_dir):
    p = Path(cache_dir) / "channel_stats.npz"
    if not p.exists():
        return None
    with np.load(p) as z:
        return z["min"], z["max"]


def cube_from_cache(record) -> DctCube:
    return DctCube(record["cube"], patch_size=int(np.sqrt(record["cube"].shape[0])), normalized=True)
