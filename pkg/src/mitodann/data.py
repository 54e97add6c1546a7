"""Patch manifests, the synthetic two-domain generator, preprocessing and balanced sampling.

Synthetic patches
-----------------
Each patch is a nucleus on a textured stained background.

* class 1 ("mitosis-like"): 2-4 dark lobes strung along a long axis,
  aspect ratio drawn from ``aspect_mitosis`` and clumped chromatin;
* class 0 ("look-alike"): 1-2 rounder lobes, aspect from ``aspect_lookalike``,
  lighter and smoother.

The aspect ranges are disjoint, so classes are separable by shape inside any
domain; the margin is ``aspect_mitosis[0] - aspect_lookalike[1]``.
Domain 1 swaps the background texture and applies a per-channel affine
colour map ``pivot + gain * (x - pivot) + offset`` to both classes alike.
Because the map is pivoted at the mean channel intensity, the domain-1 mean
moves by ``offset`` up to clipping and sampling noise.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .losses import BatchLabels

STRATA = ((0, 0), (0, 1), (1, 0), (1, 1))  # (y_domain, y_cell)


class DataError(ValueError):
    pass


@dataclass
class Record:
    y_cell: int
    y_domain: int
    dataset: str
    split: str = "train"
    path: str | None = None
    image: np.ndarray | None = None  # H×W×3 uint8 when inline


@dataclass
class Manifest:
    records: list[Record]
    root: Path | None = None
    cap: int = 1600
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str) -> Manifest:
        return Manifest([r for r in self.records if r.split == split], self.root, self.cap, self.mean, self.std)

    def labels(self) -> tuple[np.ndarray, np.ndarray]:
        y_cell = np.array([r.y_cell for r in self.records], dtype=np.int64)
        y_domain = np.array([r.y_domain for r in self.records], dtype=np.int64)
        return y_cell, y_domain

    def datasets(self) -> list[str]:
        return [r.dataset for r in self.records]


def apply_cap(manifest: Manifest, cap: int | None = None, seed: int = 0) -> Manifest:
    """Keep at most ``cap`` records per dataset, chosen by a seeded shuffle (original order preserved)."""
    cap = manifest.cap if cap is None else cap
    by_ds: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        by_ds.setdefault(r.dataset, []).append(i)
    keep: list[int] = []
    for k, name in enumerate(sorted(by_ds)):
        idx = by_ds[name]
        if len(idx) > cap:
            rng = np.random.default_rng([seed, k])
            idx = sorted(rng.permutation(idx)[:cap].tolist())
        keep.extend(idx)
    keep.sort()
    return Manifest([manifest.records[i] for i in keep], manifest.root, cap, manifest.mean, manifest.std)


# -- synthetic generator -------------------------------------------------------


@dataclass
class SynthConfig:
    per_class_per_domain: int = 800
    patch_size: int = 64
    holdout: float = 0.25
    seed: int = 0
    # per-channel colour map for domain 1
    domain_gain: tuple[float, float, float] = (0.55, 0.65, 0.6)
    domain_offset: tuple[float, float, float] = (-0.10, 0.06, -0.08)
    # stain colours (RGB in [0, 1])
    background: tuple[float, float, float] = (0.88, 0.72, 0.82)
    nucleus: tuple[float, float, float] = (0.30, 0.16, 0.42)
    # texture: (frequency, amplitude) per domain
    texture_source: tuple[float, float] = (3.0, 0.04)
    texture_target: tuple[float, float] = (9.0, 0.07)
    # class geometry
    aspect_mitosis: tuple[float, float] = (2.0, 2.8)
    aspect_lookalike: tuple[float, float] = (1.0, 1.5)
    size_range: tuple[float, float] = (0.28, 0.40)
    contrast_mitosis: tuple[float, float] = (0.85, 1.0)
    contrast_lookalike: tuple[float, float] = (0.55, 0.75)
    brightness_jitter: float = 0.04
    noise: float = 0.03

    def __post_init__(self):
        if self.per_class_per_domain < 1:
            raise DataError("per_class_per_domain must be >= 1")
        if self.patch_size < 8:
            raise DataError("patch_size must be >= 8")
        if not 0 <= self.holdout < 1:
            raise DataError("holdout must lie in [0, 1)")
        if self.aspect_mitosis[0] <= self.aspect_lookalike[1]:
            raise DataError("class aspect ranges must be disjoint")
        for name in ("domain_gain", "domain_offset", "background", "nucleus"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if min(self.domain_gain) <= 0:
            raise DataError("domain gains must be positive (the colour map must be invertible)")

    @property
    def shape_margin(self) -> float:
        return self.aspect_mitosis[0] - self.aspect_lookalike[1]

    @property
    def pivot(self) -> np.ndarray:
        """Expected per-channel intensity of an untransformed patch; the colour map is centred here."""
        bg = np.array(self.background)
        nuc = np.array(self.nucleus)
        return bg + 0.08 * (nuc - bg)


def _texture(rng, yy, xx, freq, amp, n_waves=4):
    tex = np.zeros_like(xx)
    for _ in range(n_waves):
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        f = freq * rng.uniform(0.8, 1.25)
        tex += np.sin(f * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    return amp * tex / np.sqrt(n_waves / 2)


def _nucleus_mask(rng, yy, xx, y_cell, cfg: SynthConfig, size):
    if y_cell == 1:
        aspect = rng.uniform(*cfg.aspect_mitosis)
        n_lobes = int(rng.integers(2, 5))
    else:
        aspect = rng.uniform(*cfg.aspect_lookalike)
        n_lobes = int(rng.integers(1, 3))
    theta = rng.uniform(0, np.pi)
    cy, cx = rng.normal(0, 0.04, size=2)
    u = np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)
    v = -np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)
    half_len = size * np.sqrt(aspect)
    half_wid = size / np.sqrt(aspect)
    mask = np.zeros_like(xx)
    for k in range(n_lobes):
        pos = 0.0 if n_lobes == 1 else half_len * (0.65 * (2 * k / (n_lobes - 1) - 1))
        lobe_len = half_len / max(n_lobes * 0.6, 1.0)
        r = ((u - pos) / lobe_len) ** 2 + (v / (half_wid * rng.uniform(0.85, 1.15))) ** 2
        mask = np.maximum(mask, 1.0 / (1.0 + np.exp((np.sqrt(r) - 1.0) / 0.08)))
    # body joining the lobes so the overall outline keeps its aspect ratio
    r = (u / half_len) ** 2 + (v / (0.7 * half_wid)) ** 2
    mask = np.maximum(mask, 0.8 / (1.0 + np.exp((np.sqrt(r) - 1.0) / 0.08)))
    return mask


def _render(rng: np.random.Generator, y_cell: int, y_domain: int, cfg: SynthConfig) -> np.ndarray:
    s = cfg.patch_size
    coords = (np.arange(s) + 0.5) / s * 2 - 1
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    bg = np.array(cfg.background) + rng.normal(0, cfg.brightness_jitter)
    freq, amp = cfg.texture_target if y_domain == 1 else cfg.texture_source
    tex = _texture(rng, yy, xx, freq, amp)
    size = rng.uniform(*cfg.size_range)
    mask = _nucleus_mask(rng, yy, xx, y_cell, cfg, size)
    if y_cell == 1:
        contrast = rng.uniform(*cfg.contrast_mitosis)
        chroma = 1.0 + 0.25 * _texture(rng, yy, xx, 14.0, 1.0)
    else:
        contrast = rng.uniform(*cfg.contrast_lookalike)
        chroma = 1.0 + 0.08 * _texture(rng, yy, xx, 6.0, 1.0)
    alpha = np.clip(contrast * mask * chroma, 0, 1)[..., None]
    img = bg + tex[..., None] * np.array([1.0, 0.8, 1.0])
    img = img + alpha * (np.array(cfg.nucleus) - img)
    img = img + rng.normal(0, cfg.noise, size=img.shape)
    if y_domain == 1:
        pivot = cfg.pivot
        img = pivot + np.array(cfg.domain_gain) * (img - pivot) + np.array(cfg.domain_offset)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def generate_synthetic(cfg: SynthConfig) -> Manifest:
    """Deterministic two-domain patch set with ``holdout`` of each stratum marked ``split="test"``."""
    records: list[Record] = []
    n = cfg.per_class_per_domain
    n_test = int(round(cfg.holdout * n))
    for y_domain, y_cell in STRATA:
        rng = np.random.default_rng([cfg.seed, y_domain, y_cell])
        test_idx = set(rng.permutation(n)[:n_test].tolist())
        dataset = "synth_target" if y_domain else "synth_source"
        for i in range(n):
            img = _render(rng, y_cell, y_domain, cfg)
            split = "test" if i in test_idx else "train"
            records.append(Record(y_cell, y_domain, dataset, split, path=None, image=img))
    return Manifest(records, cap=max(1600, 2 * n))


# -- manifest files --------------------------------------------------------------

CSV_FIELDS = ("path", "y_C", "y_D", "dataset", "split")


def write_manifest(manifest: Manifest, out_dir, name: str = "manifest.csv") -> Path:
    """Write images as PNG, the CSV manifest and a ``stats.json`` sidecar into ``out_dir``."""
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, r in enumerate(manifest.records):
        rel = r.path
        if r.image is not None:
            rel = f"images/{r.dataset}_{i:05d}.png"
            Image.fromarray(r.image, mode="RGB").save(out_dir / rel, optimize=False, compress_level=6)
        rows.append((rel, r.y_cell, r.y_domain, r.dataset, r.split))
    path = out_dir / name
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        w.writerows(rows)
    if manifest.mean is None:
        compute_stats(manifest)
    (out_dir / "stats.json").write_text(json.dumps(
        {"mean": list(manifest.mean), "std": list(manifest.std), "cap": manifest.cap}, indent=2) + "\n")
    return path


def read_manifest(path, cap: int | None = 1600, seed: int = 0) -> Manifest:
    path = Path(path)
    records = []
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"{path}: missing columns {sorted(missing)}")
            for line, row in enumerate(reader, start=2):
                try:
                    y_c, y_d = int(row["y_C"]), int(row["y_D"])
                except ValueError:
                    raise DataError(f"{path}:{line}: labels must be integers") from None
                if y_c not in (0, 1) or y_d not in (0, 1):
                    raise DataError(f"{path}:{line}: labels must be 0 or 1")
                records.append(Record(y_c, y_d, row["dataset"], row["split"] or "train", path=row["path"]))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    m = Manifest(records, root=path.parent, cap=cap or 1600)
    stats = path.parent / "stats.json"
    if stats.exists():
        meta = json.loads(stats.read_text())
        m.mean, m.std = tuple(meta["mean"]), tuple(meta["std"])
    return apply_cap(m, cap, seed) if cap else m


# -- preprocessing ---------------------------------------------------------------


def decode(record: Record, root: Path | None = None) -> np.ndarray:
    """H×W×3 uint8 pixels of a record."""
    if record.image is not None:
        img = np.asarray(record.image)
    else:
        from PIL import Image, UnidentifiedImageError

        p = Path(record.path)
        if root is not None and not p.is_absolute():
            p = root / p
        try:
            with Image.open(p) as im:
                img = np.asarray(im)
        except (OSError, UnidentifiedImageError) as exc:
            raise DataError(f"cannot decode {p}: {exc}") from exc
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"{record.path or 'inline image'}: expected 3 channels, got shape {img.shape}")
    return img


def center_fit(img: np.ndarray, size: int) -> np.ndarray:
    """Centre-crop or zero-pad an H×W×C array to size×size."""
    out = img
    for axis in (0, 1):
        n = out.shape[axis]
        if n > size:
            lo = (n - size) // 2
            out = np.take(out, np.arange(lo, lo + size), axis=axis)
        elif n < size:
            before = (size - n) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (before, size - n - before)
            out = np.pad(out, pad)
    return out


def compute_stats(manifest: Manifest, split: str | None = "train") -> tuple[tuple, tuple]:
    """Per-channel mean/std over the [0, 1]-scaled pixels of ``split`` (all records if None); stored on the manifest."""
    total = np.zeros(3)
    sq = np.zeros(3)
    count = 0
    for r in manifest.records:
        if split is not None and r.split != split:
            continue
        x = decode(r, manifest.root).astype(np.float64) / 255.0
        total += x.sum(axis=(0, 1))
        sq += (x * x).sum(axis=(0, 1))
        count += x.shape[0] * x.shape[1]
    if count == 0:
        raise DataError(f"no records in split {split!r} to compute statistics")
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean ** 2, 1e-12))
    manifest.mean, manifest.std = tuple(mean.tolist()), tuple(std.tolist())
    return manifest.mean, manifest.std


def load_and_preprocess(record: Record, size: int, mean=None, std=None, root: Path | None = None,
                        dtype=np.float32) -> np.ndarray:
    """Decode, centre-fit to size×size, scale to [0, 1], normalize per channel; returns 3×S×S."""
    x = center_fit(decode(record, root), size).astype(np.float64) / 255.0
    if mean is not None:
        x = (x - np.asarray(mean)) / np.asarray(std)
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=dtype)


def load_arrays(manifest: Manifest, size: int, dtype=np.float32, workers: int = 1) -> np.ndarray:
    """N×3×S×S array for every record; order always follows the manifest regardless of ``workers``."""
    if manifest.mean is None:
        raise DataError("manifest has no normalization statistics; call compute_stats first")

    def one(r):
        return load_and_preprocess(r, size, manifest.mean, manifest.std, manifest.root, dtype)

    if not manifest.records:
        return np.zeros((0, 3, size, size), dtype=dtype)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, manifest.records))
    else:
        rows = [one(r) for r in manifest.records]
    return np.stack(rows)


def augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random flips and 90-degree rotations, one draw per image."""
    out = images.copy()
    for i in range(len(out)):
        k = int(rng.integers(4))
        img = np.rot90(out[i], k, axes=(1, 2))
        if rng.random() < 0.5:
            img = img[:, :, ::-1]
        out[i] = img
    return out


# -- balanced sampling -----------------------------------------------------------


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray
    labels: BatchLabels


class BalancedSampler:
    """Batches with exactly batch_size/4 samples from each (domain, cell label) stratum.

    Each epoch draws every stratum without replacement in a fresh seeded
    order and ends when the smallest stratum runs out, so all strata are
    used equally often.
    """

    def __init__(self, y_cell: Sequence[int], y_domain: Sequence[int], batch_size: int, seed: int = 0):
        if batch_size <= 0 or batch_size % 4:
            raise DataError(f"batch_size must be a positive multiple of 4, got {batch_size}")
        y_cell = np.asarray(y_cell)
        y_domain = np.asarray(y_domain)
        self.batch_size = batch_size
        self.per_stratum = batch_size // 4
        self.seed = seed
        self.strata = []
        for d, c in STRATA:
            idx = np.flatnonzero((y_domain == d) & (y_cell == c))
            if idx.size == 0:
                raise DataError(f"empty stratum: y_D={d}, y_C={c}")
            self.strata.append(idx)
        self.batches_per_epoch = min(len(s) for s in self.strata) // self.per_stratum
        if self.batches_per_epoch == 0:
            small = min(range(4), key=lambda k: len(self.strata[k]))
            d, c = STRATA[small]
            raise DataError(f"stratum y_D={d}, y_C={c} has fewer than {self.per_stratum} samples")

    def epoch(self, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.seed, epoch])
        orders = [rng.permutation(s) for s in self.strata]
        k = self.per_stratum
        return [np.concatenate([o[b * k:(b + 1) * k] for o in orders]) for b in range(self.batches_per_epoch)]

    def __iter__(self) -> Iterator[np.ndarray]:
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


def balanced_batches(images: np.ndarray, y_cell, y_domain, batch_size: int, seed: int = 0,
                     epoch: int = 0, training: bool = True) -> Iterator[Batch]:
    """One epoch of :class:`Batch` objects; target labels are hidden when ``training``."""
    y_cell = np.asarray(y_cell)
    y_domain = np.asarray(y_domain)
    sampler = BalancedSampler(y_cell, y_domain, batch_size, seed)
    for idx in sampler.epoch(epoch):
        labels = BatchLabels(y_cell[idx], y_domain[idx],
                             y_domain[idx] == 0 if training else np.ones(len(idx), dtype=bool))
        yield Batch(idx, images[idx], labels)
