"""Latent-space inspection: stem features, exact t-SNE, kNN domain gap, plot-data export."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class EmbeddingSet:
    features: np.ndarray                 # N×d
    dataset: list[str]
    y_cell: np.ndarray
    y_domain: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.y_cell = np.asarray(self.y_cell, dtype=np.int64)
        self.y_domain = np.asarray(self.y_domain, dtype=np.int64)
        n = len(self.features)
        if self.features.ndim != 2:
            raise ValueError(f"features must be N×d, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")
        if not (len(self.dataset) == len(self.y_cell) == len(self.y_domain) == n):
            raise ValueError("metadata length does not match the number of feature rows")


def extract_features(checkpoint_or_model, manifest=None, images: np.ndarray | None = None,
                     batch_size: int = 1) -> EmbeddingSet:
    """Eval-mode stem features for every record of ``manifest`` (or for raw ``images``)."""
    from .data import load_arrays
    from .model import DannModel, load_checkpoint

    model = checkpoint_or_model
    if not isinstance(model, DannModel):
        model, _, _ = load_checkpoint(model)
    dtype = model.parameters()[0].dtype
    if images is None:
        images = load_arrays(manifest, model.cfg.patch_size, dtype)
    feats = model.extract(np.asarray(images, dtype=dtype), batch_size)
    if manifest is not None:
        y_cell, y_domain = manifest.labels()
        names = manifest.datasets()
    else:
        y_cell = y_domain = np.zeros(len(feats), dtype=np.int64)
        names = [""] * len(feats)
    return EmbeddingSet(feats, names, y_cell, y_domain)


# -- t-SNE -----------------------------------------------------------------------


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    dims: int = 2
    iterations: int = 1000
    learning_rate: float = 200.0
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    seed: int = 0
    tol: float = 1e-4
    max_search: int = 50


@dataclass
class TsneResult:
    embedding: np.ndarray
    perplexities: np.ndarray             # achieved per-point perplexity
    kl_history: dict[int, float] = field(default_factory=dict)


class PerplexityError(ValueError):
    pass


def _sq_dists(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_probabilities(x: np.ndarray, perplexity: float, tol: float = 1e-4,
                              max_iter: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic P(j|i) with Gaussian bandwidths found by bisection on log(precision).

    Returns (P, achieved perplexities). Raises PerplexityError when any row
    misses the target by ``tol`` or more after ``max_iter`` steps.
    """
    n = len(x)
    d = _sq_dists(np.asarray(x, dtype=np.float64))
    off = ~np.eye(n, dtype=bool)
    dd = d[off].reshape(n, n - 1)
    dd = dd - dd.min(axis=1, keepdims=True)
    # scale so the initial precision is O(1) whatever the units
    scale = np.median(dd, axis=1, keepdims=True)
    scale[scale <= 0] = 1.0
    dd = dd / scale
    target = np.log(perplexity)
    log_beta = np.zeros(n)
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    done = np.zeros(n, dtype=bool)
    perp = np.zeros(n)
    p = np.zeros_like(dd)
    for _ in range(max_iter):
        beta = np.exp(log_beta)[:, None]
        w = np.exp(-beta * dd)
        sw = w.sum(axis=1)
        h = np.log(sw) + beta[:, 0] * (dd * w).sum(axis=1) / sw
        cur = np.exp(h)
        ok = np.abs(cur - perplexity) < tol
        upd = ~done
        p[upd] = (w / sw[:, None])[upd]
        perp[upd] = cur[upd]
        done |= ok
        if done.all():
            break
        too_flat = (h > target) & ~done     # entropy too high: sharpen
        too_sharp = (h <= target) & ~done
        lo[too_flat] = log_beta[too_flat]
        hi[too_sharp] = log_beta[too_sharp]
        both = np.isfinite(lo) & np.isfinite(hi)
        nxt = np.where(both, (lo + hi) / 2,
                       np.where(np.isfinite(lo), log_beta + 2.0, log_beta - 2.0))
        log_beta = np.where(done, log_beta, nxt)
    if not done.all():
        worst = float(np.abs(perp - perplexity).max())
        raise PerplexityError(f"perplexity calibration failed: worst deviation {worst:.3g} >= {tol}")
    full = np.zeros((n, n))
    full[off] = p.reshape(-1)
    return full, perp


def joint_probabilities(x: np.ndarray, perplexity: float, tol: float = 1e-4, max_iter: int = 50):
    cond, perp = conditional_probabilities(x, perplexity, tol, max_iter)
    n = len(x)
    p = (cond + cond.T) / (2.0 * n)
    return np.maximum(p, 1e-12), perp


def _kl(p: np.ndarray, y: np.ndarray) -> float:
    num = 1.0 / (1.0 + _sq_dists(y))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    mask = ~np.eye(len(p), dtype=bool)
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def tsne(embedding, cfg: TsneConfig = TsneConfig(), record_every: int = 50) -> TsneResult:
    """Exact t-SNE with early exaggeration, momentum and per-coordinate gains."""
    x = embedding.features if isinstance(embedding, EmbeddingSet) else np.asarray(embedding, dtype=np.float64)
    n = len(x)
    if n < 3 * cfg.perplexity + 1:
        raise PerplexityError(f"need at least {int(3 * cfg.perplexity + 1)} points for perplexity "
                              f"{cfg.perplexity}, got {n}")
    if cfg.perplexity < 1:
        raise PerplexityError("perplexity must be >= 1")
    if n > 5000:
        raise ValueError("exact t-SNE is limited to 5000 points")
    p, perp = joint_probabilities(x, cfg.perplexity, cfg.tol, cfg.max_search)
    rng = np.random.default_rng(cfg.seed)
    y = rng.normal(0.0, 1e-4, size=(n, cfg.dims))
    vel = np.zeros_like(y)
    gains = np.ones_like(y)
    history: dict[int, float] = {}
    for it in range(1, cfg.iterations + 1):
        exag = cfg.exaggeration if it <= cfg.exaggeration_iters else 1.0
        momentum = 0.5 if it <= cfg.exaggeration_iters else 0.8
        num = 1.0 / (1.0 + _sq_dists(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq = (exag * p - q) * num
        grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)
        same = np.sign(grad) == np.sign(vel)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        vel = momentum * vel - cfg.learning_rate * gains * grad
        y = y + vel
        y = y - y.mean(axis=0)
        if it % record_every == 0 or it in (cfg.exaggeration_iters, cfg.iterations):
            history[it] = _kl(p, y)
    return TsneResult(y, perp, history)


# -- nearest-neighbour domain gap ----------------------------------------------


def _row_groups(x: np.ndarray) -> np.ndarray:
    """Integer id per row; byte-identical rows share an id."""
    ids: dict[bytes, int] = {}
    out = np.empty(len(x), dtype=np.int64)
    for i, row in enumerate(np.ascontiguousarray(x)):
        key = hashlib.blake2b(row.tobytes(), digest_size=16).digest()
        out[i] = ids.setdefault(key, len(ids))
    return out


def knn_predict(train_x, train_y, test_x, k: int = 5) -> np.ndarray:
    """Majority vote of the k nearest training rows (Euclidean).

    Equal distances are broken by training-row order (stable sort); an even
    split of votes goes to label 0.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    k = min(k, len(train_x))
    tr = (train_x * train_x).sum(axis=1)
    te = (test_x * test_x).sum(axis=1)
    d = te[:, None] + tr[None, :] - 2.0 * test_x @ train_x.T
    np.maximum(d, 0.0, out=d)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    votes = train_y[nn].sum(axis=1)
    return (2 * votes > k).astype(np.int64)


def fold_assignment(x: np.ndarray, folds: int = 5, seed: int = 0) -> np.ndarray:
    """Random fold per row, with exact duplicate rows always placed in the same fold."""
    groups = _row_groups(x)
    n_groups = groups.max() + 1 if len(groups) else 0
    order = np.random.default_rng(seed).permutation(n_groups)
    rank = np.empty(n_groups, dtype=np.int64)
    rank[order] = np.arange(n_groups)
    return rank[groups] % folds


def cross_val_knn(x, y, k: int = 5, folds: int = 5, seed: int = 0) -> np.ndarray:
    """Out-of-fold kNN predictions for every row."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    fold = fold_assignment(x, folds, seed)
    pred = np.empty(len(x), dtype=np.int64)
    for f in range(folds):
        test = fold == f
        if not test.any():
            continue
        pred[test] = knn_predict(x[~test], y[~test], x[test], k)
    return pred


def domain_gap(features, y_domain=None, y_cell=None, k: int = 5, folds: int = 5, seed: int = 0) -> dict:
    """Cross-validated kNN accuracy at telling the two domains apart (0.5 = no visible shift).

    Exact duplicate rows are kept in the same fold, so a sample never meets
    its own copy; with an identical dataset in both domains every neighbour
    pair splits its vote and accuracy sits at chance.
    """
    if isinstance(features, EmbeddingSet):
        y_domain, y_cell, features = features.y_domain, features.y_cell, features.features
    if y_domain is None:
        raise ValueError("domain labels are required")
    y_domain = np.asarray(y_domain, dtype=np.int64)
    if len(np.unique(y_domain)) < 2:
        raise ValueError("domain_gap needs samples from both domains")
    pred = cross_val_knn(features, y_domain, k, folds, seed)
    hit = pred == y_domain
    report = {"accuracy": float(hit.mean()), "n": int(len(hit)), "k": k, "folds": folds,
              "per_domain": {int(d): float(hit[y_domain == d].mean()) for d in (0, 1)}}
    if y_cell is not None:
        y_cell = np.asarray(y_cell)
        report["per_class"] = {int(c): float(hit[y_cell == c].mean()) for c in np.unique(y_cell)}
    return report


# -- export ---------------------------------------------------------------------

EMBEDDING_COLUMNS = ("x", "y", "dataset", "y_C", "y_D")


def export_embedding(coords: np.ndarray, meta: EmbeddingSet, path) -> Path:
    """CSV with columns x, y, dataset, y_C, y_D (floats written with round-trip precision)."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2 or len(coords) != len(meta.y_domain):
        raise ValueError(f"expected N×2 coordinates for {len(meta.y_domain)} rows, got {coords.shape}")
    if len(coords) == 0:
        raise ValueError("nothing to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EMBEDDING_COLUMNS)
        for (a, b), ds, yc, yd in zip(coords, meta.dataset, meta.y_cell, meta.y_domain):
            w.writerow((repr(float(a)), repr(float(b)), ds, int(yc), int(yd)))
    return path


def export_metrics(rows: Sequence[dict], path) -> Path:
    """One CSV row per epoch; columns follow the metric record fields, empty cell for missing values."""
    if not rows:
        raise ValueError("nothing to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c]
                        for c in cols])
    return path


def read_table(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def export_plot_data(data, destination) -> Path:
    """Dispatch: (coords, EmbeddingSet) tuples go to :func:`export_embedding`, metric rows to :func:`export_metrics`."""
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[1], EmbeddingSet):
        return export_embedding(data[0], data[1], destination)
    if hasattr(data, "rows"):
        data = data.rows()
    return export_metrics(list(data), destination)
