"""Domain cross-entropy, target-masked cell cross-entropy, and their weighted total.

The cell loss is the two-case binary cross-entropy on the *cell* probability
for source samples and exactly zero for target samples. The total is::

    gamma / n_source * sum(cell terms) + sum(domain terms)

with the domain sum left unnormalized unless ``normalize_domain`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError


@dataclass
class LossConfig:
    gamma: float = 1.0
    eps: float = 1e-7
    normalize_domain: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0 < self.eps < 0.5:
            raise ValueError(f"eps must lie in (0, 0.5), got {self.eps}")


@dataclass
class BatchLabels:
    y_cell: np.ndarray
    y_domain: np.ndarray
    label_visible: np.ndarray

    @classmethod
    def for_training(cls, y_cell, y_domain) -> BatchLabels:
        y_domain = np.asarray(y_domain, dtype=np.int64)
        return cls(np.asarray(y_cell, dtype=np.int64), y_domain, y_domain == 0)

    def visible_cell_labels(self) -> np.ndarray:
        """Cell labels with every hidden entry replaced by 0, so hidden values never reach a loss."""
        return np.where(self.label_visible, self.y_cell, 0)


# Incremented whenever a batch without source samples reaches total_loss.
zero_source_batches = 0


def _check(p: Tensor, *labels) -> None:
    for y in labels:
        if len(y) != p.shape[0] or p.ndim != 1:
            raise ShapeError(f"length mismatch: probabilities {p.shape} vs labels {np.shape(y)}")


def _bce_terms(p: Tensor, y: np.ndarray, eps: float) -> Tensor:
    pc = T.clamp(p, eps, 1.0 - eps)
    return T.where(np.asarray(y) == 1, -T.log(pc), -T.log(1.0 - pc))


def domain_loss(p_domain: Tensor, y_domain, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum over the batch of -log(p) for target samples and -log(1-p) for source samples."""
    y_domain = np.asarray(y_domain)
    _check(p_domain, y_domain)
    return T.tsum(_bce_terms(p_domain, y_domain, cfg.eps))


def cell_loss_terms(p_cell: Tensor, y_cell, y_domain, cfg: LossConfig = LossConfig(),
                    label_visible=None) -> Tensor:
    """Per-sample cell cross-entropy, exactly zero wherever y_domain == 1 or the label is hidden."""
    y_cell = np.asarray(y_cell)
    y_domain = np.asarray(y_domain)
    _check(p_cell, y_cell, y_domain)
    use = y_domain == 0
    if label_visible is not None:
        use &= np.asarray(label_visible, dtype=bool)
    y_eff = np.where(use, y_cell, 0)
    zeros = Tensor(np.zeros(p_cell.shape, dtype=p_cell.dtype))
    return T.where(use, _bce_terms(p_cell, y_eff, cfg.eps), zeros)


def total_loss(cell_terms: Tensor, domain_sum: Tensor, y_domain, cfg: LossConfig = LossConfig()) -> Tensor:
    """Source-count-normalized, gamma-weighted cell sum plus the domain sum.

    A batch with no source sample contributes a zero classification term
    (still wired into the graph so cell-head gradients are exact zeros) and
    bumps :data:`zero_source_batches`.
    """
    global zero_source_batches
    y_domain = np.asarray(y_domain)
    n_source = int((1 - y_domain).sum())
    cell_sum = T.tsum(cell_terms)
    if n_source > 0:
        cls_term = cell_sum * (cfg.gamma / n_source)
    else:
        zero_source_batches += 1
        cls_term = cell_sum * 0.0
    dom = domain_sum * (1.0 / len(y_domain)) if cfg.normalize_domain else domain_sum
    return cls_term + dom


def batch_losses(p_cell: Tensor, p_domain: Tensor, labels: BatchLabels,
                 cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor, Tensor]:
    """(total, cell sum, domain sum) for one batch with label suppression applied."""
    terms = cell_loss_terms(p_cell, labels.visible_cell_labels(), labels.y_domain, cfg, labels.label_visible)
    dom = domain_loss(p_domain, labels.y_domain, cfg)
    return total_loss(terms, dom, labels.y_domain, cfg), T.tsum(terms), dom
