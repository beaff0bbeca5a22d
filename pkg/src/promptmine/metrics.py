"""Region-overlap metrics and the compound training loss.

Evaluation metrics (Dice, IoU) operate on binary numpy masks. Training
losses operate on torch tensors so the soft Dice term stays differentiable
in the predicted probabilities. The total loss is

    L = (1/B) sum_B (L_Dice + k * L_BCE)
        + lambda * (1/B') sum_B' (L_Dice_pseudo + k * L_BCE_pseudo)

with the pseudo term down-weighted because teacher-generated targets are
less trustworthy than ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch

BCE_CLAMP_EPS = 1e-7


@dataclass
class LossConfig:
    """Scalars governing the compound loss."""

    k: float = 0.2
    lambda_pseudo: float = 0.25
    dice_smooth: float = 1e-6

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.lambda_pseudo < 0:
            raise ValueError(f"lambda_pseudo must be >= 0, got {self.lambda_pseudo}")
        if self.dice_smooth <= 0:
            raise ValueError(f"dice_smooth must be > 0, got {self.dice_smooth}")


@dataclass(frozen=True)
class BatchComposition:
    """How many labeled (B) and pseudo-labeled (B') samples a batch draws."""

    labeled: int
    pseudo: int

    @staticmethod
    def proportional(n_labeled: int, n_unlabeled: int, batch_size: int) -> "BatchComposition":
        """Split a batch proportionally to the dataset sizes, at least one each.

        With no unlabeled data the whole batch is labeled; otherwise both
        counts are clamped to >= 1 so neither loss term starves.
        """
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if n_labeled < 1:
            raise ValueError("mixed batches need at least one labeled sample")
        if n_unlabeled <= 0:
            return BatchComposition(batch_size, 0)
        if batch_size < 2:
            raise ValueError("batch_size must be >= 2 to mix labeled and pseudo samples")
        b = round(batch_size * n_labeled / (n_labeled + n_unlabeled))
        b = min(max(b, 1), batch_size - 1)
        return BatchComposition(b, batch_size - b)


def _binary_array(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    values = np.unique(arr)
    if not np.isin(values, (0, 1)).all():
        raise ValueError(f"{name} must be binary, found values {values[:8]}")
    return arr.astype(bool)


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_score(y, y_hat) -> float:
    """Dice coefficient 2|y∩ŷ| / (|y|+|ŷ|); 1.0 when both masks are empty."""
    a = _binary_array(y, "y")
    b = _binary_array(y_hat, "y_hat")
    _check_shapes(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / total


def iou_score(y, y_hat) -> float:
    """Intersection over union |y∩ŷ| / |y∪ŷ|; 1.0 when both masks are empty."""
    a = _binary_array(y, "y")
    b = _binary_array(y_hat, "y_hat")
    _check_shapes(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return inter / union


def dice_loss(p: torch.Tensor, g: torch.Tensor, smooth: float = 1e-6) -> torch.Tensor:
    """Soft Dice loss 1 - (2*sum(p*g)+smooth) / (sum(p)+sum(g)+smooth)."""
    _check_shapes(p, g)
    p_detached = p.detach()
    if float(p_detached.min()) < 0.0 or float(p_detached.max()) > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    g = g.to(p.dtype)
    inter = (p * g).sum()
    return 1.0 - (2.0 * inter + smooth) / (p.sum() + g.sum() + smooth)


def bce_loss(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Pixel-mean binary cross entropy against probabilities.

    Probabilities are clamped to [eps, 1-eps] with eps=1e-7 before the logs,
    so a maximally wrong prediction yields roughly -ln(eps) instead of inf.
    """
    _check_shapes(p, g)
    g = g.to(p.dtype)
    pc = p.clamp(BCE_CLAMP_EPS, 1.0 - BCE_CLAMP_EPS)
    return -(g * pc.log() + (1.0 - g) * (1.0 - pc).log()).mean()


Pair = Tuple[torch.Tensor, torch.Tensor]


def combined_loss(
    labeled_batch: Sequence[Pair],
    pseudo_batch: Sequence[Pair],
    config: LossConfig,
) -> torch.Tensor:
    """Supervised term plus lambda-weighted pseudo term, each a per-sample mean.

    Either batch may be empty (its term is then zero), but not both.
    """
    if not labeled_batch and not pseudo_batch:
        raise ValueError("both batches are empty")

    def term(batch: Sequence[Pair]) -> torch.Tensor:
        parts = [
            dice_loss(p, g, config.dice_smooth) + config.k * bce_loss(p, g)
            for p, g in batch
        ]
        return torch.stack(parts).sum() / len(parts)

    if labeled_batch and pseudo_batch:
        return term(labeled_batch) + config.lambda_pseudo * term(pseudo_batch)
    if labeled_batch:
        return term(labeled_batch)
    return config.lambda_pseudo * term(pseudo_batch)


def aggregate(values: Sequence[float]) -> dict:
    """Mean and (population) std of a metric series."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}
