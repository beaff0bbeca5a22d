"""Turn a student probability map into teacher prompts.

Guiding points are the highest-probability pixels (ties broken uniformly at
random), the bounding box is the tight outer box of the map thresholded at
0.5, and the optional mask prompt is the raw probability map. Coordinates
are (col, row) with origin at the top-left corner.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import cv2
import numpy as np

PROMPT_MODES = ("points", "box", "points_box", "points_box_mask")
_BOX_MODES = ("box", "points_box", "points_box_mask")

Point = Tuple[int, int]
Box = Tuple[int, int, int, int]


@dataclass
class ProbabilityMask:
    """Per-pixel foreground probabilities produced by the student."""

    probs: np.ndarray
    source_id: str
    threshold: float = 0.5

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError(f"probability map must be H x W, got {self.probs.shape}")
        if not np.isfinite(self.probs).all():
            raise ValueError("probability map contains non-finite values")
        if self.probs.size and (self.probs.min() < 0.0 or self.probs.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")


@dataclass
class PromptSet:
    """Prompts for one teacher consultation."""

    source_id: str
    mode: str
    points: List[Point] = field(default_factory=list)
    point_labels: List[int] = field(default_factory=list)
    box: Optional[Box] = None
    mask_prompt: Optional[np.ndarray] = None

    def to_json_dict(self) -> dict:
        return {
            "sample_id": self.source_id,
            "mode": self.mode,
            "points": [[int(c), int(r)] for c, r in self.points],
            "box": None if self.box is None else [int(v) for v in self.box],
            "has_mask_prompt": self.mask_prompt is not None,
        }


def extract_points(mask: ProbabilityMask, x: int, rng: np.random.Generator) -> List[Point]:
    """Pick the ``x`` highest-probability pixels as positive guiding points.

    All pixels strictly above the x-th largest value are always returned;
    the remainder is drawn uniformly without replacement from the pixels
    tied at that value.
    """
    if x < 1:
        raise ValueError(f"point count must be >= 1, got {x}")
    flat = mask.probs.reshape(-1)
    if x > flat.size:
        raise ValueError(f"requested {x} points from a {flat.size}-pixel map")

    cutoff = np.partition(flat, flat.size - x)[flat.size - x]
    above = np.flatnonzero(flat > cutoff)
    tied = np.flatnonzero(flat == cutoff)
    need = x - above.size
    picked = rng.choice(tied, size=need, replace=False) if need else np.empty(0, dtype=int)

    order = np.concatenate([above, np.sort(picked)])
    order = order[np.argsort(-flat[order], kind="stable")]
    width = mask.probs.shape[1]
    return [(int(i % width), int(i // width)) for i in order]


def extract_box(mask: ProbabilityMask) -> Optional[Box]:
    """Tight (min_col, min_row, max_col, max_row) box over pixels >= threshold.

    Returns None when nothing passes the threshold; the caller decides
    whether that rejects the sample.
    """
    rows, cols = np.nonzero(mask.probs >= mask.threshold)
    if rows.size == 0:
        return None
    return (int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))


def build_prompt_set(
    mask: ProbabilityMask,
    mode: str = "points_box",
    x: int = 3,
    rng: Optional[np.random.Generator] = None,
    mask_prompt_size: Optional[int] = None,
) -> Optional[PromptSet]:
    """Assemble the prompt set for ``mode``; None marks a rejected sample.

    Rejection happens when the mode needs a bounding box but no pixel
    reaches the threshold: prompts built from such maps would point the
    teacher at nothing in particular. ``mask_prompt_size``, when given,
    resizes the mask prompt to the teacher's expected square resolution.
    """
    if mode not in PROMPT_MODES:
        raise ValueError(f"unknown prompt mode {mode!r}, expected one of {PROMPT_MODES}")
    if rng is None:
        rng = np.random.default_rng(0)

    box = extract_box(mask) if mode in _BOX_MODES else None
    if mode in _BOX_MODES and box is None:
        return None

    points: List[Point] = []
    if mode != "box":
        points = extract_points(mask, x, rng)

    mask_prompt = None
    if mode == "points_box_mask":
        mask_prompt = mask.probs.astype(np.float32)
        if mask_prompt_size is not None and mask_prompt.shape != (mask_prompt_size, mask_prompt_size):
            mask_prompt = cv2.resize(
                mask_prompt, (mask_prompt_size, mask_prompt_size), interpolation=cv2.INTER_LINEAR
            )

    return PromptSet(
        source_id=mask.source_id,
        mode=mode,
        points=points,
        point_labels=[1] * len(points),
        box=box,
        mask_prompt=mask_prompt,
    )
