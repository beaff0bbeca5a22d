"""Run-length encoding for binary masks.

Wire format used by pseudo-label files and the remote teacher endpoint:
row-major scan, alternating run counts starting with zeros, so a mask whose
first pixel is foreground encodes as ``[0, n1, ...]``.
"""

from __future__ import annotations

import numpy as np


def encode_mask(mask: np.ndarray) -> dict:
    """Encode a 2-D {0,1} mask as ``{"size": [H, W], "counts": [...]}``."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {arr.shape}")
    flat = (arr.reshape(-1) != 0).astype(np.int8)
    if flat.size == 0:
        return {"size": [int(arr.shape[0]), int(arr.shape[1])], "counts": []}
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts.insert(0, 0)
    return {"size": [int(arr.shape[0]), int(arr.shape[1])], "counts": counts}


def decode_mask(rle: dict) -> np.ndarray:
    """Decode ``encode_mask`` output back to a uint8 {0,1} array."""
    h, w = (int(v) for v in rle["size"])
    counts = rle["counts"]
    total = sum(counts)
    if total != h * w:
        raise ValueError(f"run counts sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for count in counts:
        if value:
            flat[pos : pos + count] = 1
        pos += count
        value = 1 - value
    return flat.reshape(h, w)
