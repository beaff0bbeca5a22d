"""Shared brute-force oracles for the test suite.

These deliberately avoid the library code paths they check: metrics are
recomputed by set counting over coordinate tuples, connected components by
an explicit flood fill.
"""

from __future__ import annotations

from collections import deque

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread_torch():
    torch.set_num_threads(1)
    yield


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def pixel_set(mask) -> set:
    arr = np.asarray(mask)
    return {(int(r), int(c)) for r, c in zip(*np.nonzero(arr))}


def brute_dice(y, y_hat) -> float:
    a, b = pixel_set(y), pixel_set(y_hat)
    if not a and not b:
        return 1.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def brute_iou(y, y_hat) -> float:
    a, b = pixel_set(y), pixel_set(y_hat)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def flood_fill_components(mask) -> tuple:
    """8-connected component labeling via BFS; returns (labels, count)."""
    arr = np.asarray(mask).astype(bool)
    labels = np.zeros(arr.shape, dtype=np.int32)
    current = 0
    h, w = arr.shape
    for sr in range(h):
        for sc in range(w):
            if not arr[sr, sc] or labels[sr, sc]:
                continue
            current += 1
            queue = deque([(sr, sc)])
            labels[sr, sc] = current
            while queue:
                r, c = queue.popleft()
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < h and 0 <= cc < w and arr[rr, cc] and not labels[rr, cc]:
                            labels[rr, cc] = current
                            queue.append((rr, cc))
    return labels, current
