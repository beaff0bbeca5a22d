import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import brute_dice, brute_iou
from promptmine.metrics import (
    BatchComposition,
    LossConfig,
    aggregate,
    bce_loss,
    combined_loss,
    dice_loss,
    dice_score,
    iou_score,
)

binary_masks = hnp.arrays(dtype=np.uint8, shape=(8, 8), elements=st.integers(0, 1))


def test_dice_identity_and_disjoint():
    y = np.zeros((4, 4), dtype=np.uint8)
    y[1:3, 1:3] = 1
    assert dice_score(y, y) == 1.0
    other = np.zeros_like(y)
    other[0, 0] = 1
    assert dice_score(y, other) == 0.0


def test_dice_iou_both_empty_convention():
    empty = np.zeros((5, 5), dtype=np.uint8)
    assert dice_score(empty, empty) == 1.0
    assert iou_score(empty, empty) == 1.0


def test_dice_iou_counting_fixture():
    # |y| = 4, |y_hat| = 4, overlap 2 on a 4x4 grid
    y = np.zeros((4, 4), dtype=np.uint8)
    y[0, 0:4] = 1
    y_hat = np.zeros((4, 4), dtype=np.uint8)
    y_hat[0, 2:4] = 1
    y_hat[1, 0:2] = 1
    assert brute_dice(y, y_hat) == 0.5
    assert dice_score(y, y_hat) == 0.5
    assert brute_iou(y, y_hat) == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert iou_score(y, y_hat) == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_score_validation():
    y = np.zeros((3, 3), dtype=np.uint8)
    with pytest.raises(ValueError, match="shape"):
        dice_score(y, np.zeros((2, 3), dtype=np.uint8))
    with pytest.raises(ValueError, match="binary"):
        iou_score(y, np.full((3, 3), 2, dtype=np.uint8))


@settings(max_examples=200, deadline=None)
@given(binary_masks, binary_masks)
def test_scores_match_set_counting_oracle(y, y_hat):
    assert dice_score(y, y_hat) == pytest.approx(brute_dice(y, y_hat), abs=1e-12)
    assert iou_score(y, y_hat) == pytest.approx(brute_iou(y, y_hat), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(binary_masks, binary_masks)
def test_dice_iou_algebraic_identity(y, y_hat):
    d = dice_score(y, y_hat)
    i = iou_score(y, y_hat)
    assert d == pytest.approx(2.0 * i / (1.0 + i), abs=1e-12)
    assert i <= d + 1e-12
    if abs(i - d) < 1e-12:
        assert i in (0.0, 1.0)


def test_dice_loss_perfect_and_inverted():
    g = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert float(dice_loss(g, g)) == pytest.approx(0.0, abs=1e-5)
    zeros = torch.zeros_like(g)
    assert float(dice_loss(zeros, g)) == pytest.approx(1.0, abs=1e-5)


def test_dice_loss_half_probability_fixture():
    # p = 0.5 everywhere on 2x2, g all ones: 1 - (2*2 + eps) / (2 + 4 + eps)
    p = torch.full((2, 2), 0.5, dtype=torch.float64)
    g = torch.ones(2, 2, dtype=torch.float64)
    eps = 1e-6
    expected = 1.0 - (2.0 * 2.0 + eps) / (2.0 + 4.0 + eps)
    assert float(dice_loss(p, g, eps)) == pytest.approx(expected, abs=1e-12)
    assert float(dice_loss(p, g, eps)) == pytest.approx(1.0 / 3.0, abs=1e-5)


def test_dice_loss_validation():
    p = torch.rand(3, 3)
    with pytest.raises(ValueError, match="shape"):
        dice_loss(p, torch.ones(2, 3))
    with pytest.raises(ValueError, match="0, 1"):
        dice_loss(torch.full((2, 2), 1.5), torch.ones(2, 2))


def test_dice_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    h = 1e-4
    for _ in range(5):
        p = torch.rand(8, 8, dtype=torch.float64) * 0.98 + 0.01
        g = (torch.rand(8, 8) > 0.5).double()
        p_var = p.clone().requires_grad_(True)
        dice_loss(p_var, g).backward()
        grad = p_var.grad
        fd = torch.zeros_like(p)
        for r in range(8):
            for c in range(8):
                up, down = p.clone(), p.clone()
                up[r, c] += h
                down[r, c] -= h
                fd[r, c] = (dice_loss(up, g) - dice_loss(down, g)) / (2 * h)
        rel = (grad - fd).abs() / fd.abs().clamp(min=1e-8)
        assert float(rel.max()) < 1e-3


def test_bce_perfect_prediction():
    g = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert float(bce_loss(g, g)) <= 1e-6


def test_bce_half_probability_is_ln2():
    p = torch.full((4, 4), 0.5)
    for g in (torch.zeros(4, 4), torch.ones(4, 4), torch.eye(4)):
        assert float(bce_loss(p, g)) == pytest.approx(math.log(2.0), abs=1e-6)


def test_bce_inverted_prediction_clamped():
    # float64 so the clamp bound 1 - 1e-7 is representable
    g = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    p = 1.0 - g
    expected = -math.log(1e-7)  # 16.1181
    assert float(bce_loss(p, g)) == pytest.approx(expected, rel=1e-6)


def test_combined_loss_reduces_to_supervised_without_pseudo():
    cfg = LossConfig()
    torch.manual_seed(1)
    pairs = [(torch.rand(4, 4), (torch.rand(4, 4) > 0.5).float()) for _ in range(3)]
    full = combined_loss(pairs, [], cfg)
    expected = torch.stack(
        [dice_loss(p, g, cfg.dice_smooth) + cfg.k * bce_loss(p, g) for p, g in pairs]
    ).sum() / len(pairs)
    assert float(full) == pytest.approx(float(expected), abs=1e-12)


def test_combined_loss_hand_arithmetic():
    # independent evaluation of the formula on one labeled + one pseudo pair
    cfg = LossConfig(k=0.2, lambda_pseudo=0.25)
    p1 = torch.tensor([[0.9, 0.2], [0.4, 0.7]])
    g1 = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    p2 = torch.tensor([[0.6, 0.6], [0.1, 0.8]])
    g2 = torch.tensor([[1.0, 1.0], [0.0, 1.0]])

    def hand(p, g):
        p_np, g_np = p.numpy().astype(np.float64), g.numpy().astype(np.float64)
        d = 1.0 - (2.0 * (p_np * g_np).sum() + cfg.dice_smooth) / (p_np.sum() + g_np.sum() + cfg.dice_smooth)
        pc = np.clip(p_np, 1e-7, 1 - 1e-7)
        b = -(g_np * np.log(pc) + (1 - g_np) * np.log(1 - pc)).mean()
        return d + cfg.k * b

    expected = hand(p1, g1) + cfg.lambda_pseudo * hand(p2, g2)
    got = float(combined_loss([(p1, g1)], [(p2, g2)], cfg))
    assert got == pytest.approx(expected, abs=1e-6)


def test_combined_loss_linear_in_lambda():
    torch.manual_seed(2)
    pairs = [
        (torch.rand(4, 4, dtype=torch.float64), (torch.rand(4, 4) > 0.5).double())
        for _ in range(2)
    ]
    base = LossConfig(lambda_pseudo=0.25)
    double = LossConfig(lambda_pseudo=0.5)
    # pseudo-only term doubles exactly
    assert float(combined_loss([], pairs, double)) == 2.0 * float(combined_loss([], pairs, base))
    labeled = [(torch.rand(4, 4, dtype=torch.float64), (torch.rand(4, 4) > 0.5).double())]
    a = float(combined_loss(labeled, pairs, base))
    b = float(combined_loss(labeled, pairs, double))
    sup = float(combined_loss(labeled, [], base))
    assert b - sup == pytest.approx(2.0 * (a - sup), rel=1e-9)


def test_combined_loss_both_empty_raises():
    with pytest.raises(ValueError, match="empty"):
        combined_loss([], [], LossConfig())


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(k=-0.1)
    with pytest.raises(ValueError):
        LossConfig(lambda_pseudo=-1)
    with pytest.raises(ValueError):
        LossConfig(dice_smooth=0.0)


def test_batch_composition_proportional():
    assert BatchComposition.proportional(100, 100, 8) == BatchComposition(4, 4)
    assert BatchComposition.proportional(150, 50, 8) == BatchComposition(6, 2)
    assert BatchComposition.proportional(100, 0, 8) == BatchComposition(8, 0)
    assert BatchComposition.proportional(199, 1, 8) == BatchComposition(7, 1)
    assert BatchComposition.proportional(1, 199, 8) == BatchComposition(1, 7)
    with pytest.raises(ValueError):
        BatchComposition.proportional(0, 10, 8)


def test_aggregate():
    agg = aggregate([0.5, 0.7])
    assert agg["mean"] == pytest.approx(0.6)
    assert agg["std"] == pytest.approx(0.1)
    assert agg["n"] == 2
    assert aggregate([])["n"] == 0
