import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from inbd.errors import ShapeMismatch, TooSmall
from inbd.model import SegNet
from inbd.segmentation import (DICE_EPS, LOSS_WEIGHTS, NetClassifier, SegMaps, block_max,
                               boundary_mask, dice_loss, downscale, make_targets,
                               quarter_targets, segmentation_loss, upscale)
from inbd.training import finite_diff_check


def sigmoid(z):
    return 1 / (1 + math.exp(-z))


def scalar_bce(z, t):
    p = sigmoid(z)
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


def scalar_seg_loss(z, t):
    """Loop-based reference for the three-term loss on (3, H, W) nested lists."""
    _, h, w = z.shape
    n = h * w
    bg = sum(scalar_bce(z[0, r, c], t[0, r, c]) for r in range(h) for c in range(w)) / n
    ct = sum(scalar_bce(z[2, r, c], t[2, r, c]) for r in range(h) for c in range(w)) / n
    pt = pp = tt = 0.0
    for r in range(h):
        for c in range(w):
            p = sigmoid(z[1, r, c])
            pt += p * t[1, r, c]
            pp += p * p
            tt += t[1, r, c] ** 2
    dice = 1 - 2 * pt / (pp + tt + DICE_EPS)
    return 0.01 * bg + 1.0 * dice + 0.1 * ct


def test_loss_weights():
    assert LOSS_WEIGHTS == (0.01, 1.0, 0.1)


def test_dice_perfect_and_disjoint():
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert dice_loss(t, t).item() == pytest.approx(0.0, abs=1e-6)
    assert dice_loss(1 - t, t).item() == pytest.approx(1.0)


def test_dice_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dice_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_segmentation_loss_matches_scalar_reference():
    rng = np.random.default_rng(0)
    z = rng.normal(0, 2, (3, 5, 4))
    t = (rng.uniform(size=(3, 5, 4)) < 0.4).astype(float)
    assert segmentation_loss(z, t).item() == pytest.approx(scalar_seg_loss(z, t), rel=1e-12)


def test_segmentation_loss_term_weights():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 4, 4))
    t = (rng.uniform(size=(3, 4, 4)) < 0.5).astype(float)
    only = [segmentation_loss(z, t, weights=w).item()
            for w in [(1, 0, 0), (0, 1, 0), (0, 0, 1)]]
    total = segmentation_loss(z, t).item()
    assert total == pytest.approx(0.01 * only[0] + 1.0 * only[1] + 0.1 * only[2], rel=1e-12)


def test_segmentation_loss_rejects_bad_shapes():
    with pytest.raises(ShapeMismatch):
        segmentation_loss(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))
    with pytest.raises(ShapeMismatch):
        segmentation_loss(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)))


def test_segmentation_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    z = torch.tensor(rng.normal(0, 1.5, (3, 6, 6)), dtype=torch.float64, requires_grad=True)
    t = torch.tensor((rng.uniform(size=(3, 6, 6)) < 0.4).astype(float))
    err = finite_diff_check(lambda: segmentation_loss(z, t), [z], epsilon=1e-6)
    assert err <= 1e-4


# --- targets ----------------------------------------------------------------------------

def test_boundary_mask_is_dilated_label_change():
    labels = np.zeros((9, 9), int)
    labels[:, 5:] = 1
    mask = boundary_mask(labels)
    # change pixels are columns 4 and 5, dilation adds 3 and 6
    assert np.array_equal(np.where(mask.any(axis=0))[0], [3, 4, 5, 6])
    assert mask[:, 3:7].all()


def test_make_targets_channels():
    labels = np.array([[0, 1, 1], [0, 1, 2], [2, 2, 2]])
    t = make_targets(labels)
    assert np.array_equal(t.background, labels == 0)
    assert np.array_equal(t.center, labels == 1)
    assert t.as_array().shape == (3, 3, 3)


# --- scaling ----------------------------------------------------------------------------

def block_mean_oracle(img, k=4):
    h, w = img.shape
    out = np.zeros((math.ceil(h / k), math.ceil(w / k)))
    for r in range(out.shape[0]):
        for c in range(out.shape[1]):
            out[r, c] = img[r * k:(r + 1) * k, c * k:(c + 1) * k].mean()
    return out


@pytest.mark.parametrize("shape", [(8, 8), (13, 10), (17, 31)])
def test_downscale_is_block_mean(shape):
    img = np.random.default_rng(3).uniform(size=shape)
    np.testing.assert_allclose(downscale(img), block_mean_oracle(img), rtol=1e-12, atol=1e-12)


def test_downscale_rgb_and_too_small():
    img = np.random.default_rng(4).uniform(size=(12, 16, 3))
    out = downscale(img)
    assert out.shape == (3, 4, 3)
    np.testing.assert_allclose(out[..., 1], block_mean_oracle(img[..., 1]))
    with pytest.raises(TooSmall):
        downscale(np.zeros((7, 20)))


def test_block_max_is_blockwise_any():
    m = np.zeros((9, 9), bool)
    m[8, 0] = True
    out = block_max(m)
    assert out.shape == (3, 3)
    assert out[2, 0] and out.sum() == 1


def test_upscale_shape_and_constants():
    maps = np.full((3, 4, 5), 0.3, np.float32)
    out = upscale(maps, (15, 19))
    assert out.shape == (3, 15, 19)
    np.testing.assert_allclose(out, 0.3, atol=1e-6)


def test_quarter_targets_shape():
    labels = np.zeros((20, 24), int)
    labels[5:15, 5:15] = 1
    q = quarter_targets(make_targets(labels))
    assert q.shape == (3, 5, 6)
    assert q[1].max() == 1.0


def test_net_classifier_contract():
    torch.manual_seed(0)
    seg = NetClassifier(SegNet((4, 8)))(np.random.default_rng(5).uniform(size=(30, 34, 3)))
    assert isinstance(seg, SegMaps) and seg.shape == (30, 34)
    for m in (seg.background, seg.boundaries, seg.center):
        assert np.all((m >= 0) & (m <= 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 40), st.integers(8, 40), st.floats(0, 1))
def test_downscale_preserves_constants(h, w, v):
    np.testing.assert_allclose(downscale(np.full((h, w), v)), v, atol=1e-12)


def test_perfect_prediction_loss_is_tiny():
    t = (np.random.default_rng(6).uniform(size=(3, 8, 8)) < 0.5).astype(float)
    z = np.where(t > 0, 50.0, -50.0)
    assert 0 <= segmentation_loss(z, t).item() <= 3 * DICE_EPS
