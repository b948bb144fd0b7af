"""Unit and property tests for the loss/mask primitives.

Expected values for the derived cases are computed by independent oracles
inside the tests (scalar python loops, set arithmetic, hand index math),
never by the functions under test.
"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cxrmask import ops

RNG = np.random.default_rng(20240817)


def bce_oracle(truth, pred, eps=ops.BCE_EPS):
    """Scalar-loop BCE, clamping like the implementation."""
    total = 0.0
    for y, p in zip(truth, pred):
        p = min(max(p, eps), 1.0 - eps)
        total += y * math.log(p) + (1.0 - y) * math.log(1.0 - p)
    return -total / len(truth)


def dice_oracle(gt, prob, smooth):
    """Set-arithmetic dice on pixel coordinate sets."""
    a = {tuple(ix) for ix in np.argwhere(np.asarray(gt) == 1)}
    b = {tuple(ix) for ix in np.argwhere(np.asarray(prob) == 1)}
    return (2.0 * len(a & b) + smooth) / (len(a) + len(b) + smooth)


binary_mask = hnp.arrays(
    dtype=np.float64,
    shape=st.tuples(st.integers(1, 8), st.integers(1, 8)),
    elements=st.sampled_from([0.0, 1.0]),
)


class TestBceLoss:
    def test_all_half_predictions(self):
        truth = np.zeros(14)
        truth[0] = 1.0
        pred = np.full(14, 0.5)
        assert ops.bce_loss(truth, pred) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_match_is_near_zero(self):
        truth = RNG.integers(0, 2, size=14).astype(float)
        loss = ops.bce_loss(truth, truth)
        assert 0.0 <= loss <= -math.log(1.0 - ops.BCE_EPS) + 1e-12

    def test_confident_correct_prediction(self):
        # one-hot truth, 0.9 at the positive index and 0.1 elsewhere: every
        # term contributes -log(0.9), so the mean is -log(0.9) ~ 0.10536
        truth = np.zeros(14)
        truth[1] = 1.0
        pred = np.full(14, 0.1)
        pred[1] = 0.9
        expected = bce_oracle(truth, pred)
        assert expected == pytest.approx(-math.log(0.9), abs=1e-12)
        assert ops.bce_loss(truth, pred) == pytest.approx(expected, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ops.bce_loss(np.zeros(14), np.full(13, 0.5))

    @given(
        hnp.arrays(np.float64, 14, elements=st.sampled_from([0.0, 1.0])),
        hnp.arrays(np.float64, 14, elements=st.floats(0.0, 1.0)),
    )
    def test_nonnegative_and_finite(self, truth, pred):
        loss = ops.bce_loss(truth, pred)
        assert loss >= 0.0
        assert math.isfinite(loss)

    def test_gradient_matches_closed_form(self):
        # d/dp of the mean BCE is (p - y) / (c * p * (1 - p)); compare with
        # central finite differences in double precision
        truth = RNG.integers(0, 2, size=14).astype(float)
        pred = RNG.uniform(0.05, 0.95, size=14)
        c = len(pred)
        h = 1e-7
        for i in range(c):
            analytic = (pred[i] - truth[i]) / (c * pred[i] * (1.0 - pred[i]))
            up, down = pred.copy(), pred.copy()
            up[i] += h
            down[i] -= h
            fd = (ops.bce_loss(truth, up) - ops.bce_loss(truth, down)) / (2 * h)
            assert abs(fd - analytic) / max(abs(analytic), 1e-12) < 1e-6

    def test_torch_matches_numpy(self):
        truth = RNG.integers(0, 2, size=14).astype(float)
        pred = RNG.uniform(0.0, 1.0, size=14)
        t = ops.bce_loss(torch.from_numpy(truth), torch.from_numpy(pred))
        assert float(t) == pytest.approx(ops.bce_loss(truth, pred), abs=1e-12)


class TestDiceCoefficient:
    def test_identical_all_ones(self):
        m = np.ones((2, 2))
        assert ops.dice_coefficient(m, m) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_masks(self):
        gt = np.array([[1.0, 1.0], [0.0, 0.0]])
        prob = np.array([[0.0, 0.0], [1.0, 0.0]])
        assert ops.dice_coefficient(gt, prob, smooth=0.0) == 0.0
        # default smoothing shifts the empty intersection to s / (|a|+|b|+s)
        assert ops.dice_coefficient(gt, prob) == pytest.approx(1.0 / 4.0, abs=1e-12)

    def test_two_pixel_one_pixel_overlap(self):
        # gt = {(0,0),(0,1)}, prob = {(0,0)}: dice = 2*1 / (2+1) = 2/3
        gt = np.array([[1.0, 1.0], [0.0, 0.0]])
        prob = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert ops.dice_coefficient(gt, prob, smooth=0.0) == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert ops.dice_coefficient(gt, prob) == pytest.approx(
            dice_oracle(gt, prob, ops.DICE_SMOOTH), abs=1e-12
        )

    def test_both_empty_returns_one(self):
        z = np.zeros((3, 3))
        assert ops.dice_coefficient(z, z) == 1.0

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            ops.dice_coefficient(np.full((2, 2), 0.5), np.ones((2, 2)))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            ops.dice_coefficient(np.ones((2, 2)), np.ones((2, 3)))

    @given(binary_mask, st.data())
    def test_symmetry_range_and_oracle(self, a, data):
        b = data.draw(
            hnp.arrays(np.float64, a.shape, elements=st.sampled_from([0.0, 1.0]))
        )
        d_ab = ops.dice_coefficient(a, b)
        d_ba = ops.dice_coefficient(b, a)
        assert d_ab == d_ba
        assert 0.0 <= d_ab <= 1.0
        assert d_ab == pytest.approx(dice_oracle(a, b, ops.DICE_SMOOTH), abs=1e-12)

    @given(binary_mask)
    def test_identical_nonempty_is_one(self, m):
        if m.sum() > 0:
            assert ops.dice_coefficient(m, m) == pytest.approx(1.0, abs=1e-12)


class TestDiceLoss:
    def test_perfect_binary_prediction(self):
        gt = (RNG.random((4, 4)) > 0.5).astype(float)
        assert ops.dice_loss(gt, gt) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_half_probability(self):
        # 2x2 map, half foreground, prob 0.5 everywhere:
        # soft dice = 2*(0.5*2) / (2 + 2) = 0.5 unsmoothed, loss 0.5;
        # with smooth=1: 1 - (2*1 + 1) / (4 + 1) = 0.4
        gt = np.array([[1.0, 1.0], [0.0, 0.0]])
        prob = np.full((2, 2), 0.5)
        assert ops.dice_loss(gt, prob, smooth=0.0) == pytest.approx(0.5, abs=1e-12)
        assert ops.dice_loss(gt, prob) == pytest.approx(0.4, abs=1e-12)

    def test_complement_prediction(self):
        gt = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert ops.dice_loss(gt, 1.0 - gt, smooth=0.0) == pytest.approx(1.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ops.dice_loss(np.ones((2, 2)), np.ones((4,)))

    def test_gradient_matches_finite_differences(self):
        gt = torch.from_numpy((RNG.random((4, 4)) > 0.5).astype(np.float64))
        prob = torch.from_numpy(RNG.uniform(0.1, 0.9, size=(4, 4)))
        prob.requires_grad_(True)
        loss = ops.dice_loss(gt, prob)
        loss.backward()
        h = 1e-6
        flat_grad = prob.grad.numpy().ravel()
        base = prob.detach().numpy().ravel().copy()
        for k in range(base.size):
            up, down = base.copy(), base.copy()
            up[k] += h
            down[k] -= h
            fd = (
                ops.dice_loss(gt.numpy(), up.reshape(4, 4))
                - ops.dice_loss(gt.numpy(), down.reshape(4, 4))
            ) / (2 * h)
            assert abs(fd - flat_grad[k]) / max(abs(fd), 1e-12) < 1e-4


class TestFeatureWeight:
    def test_identity_mask(self):
        f = RNG.standard_normal((5, 3, 4))
        out = ops.feature_weight(f, np.ones((3, 4)))
        assert np.array_equal(out, f)

    def test_annihilating_mask(self):
        f = RNG.standard_normal((5, 3, 4))
        out = ops.feature_weight(f, np.zeros((3, 4)))
        assert np.array_equal(out, np.zeros_like(f))

    def test_elementwise_definition(self):
        f = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        mask = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = ops.feature_weight(f, mask)
        assert np.array_equal(out, np.array([[[1.0, 0.0], [0.0, 4.0]]]))

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError):
            ops.feature_weight(np.ones((2, 3, 3)), np.ones((4, 4)))

    def test_zeroing_exactness_random(self):
        for _ in range(25):
            f = RNG.standard_normal((6, 5, 7))
            mask = (RNG.random((5, 7)) > 0.5).astype(float)
            out = ops.feature_weight(f, mask)
            assert np.all(out[:, mask == 0] == 0.0)
            assert np.array_equal(out[:, mask == 1], f[:, mask == 1])


class TestMergeMasks:
    def test_single_mask_unchanged(self):
        m = (RNG.random((4, 4)) > 0.5).astype(float)
        assert np.array_equal(ops.merge_masks([m]), m)

    def test_disjoint_union_size(self):
        a = np.zeros((4, 4))
        a[:2] = 1.0
        b = np.zeros((4, 4))
        b[2:] = 1.0
        merged = ops.merge_masks([a, b])
        assert merged.sum() == a.sum() + b.sum()

    def test_empty_list(self):
        with pytest.raises(ValueError):
            ops.merge_masks([])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ops.merge_masks([np.ones((2, 2)), np.ones((3, 3))])

    @given(binary_mask, st.data())
    def test_or_oracle_on_triples(self, a, data):
        shape = a.shape
        elems = st.sampled_from([0.0, 1.0])
        b = data.draw(hnp.arrays(np.float64, shape, elements=elems))
        c = data.draw(hnp.arrays(np.float64, shape, elements=elems))
        merged = ops.merge_masks([a, b, c])
        expected = np.zeros(shape)
        for i in range(shape[0]):
            for j in range(shape[1]):
                expected[i, j] = 1.0 if (a[i, j] or b[i, j] or c[i, j]) else 0.0
        assert np.array_equal(merged, expected)
        assert np.array_equal(merged, ops.merge_masks([c, a, b]))


class TestDownsampleMask:
    def test_constant_masks(self):
        ones = np.ones((224, 224))
        assert np.array_equal(ops.downsample_mask(ones, (7, 7)), np.ones((7, 7)))
        zeros = np.zeros((224, 224))
        assert np.array_equal(ops.downsample_mask(zeros, (7, 7)), np.zeros((7, 7)))

    def test_quadrant_example(self):
        # 4x4 mask, top-left 2x2 quadrant all ones, target 2x2: window means
        # are 1, 0, 0, 0, so exactly one entry survives binarization
        mask = np.zeros((4, 4))
        mask[:2, :2] = 1.0
        out = ops.downsample_mask(mask, (2, 2))
        assert np.array_equal(out, np.array([[1.0, 0.0], [0.0, 0.0]]))

    def test_target_larger_than_source(self):
        with pytest.raises(ValueError):
            ops.downsample_mask(np.ones((4, 4)), (8, 8))

    def test_soft_keeps_fractions(self):
        mask = np.zeros((4, 4))
        mask[0, 0] = 1.0
        out = ops.downsample_mask(mask, (2, 2), soft=True)
        assert out[0, 0] == pytest.approx(0.25)
        assert out[1, 1] == 0.0

    def test_complement_commutes_on_window_constant_masks(self):
        # windows are 2x2 here; fill each window with a constant
        for _ in range(20):
            block = (RNG.random((4, 4)) > 0.5).astype(float)
            mask = np.kron(block, np.ones((2, 2)))
            lhs = ops.downsample_mask(1.0 - mask, (4, 4))
            rhs = 1.0 - ops.downsample_mask(mask, (4, 4))
            assert np.array_equal(lhs, rhs)

    def test_torch_route_matches_numpy(self):
        # window-divisible sizes keep both routes in exact arithmetic
        for _ in range(10):
            mask = (RNG.random((32, 32)) > 0.4).astype(float)
            via_np = ops.downsample_mask(mask, (8, 8))
            via_torch = ops.downsample_mask(torch.from_numpy(mask), (8, 8))
            assert np.array_equal(via_np, via_torch.numpy())

    def test_batched_input(self):
        masks = (RNG.random((3, 16, 16)) > 0.5).astype(float)
        out = ops.downsample_mask(masks, (4, 4))
        assert out.shape == (3, 4, 4)
        for i in range(3):
            assert np.array_equal(out[i], ops.downsample_mask(masks[i], (4, 4)))


class TestBinarize:
    def test_above_threshold(self):
        assert np.array_equal(
            ops.binarize(np.full((2, 2), 0.9), 0.5), np.ones((2, 2))
        )

    def test_below_threshold(self):
        assert np.array_equal(
            ops.binarize(np.full((2, 2), 0.1), 0.5), np.zeros((2, 2))
        )

    def test_boundary_is_one(self):
        assert ops.binarize(np.array([0.5]), 0.5)[0] == 1.0

    def test_threshold_domain(self):
        with pytest.raises(ValueError):
            ops.binarize(np.zeros(3), 0.0)
        with pytest.raises(ValueError):
            ops.binarize(np.zeros(3), 1.0)

    @settings(max_examples=50)
    @given(
        hnp.arrays(
            np.float64,
            st.tuples(st.integers(1, 6), st.integers(1, 6)),
            elements=st.floats(0.0, 1.0),
        ),
        st.floats(0.01, 0.99),
    )
    def test_idempotence(self, p, tau):
        once = ops.binarize(p, tau)
        assert np.array_equal(ops.binarize(once, tau), once)
