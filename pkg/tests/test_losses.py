import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from armsight.losses import (
    EPS, ClassWeights, LossWeights, base_coord_loss, class_weights, combined_loss,
    joint_coord_loss, mask_loss, type_loss, weighted_final,
)


def mask_with_fraction(frac, shape=(10, 10)):
    m = np.zeros(shape)
    m.flat[: int(round(frac * m.size))] = 1
    return m


class TestClassWeights:
    def test_ten_percent(self):
        w = class_weights(mask_with_fraction(0.1))
        assert w.w_fg == pytest.approx(10.0, rel=1e-12)
        assert w.w_bg == pytest.approx(1 / 0.9, rel=1e-12)

    def test_empty_mask_is_finite(self):
        w = class_weights(np.zeros((5, 5)))
        assert w.w_fg == pytest.approx(1 / EPS) and math.isfinite(w.w_bg)

    @pytest.mark.parametrize("frac,lo,hi", [(0.06, 16.6, 16.7), (0.17, 5.88, 5.89)])
    def test_reference_band(self, frac, lo, hi):
        w = class_weights(mask_with_fraction(frac))
        assert lo <= w.w_fg <= hi


class TestMaskLoss:
    def test_truth_is_near_zero(self):
        gt = np.clip(mask_with_fraction(0.2), EPS, 1 - EPS)
        w = class_weights(gt)
        value, _ = mask_loss(gt, gt)
        assert 0 <= value <= w.w_fg * EPS * 40

    def test_closed_form_half(self):
        gt = mask_with_fraction(0.5)
        value, _ = mask_loss(np.full((10, 10), 0.5), gt, ClassWeights(2.0, 2.0, 0.5))
        assert value == pytest.approx(2 * math.log(2), rel=1e-6)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            mask_loss(np.full((2, 2), 1.2), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            mask_loss(np.full((2, 2), np.nan), np.zeros((2, 2)))

    def test_saturated_estimates_clipped(self):
        value, grad = mask_loss(np.ones((3, 3)), np.zeros((3, 3)) + EPS)
        assert math.isfinite(value) and np.isfinite(grad).all()

    def test_literal_form_is_linear_in_estimate(self):
        gt = np.clip(mask_with_fraction(0.3), EPS, 1 - EPS)
        w = class_weights(gt)
        a, _ = mask_loss(np.full((10, 10), 0.2), gt, w, literal=True)
        b, _ = mask_loss(np.full((10, 10), 0.4), gt, w, literal=True)
        c, _ = mask_loss(np.full((10, 10), 0.6), gt, w, literal=True)
        assert b - a == pytest.approx(c - b, rel=1e-9)

    def test_heavier_foreground_weight_costs_more(self):
        """The same miss on a foreground pixel costs more when fg is rarer."""
        deltas = []
        for frac in (0.06, 0.17):
            gt = np.clip(mask_with_fraction(frac), EPS, 1 - EPS)
            right = np.clip(gt, 0.01, 0.99)
            wrong = right.copy()
            wrong.flat[0] = 0.1  # pixel 0 is foreground
            deltas.append(mask_loss(wrong, gt)[0] - mask_loss(right, gt)[0])
        assert deltas[0] > deltas[1] > 0

    @settings(max_examples=40, deadline=None)
    @given(arrays(float, (6, 5), elements=st.floats(0.01, 0.99)), st.integers(0, 29))
    def test_nonnegative_and_bounded_by_pixelwise_minimiser(self, est, n_fg):
        gt = np.zeros((6, 5))
        gt.flat[:n_fg] = 1
        gt = np.clip(gt, EPS, 1 - EPS)
        w = class_weights(gt)
        # weighted BCE per pixel is minimised at wf*g / (wf*g + wb*(1-g))
        best = w.w_fg * gt / (w.w_fg * gt + w.w_bg * (1 - gt))
        floor = mask_loss(best, gt, w)[0]
        assert mask_loss(est, gt, w)[0] >= floor - 1e-12 and floor >= 0

    def test_gradient_finite_differences(self):
        from armsight.gradsuite import check_losses
        for r in check_losses(7):
            assert r.max_error < 1e-6, r


class TestCoordinateLosses:
    def test_joint_345(self):
        gt = np.zeros((6, 3))
        est = gt.copy()
        est[2] = (0.03, 0, 0.04)
        value, grad = joint_coord_loss(est, gt)
        assert value == pytest.approx(0.05 / 6, rel=1e-12)
        assert np.allclose(grad[2], np.array([0.6, 0, 0.8]) / 6)
        assert not grad[[0, 1, 3, 4, 5]].any()

    def test_base_122(self):
        value, grad = base_coord_loss(np.array([1.0, 2.0, 2.0]), np.zeros(3))
        assert value == 3.0
        assert np.allclose(grad, [1 / 3, 2 / 3, 2 / 3])

    def test_zero_at_coincidence(self):
        x = np.random.default_rng(0).normal(size=(6, 3))
        v, g = joint_coord_loss(x, x)
        assert v == 0 and not g.any()
        v, g = base_coord_loss(x[0], x[0])
        assert v == 0 and not g.any()

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, (6, 3), elements=st.floats(-3, 3)),
           arrays(float, (6, 3), elements=st.floats(-3, 3)))
    def test_nonnegative(self, a, b):
        assert joint_coord_loss(a, b)[0] >= 0

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, 3, elements=st.floats(-3, 3)), st.integers(0, 2),
           st.floats(1e-3, 1.0))
    def test_perturbation_strictly_increases(self, gt, axis, delta):
        est = gt.copy()
        est[axis] += delta
        assert base_coord_loss(est, gt)[0] > base_coord_loss(gt, gt)[0]


class TestTypeLoss:
    def test_uniform_is_ln3(self):
        v, _ = type_loss(np.full(3, 1 / 3), np.array([0.0, 1.0, 0.0]))
        assert abs(v - math.log(3)) < 1e-12

    def test_truth_is_near_zero(self):
        v, _ = type_loss(np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))
        assert 0 <= v < 2e-7

    def test_rejects_unnormalised(self):
        with pytest.raises(ValueError):
            type_loss(np.array([0.5, 0.5, 0.5]), np.array([1.0, 0, 0]))


def outputs_and_labels(rng, B=3, H=6, W=5):
    masks = np.clip((rng.uniform(size=(B, H, W)) < 0.3).astype(float), EPS, 1 - EPS)
    q = rng.dirichlet(np.ones(3), size=B)
    out = {"mask_prob": rng.uniform(0.05, 0.95, (B, H, W)), "joints": rng.normal(size=(B, 18)),
           "base": rng.normal(size=(B, 3)), "type_prob": q}
    labels = {"masks": masks, "joints": rng.normal(size=(B, 18)), "bases": rng.normal(size=(B, 3)),
              "types": np.eye(3)[rng.integers(0, 3, B)]}
    return out, labels


class TestCombined:
    def test_unit_components(self):
        assert weighted_final((1.0, 1.0, 1.0, 1.0), LossWeights()) == 4.3

    def test_default_weights(self):
        assert LossWeights() == LossWeights(1.0, 1.5, 1.5, 0.3)

    def test_reconstruction_exact(self):
        out, labels = outputs_and_labels(np.random.default_rng(0))
        b, _ = combined_loss(out, labels)
        recon = 1.0 * b.l_mask + 1.5 * b.l_jcoords + 1.5 * b.l_bcoords + 0.3 * b.l_type
        assert abs(b.l_final - recon) <= 1e-12

    def test_projection_to_mask(self):
        out, labels = outputs_and_labels(np.random.default_rng(1))
        b, g = combined_loss(out, labels, LossWeights(1.0, 0.0, 0.0, 0.0))
        assert b.l_final == b.l_mask
        assert not g["joints"].any() and not g["type_prob"].any()

    def test_doubling_weights_doubles_everything(self):
        out, labels = outputs_and_labels(np.random.default_rng(2))
        b1, g1 = combined_loss(out, labels)
        b2, g2 = combined_loss(out, labels, LossWeights().scaled(2.0))
        assert b2.l_final == pytest.approx(2 * b1.l_final, rel=1e-14)
        for k in g1:
            assert np.allclose(g2[k], 2 * g1[k], rtol=1e-14, atol=0)

    def test_batch_mean(self):
        rng = np.random.default_rng(3)
        out, labels = outputs_and_labels(rng)
        b, _ = combined_loss(out, labels)
        per = [combined_loss({k: v[i:i + 1] for k, v in out.items()},
                             {k: v[i:i + 1] for k, v in labels.items()})[0].l_final
               for i in range(3)]
        assert b.l_final == pytest.approx(np.mean(per), rel=1e-12)

    def test_zero_at_truth(self):
        rng = np.random.default_rng(4)
        _, labels = outputs_and_labels(rng)
        out = {"mask_prob": labels["masks"], "joints": labels["joints"], "base": labels["bases"],
               "type_prob": labels["types"]}
        b, _ = combined_loss(out, labels)
        assert b.l_jcoords == 0 and b.l_bcoords == 0
        assert b.l_type < 2e-7 and b.l_mask < 1e-3

    @pytest.mark.parametrize("w", [(0, 0, 0, 0), (-1, 1, 1, 1)])
    def test_invalid_weights(self, w):
        with pytest.raises(ValueError):
            LossWeights(*w)
