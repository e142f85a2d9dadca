import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plab.autodiff import Tensor, grad_check
from plab.autodiff.ops import DegenerateVectorError
from plab.losses import (
    LossConfig,
    arc_margin_loss,
    composite_loss,
    dominant_labels,
    l2_normalize,
    margin_logits,
    softmax_ce,
)

finite = st.floats(-20, 20, allow_nan=False)


def _cosines(rng, n, k):
    return rng.uniform(-0.9, 0.9, size=(n, k))


class TestSoftmaxCE:
    def test_three_logits(self):
        # log(e + e^2 + e^3) - 3, evaluated with math.exp/math.log
        assert softmax_ce(Tensor([[1.0, 2.0, 3.0]]), [2]).item() == pytest.approx(0.40760596444438013, abs=1e-12)

    def test_uniform_logits_give_log_k(self):
        assert softmax_ce(Tensor(np.zeros((3, 7))), [0, 3, 6]).item() == pytest.approx(math.log(7), abs=1e-12)

    def test_soft_label_is_mixture(self):
        # 0.6 * CE(class 0) + 0.4 * CE(class 2) on logits (0.5, -1, 2)
        z = Tensor([[0.5, -1.0, 2.0]])
        assert softmax_ce(z, np.array([[0.6, 0.0, 0.4]])).item() == pytest.approx(1.1413112966571572, abs=1e-12)
        mix = 0.6 * softmax_ce(z, [0]).item() + 0.4 * softmax_ce(z, [2]).item()
        assert softmax_ce(z, np.array([[0.6, 0.0, 0.4]])).item() == pytest.approx(mix, abs=1e-12)

    def test_large_logits_stable(self):
        loss = softmax_ce(Tensor([[1000.0, 0.0]]), [0]).item()
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_bad_soft_rows(self):
        with pytest.raises(ValueError):
            softmax_ce(Tensor(np.zeros((1, 3))), np.array([[0.5, 0.2, 0.2]]))

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_ce(Tensor(np.zeros((1, 3))), [3])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=finite), st.floats(-50, 50))
    def test_shift_invariance(self, z, shift):
        y = [0, 2, 3]
        a = softmax_ce(Tensor(z), y).item()
        b = softmax_ce(Tensor(z + shift), y).item()
        assert a == pytest.approx(b, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 5), elements=finite))
    def test_non_negative(self, z):
        assert softmax_ce(Tensor(z), [1, 4]).item() >= 0.0


class TestL2Normalize:
    def test_scale(self):
        out = l2_normalize(Tensor([[3.0, 4.0]]), 10.0).data
        np.testing.assert_allclose(out, [[6.0, 8.0]])

    def test_zero_vector(self):
        with pytest.raises(DegenerateVectorError):
            l2_normalize(Tensor([[0.0, 0.0]]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10, allow_nan=False)), st.floats(0.1, 50))
    def test_idempotent(self, x, s):
        if np.any(np.linalg.norm(x, axis=1) < 1e-3):
            return
        once = l2_normalize(Tensor(x), s).data
        twice = l2_normalize(Tensor(once), s).data
        np.testing.assert_allclose(twice, once, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(once, axis=1), s, rtol=1e-12)


class TestArcMargin:
    def test_target_logit_at_zero_angle(self):
        z = margin_logits(Tensor([[1.0, 0.0]]), [0], 30.0, 0.5).data
        # exact alignment is clamped to cos = 1 - 1e-9, i.e. theta ~ 4.5e-5 rather than 0
        assert z[0, 0] == pytest.approx(26.32683361353628, abs=1e-9)
        # the clamp moves the logit by under 1e-3 from 30 * cos(0.5) = 26.327476856711183
        assert abs(z[0, 0] - 26.327476856711183) < 1e-3
        assert z[0, 1] == 0.0

    def test_target_logit_at_right_angle(self):
        z = margin_logits(Tensor([[0.0, 0.3]]), [0], 30.0, 0.5).data
        assert z[0, 0] == pytest.approx(-14.38276615812609, abs=1e-9)
        assert z[0, 1] == pytest.approx(9.0)

    def test_loss_value(self):
        # target 30*cos(acos(0.8)+0.5), others 30*cosine, then CE by hand
        loss = arc_margin_loss(Tensor([[0.8, 0.1, -0.3]]), [0]).item()
        assert loss == pytest.approx(8.009030946176665e-05, rel=1e-9)

    def test_no_margin_is_scaled_softmax(self):
        rng = np.random.default_rng(0)
        c = _cosines(rng, 4, 5)
        y = [0, 1, 4, 2]
        a = arc_margin_loss(Tensor(c), y, LossConfig(s=7.0, m=0.0)).item()
        b = softmax_ce(Tensor(7.0 * c), y).item()
        assert abs(a - b) <= 1e-12

    def test_rejects_soft_labels(self):
        with pytest.raises(ValueError, match="hard"):
            arc_margin_loss(Tensor([[0.1, 0.2]]), np.array([[0.5, 0.5]]))

    def test_rejects_out_of_range_cosines(self):
        with pytest.raises(ValueError):
            arc_margin_loss(Tensor([[1.5, 0.2]]), [0])

    def test_exact_alignment_is_finite(self):
        loss = arc_margin_loss(Tensor([[1.0, -1.0]]), [0]).item()
        assert np.isfinite(loss)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 0.6), st.floats(0.0, 0.6), st.integers(0, 10_000))
    def test_margin_monotone(self, m1, m2, seed):
        lo, hi = sorted((m1, m2))
        rng = np.random.default_rng(seed)
        # keep theta_y + m below pi so cos(theta + m) is decreasing in m
        c = rng.uniform(-0.5, 0.95, size=(3, 4))
        y = [0, 1, 2]
        a = arc_margin_loss(Tensor(c), y, LossConfig(m=lo)).item()
        b = arc_margin_loss(Tensor(c), y, LossConfig(m=hi)).item()
        assert b >= a - 1e-12


class TestComposite:
    def setup_method(self):
        rng = np.random.default_rng(42)
        self.z = Tensor(rng.normal(size=(5, 6)))
        self.c = Tensor(_cosines(rng, 5, 6))
        self.y = np.array([0, 5, 2, 2, 1])

    def test_c_zero_is_softmax(self):
        a = composite_loss(self.z, self.c, self.y, LossConfig(c=0.0)).item()
        assert abs(a - softmax_ce(self.z, self.y).item()) <= 1e-12

    def test_c_one_is_arc(self):
        a = composite_loss(self.z, self.c, self.y, LossConfig(c=1.0)).item()
        assert abs(a - arc_margin_loss(self.c, self.y).item()) <= 1e-12

    def test_weighted_sum(self):
        arc = arc_margin_loss(self.c, self.y).item()
        soft = softmax_ce(self.z, self.y).item()
        a = composite_loss(self.z, self.c, self.y, LossConfig(c=0.2)).item()
        assert a == pytest.approx(0.2 * arc + 0.8 * soft, abs=1e-12)

    def test_soft_labels_route_arc_through_dominant_class(self):
        soft = np.eye(6)[self.y] * 0.7 + np.eye(6)[[1, 1, 1, 1, 0]] * 0.3
        a = composite_loss(self.z, self.c, soft).item()
        expected = 0.2 * arc_margin_loss(self.c, self.y).item() + 0.8 * softmax_ce(self.z, soft).item()
        assert a == pytest.approx(expected, abs=1e-12)

    def test_dominant_labels(self):
        np.testing.assert_array_equal(dominant_labels(np.array([[0.3, 0.7], [0.5, 0.5]])), [1, 0])

    @pytest.mark.parametrize("kw", [dict(s=0), dict(m=-0.1), dict(m=2.0), dict(c=1.5)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)


class TestLossGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_softmax_ce(self, seed):
        rng = np.random.default_rng(seed)
        assert grad_check(lambda t: softmax_ce(t, [1, 0, 3]), rng.normal(size=(3, 4))) <= 1e-4

    @pytest.mark.parametrize("m", [0.0, 0.5])
    def test_arc(self, m):
        rng = np.random.default_rng(7)
        cfg = LossConfig(m=m)
        assert grad_check(lambda t: arc_margin_loss(t, [2, 0], cfg), _cosines(rng, 2, 3)) <= 1e-4

    @pytest.mark.parametrize("c", [0.0, 0.2, 1.0])
    def test_composite_through_embedding(self, c):
        # one tensor feeds both heads, so every c exercises a real gradient
        rng = np.random.default_rng(9)
        cfg = LossConfig(c=c)
        assert grad_check(lambda t: composite_loss(t, l2_normalize(t), [1, 2], cfg), rng.normal(size=(2, 3))) <= 1e-4

    @pytest.mark.parametrize("c", [0.0, 0.2, 1.0])
    def test_composite_through_cosines(self, c):
        rng = np.random.default_rng(8)
        z = Tensor(rng.normal(size=(2, 3)))
        cfg = LossConfig(c=c)
        assert grad_check(lambda t: composite_loss(z, l2_normalize(t), [1, 2], cfg), rng.normal(size=(2, 3))) <= 1e-4
