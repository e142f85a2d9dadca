import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plab.analysis import (
    DegenerateProjectionError,
    TemplateMatrix,
    control_check,
    default_threshold,
    explained_variance,
    extract_templates,
    project_2d,
    spread_report,
)
from plab.autodiff import Tensor
from plab.data import ArraySet
from plab.model import ModelConfig, build_model


def _model(k=6, seed=0):
    return build_model(ModelConfig(num_classes=k, input_size=16, growth_rate=2, block_layers=[1, 1],
                                   embedding_dim=5, seed=seed))


def _controls(n_neg=3, pos_labels=(1, 2), seed=0):
    rng = np.random.default_rng(seed)
    n = n_neg + len(pos_labels) + 1
    return ArraySet(
        ids=[f"s{i}" for i in range(n)],
        images=rng.random((n, 6, 16, 16)),
        cell_onehots=np.eye(4)[rng.integers(0, 4, size=n)],
        labels=np.array([-1] * n_neg + list(pos_labels) + [0]),
        controls=["negative"] * n_neg + ["positive"] * len(pos_labels) + ["none"],
    )


def _orthogonal(d, seed):
    q, r = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, d)))
    return q * np.sign(np.diag(r))


class TestExtractTemplates:
    def test_fresh_model_rows(self):
        model = _model()
        np.testing.assert_array_equal(extract_templates(model, "softmax").W, model["head.soft"].data)
        np.testing.assert_array_equal(extract_templates(model, "arc").W, model["head.arc"].data)

    def test_copy_not_view(self):
        model = _model()
        tm = extract_templates(model)
        tm.W[:] = 0
        assert np.any(model["head.soft"].data != 0)

    def test_argmax_matches_model_prediction(self):
        model = _model()
        tm = extract_templates(model)
        emb = np.random.default_rng(0).normal(size=(20, 5))
        soft, _ = model.logits(Tensor(emb))
        np.testing.assert_array_equal(tm.predict(emb), soft.data.argmax(axis=1))

    def test_junk_mask(self):
        mask = [False] * 4 + [True] * 2
        tm = extract_templates(_model(), "arc", mask)
        np.testing.assert_array_equal(tm.junk_mask, mask)
        with pytest.raises(ValueError):
            extract_templates(_model(), "arc", [True])

    def test_unknown_head(self):
        with pytest.raises(KeyError):
            extract_templates(_model(), "cosface")


class TestProject2d:
    def test_planar_points_keep_distances(self):
        rng = np.random.default_rng(0)
        plane = np.hstack([rng.normal(size=(12, 2)), np.zeros((12, 4))]) @ _orthogonal(6, 1) + 3.0
        xy = project_2d(plane)
        d_in = np.linalg.norm(plane[:, None] - plane[None], axis=2)
        d_out = np.linalg.norm(xy[:, None] - xy[None], axis=2)
        np.testing.assert_allclose(d_out, d_in, atol=1e-9)

    def test_collinear_second_coordinate_zero(self):
        t = np.linspace(-2, 3, 7)[:, None]
        xy = project_2d(t * np.array([[1.0, -2.0, 0.5]]) + 1.0)
        np.testing.assert_allclose(xy[:, 1], 0.0, atol=1e-12)
        np.testing.assert_allclose(np.abs(xy[:, 0]), np.abs(t[:, 0] - t.mean()) * math.sqrt(5.25), atol=1e-12)

    def test_explained_variance_eigen_oracle(self):
        x = np.array([[2.0, 0.0, 1.0], [1.0, 3.0, -1.0], [0.0, 1.0, 4.0], [5.0, 2.0, 0.0], [-1.0, -2.0, 2.0]])
        xc = x - x.mean(axis=0)
        cov = xc.T @ xc / (len(x) - 1)
        eig = np.sort(np.linalg.eigvalsh(cov))[::-1]
        np.testing.assert_allclose(explained_variance(x, 2), eig[:2], rtol=1e-12)
        np.testing.assert_allclose(project_2d(x).var(axis=0, ddof=1), eig[:2], rtol=1e-12)

    def test_sign_convention(self):
        x = np.random.default_rng(3).normal(size=(10, 4))
        # the loading sign rule pins the axes, so negating the data negates the coordinates
        np.testing.assert_allclose(project_2d(-x), -project_2d(x), atol=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateProjectionError):
            project_2d(np.ones((4, 3)))

    @pytest.mark.parametrize("shape", [(1, 3), (4, 1), (5,)])
    def test_shape_errors(self, shape):
        with pytest.raises(ValueError):
            project_2d(np.zeros(shape))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_rotation_invariant_up_to_sign(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(8, 4)) * np.array([5.0, 3.0, 1.0, 0.5])
        a = project_2d(x)
        b = project_2d(x @ _orthogonal(4, seed + 1))
        np.testing.assert_allclose(np.abs(a), np.abs(b), atol=1e-8)


class TestSpreadReport:
    def _tm(self, W, junk=0):
        W = np.asarray(W, dtype=float)
        mask = np.zeros(len(W), bool)
        if junk:
            mask[-junk:] = True
        return TemplateMatrix(W, "softmax", mask)

    def test_orthonormal(self):
        assert spread_report(self._tm(np.eye(4))).mean_offdiag_cosine == pytest.approx(0.0, abs=1e-15)

    def test_identical(self):
        assert spread_report(self._tm(np.ones((4, 3)) * 2.0)).mean_offdiag_cosine == pytest.approx(1.0, abs=1e-15)

    def test_junk_cluster_gap(self):
        junk = np.array([1.0, 1.0, 0.0, 5.0])
        W = np.vstack([np.eye(4)[:3], junk, 2 * junk])
        rep = spread_report(self._tm(W, junk=2))
        # junk-junk cosine 1; junk-real cosines 1/sqrt(27), 1/sqrt(27), 0 for each junk row
        assert rep.junk_vs_real_cosine_gap == pytest.approx(1.0 - 2.0 / (3.0 * math.sqrt(27.0)), abs=1e-14)
        assert rep.junk_vs_real_cosine_gap > 0

    def test_fewer_than_two_junk(self):
        assert spread_report(self._tm(np.eye(4), junk=1)).junk_vs_real_cosine_gap is None

    def test_needs_two_real(self):
        with pytest.raises(ValueError):
            spread_report(self._tm(np.eye(3), junk=2))

    def test_cluster_tightness(self):
        feats = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [1.0, 1.0], [3.0, 3.0]])
        rep = spread_report(self._tm(np.eye(2)), feats, np.array([0, 0, 1, 1, 1]))
        assert rep.cluster_tightness[0] == pytest.approx(1.0)
        c = 1 / math.sqrt(2)
        assert rep.cluster_tightness[1] == pytest.approx((c + c + 1.0) / 3)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_positive_rescaling_invariant(self, seed):
        rng = np.random.default_rng(seed)
        W = rng.normal(size=(7, 4))
        feats, labels = rng.normal(size=(9, 4)), rng.integers(0, 3, size=9)
        a = spread_report(self._tm(W, 2), feats, labels)
        b = spread_report(self._tm(W * rng.uniform(0.1, 10, size=(7, 1)), 2),
                          feats * rng.uniform(0.1, 10, size=(9, 1)), labels)
        assert a.mean_offdiag_cosine == pytest.approx(b.mean_offdiag_cosine, abs=1e-12)
        assert a.junk_vs_real_cosine_gap == pytest.approx(b.junk_vs_real_cosine_gap, abs=1e-12)
        assert a.cluster_tightness == pytest.approx(b.cluster_tightness, abs=1e-12)
        assert -1 <= a.mean_offdiag_cosine <= 1


class TestControlCheck:
    def test_default_threshold(self):
        assert default_threshold(10) == 0.5
        assert default_threshold(4) == 1.0

    def test_uniform_head_unflagged(self):
        model = _model(k=10)
        model["head.soft"].data[:] = 0.0
        rep = control_check(model, _controls())
        assert rep.threshold == 0.5
        assert len(rep.negative) == 3
        for _, p, flagged in rep.negative:
            assert p == pytest.approx(0.1, abs=1e-15)
            assert not flagged

    @staticmethod
    def _fixed_prediction(model, probs):
        model.predict_proba = lambda images, onehots: np.tile(probs, (len(images), 1))
        return model

    def test_positive_controls(self):
        model = self._fixed_prediction(_model(k=6), np.array([0.1, 0.1, 0.5, 0.1, 0.1, 0.1]))
        rep = control_check(model, _controls(pos_labels=(2, 2, 1)))
        preds = [pred for _, _, pred, _ in rep.positive]
        assert preds == [2, 2, 2]
        assert rep.positive_accuracy == pytest.approx(2 / 3)

    def test_confident_negative_flagged(self):
        model = self._fixed_prediction(_model(k=6), np.array([0.9, 0.02, 0.02, 0.02, 0.02, 0.02]))
        rep = control_check(model, _controls(), threshold=0.5)
        assert rep.flagged_negatives == 3
        assert control_check(model, _controls(), threshold=1.0).flagged_negatives == 0

    def test_no_controls(self):
        arr = _controls(n_neg=0, pos_labels=())
        rep = control_check(_model(), arr)
        assert rep.notice
        assert rep.negative == [] and rep.positive == []
        assert rep.positive_accuracy is None

    def test_does_not_mutate_model(self):
        model = _model()
        before = model.state_bytes()
        control_check(model, _controls())
        assert model.state_bytes() == before
        assert all(p.grad is None for p in model.parameters())

    def test_rows(self):
        rows = control_check(_model(), _controls()).rows()
        metrics = {m for _, m, _ in rows}
        assert metrics == {"negative_max_prob", "negative_flagged", "positive_correct", "positive_accuracy"}
