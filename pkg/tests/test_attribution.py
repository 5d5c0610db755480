from __future__ import annotations

import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xmodal.attribution import attribute_teacher, attribution_sweep, integrated_gradients, modality_shares
from xmodal.errors import ConfigError, DegenerateInputError, InputError
from xmodal.models import ClassifierHead, MultimodalTeacher


def linear_model(W):
    W = torch.as_tensor(W, dtype=torch.float64)
    return lambda x: x @ W.T


class TestIntegratedGradients:
    def test_linear_closed_form(self, rng):
        W = rng.normal(size=(3, 7))
        x = rng.normal(size=(5, 7))
        res = integrated_gradients(linear_model(W), x, target=[0, 1, 2, 0, 1], n_steps=8)
        expected = W[[0, 1, 2, 0, 1]] * x
        np.testing.assert_allclose(res.attributions, expected, atol=1e-6)

    def test_linear_with_baseline(self, rng):
        W = rng.normal(size=(2, 4))
        x, b = rng.normal(size=4), rng.normal(size=4)
        res = integrated_gradients(linear_model(W), x, target=1, baseline=b, n_steps=16)
        np.testing.assert_allclose(res.attributions, W[1] * (x - b), atol=1e-6)

    def test_quadratic_right_riemann_sum(self, rng):
        # f(x) = sum x_d^2: right sum of 2 a x_d over a = s/n gives x_d^2 (n + 1) / n
        x = rng.normal(size=6)
        n = 10
        res = integrated_gradients(lambda v: (v**2).sum(dim=1, keepdim=True), x, target=0, n_steps=n)
        np.testing.assert_allclose(res.attributions, x**2 * (n + 1) / n, atol=1e-12)

    def test_input_equal_to_baseline(self):
        head = ClassifierHead(5, 3, (8,), generator=torch.Generator().manual_seed(0))
        res = integrated_gradients(head, np.zeros(5))
        assert np.all(res.attributions == 0)

    def test_completeness_residual_shrinks_like_one_over_n(self):
        # the right sum has O(1/n) error on ReLU heads; 8x more steps -> roughly 8x smaller residual
        head = ClassifierHead(12, 4, (32, 16), generator=torch.Generator().manual_seed(3))
        x = np.random.default_rng(0).normal(size=(20, 12))
        coarse = integrated_gradients(head, x, n_steps=512)
        fine = integrated_gradients(head, x, n_steps=4096)
        ratio = np.abs(coarse.residual).sum() / np.abs(fine.residual).sum()
        assert 4 <= ratio <= 16
        np.testing.assert_allclose(fine.delta, coarse.delta, rtol=0, atol=1e-12)
        assert (np.abs(fine.residual) / np.abs(fine.delta)).max() <= 1e-2

    def test_module_is_not_modified(self):
        head = ClassifierHead(4, 2, generator=torch.Generator().manual_seed(0))
        before = [p.clone() for p in head.parameters()]
        integrated_gradients(head, np.ones((2, 4)))
        assert all(torch.equal(a, b) for a, b in zip(before, head.parameters()))
        assert next(head.parameters()).dtype == torch.float32

    def test_target_defaults_to_prediction(self, rng):
        W = rng.normal(size=(3, 4))
        x = rng.normal(size=(6, 4))
        res = integrated_gradients(linear_model(W), x)
        np.testing.assert_array_equal(res.targets, (x @ W.T).argmax(1))

    def test_too_few_steps(self):
        with pytest.raises(ConfigError):
            integrated_gradients(linear_model(np.eye(2)), np.ones(2), n_steps=7)

    def test_non_finite_gradient_names_step(self):
        f = lambda v: torch.sqrt(v).sum(dim=1, keepdim=True)  # noqa: E731 - inf gradient at 0
        with pytest.raises(InputError, match="step"):
            integrated_gradients(f, np.array([0.0, 1.0]), baseline=np.array([0.0, 0.0]), target=0)

    def test_baseline_shape(self):
        with pytest.raises(InputError):
            integrated_gradients(linear_model(np.eye(2)), np.ones((2, 2)), baseline=np.ones((3, 2)))


class TestShares:
    def test_text_only(self):
        assert modality_shares([0, 0, 0.5, -2], 2, 2) == (0.0, 1.0)

    def test_symmetric(self):
        assert modality_shares([1, -1, 1, -1], 2, 2) == (0.5, 0.5)

    def test_hand_built(self):
        # |a| = 1, 3, 2, 4 -> image 4/10
        img, txt = modality_shares([1.0, -3.0, 2.0, -4.0], 2, 2)
        assert img == pytest.approx(0.4, abs=1e-15) and txt == pytest.approx(0.6, abs=1e-15)

    def test_all_zero(self):
        with pytest.raises(DegenerateInputError):
            modality_shares([0, 0, 0], 1, 2)

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            modality_shares([1, 2, 3], 2, 2)

    @settings(max_examples=80)
    @given(arrays(np.float64, 7, elements=st.floats(-10, 10)), st.randoms(use_true_random=False))
    def test_permutation_invariant_within_blocks(self, a, random):
        if not np.abs(a).sum():
            return
        img, txt = list(a[:3]), list(a[3:])
        random.shuffle(img)
        random.shuffle(txt)
        s1 = modality_shares(a, 3, 4)
        s2 = modality_shares(img + txt, 3, 4)
        assert s1[0] == pytest.approx(s2[0], abs=1e-12)
        assert 0 <= s1[0] <= 1 and abs(s1[0] + s1[1] - 1) <= 1e-9


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def teacher(modality="image+text", seed=0):
    d_in = 4 + (3 if modality == "image+text" else 0)
    head = ClassifierHead(d_in, 3, (8,), generator=torch.Generator().manual_seed(seed))
    return MultimodalTeacher(head, 3, 4, modality)


class TestTeacherAttribution:
    def test_report(self, rng, tmp_path):
        img, txt = unit(rng.normal(size=(6, 3))), unit(rng.normal(size=(6, 4)))
        rep = attribute_teacher(teacher(), img, txt, n_steps=256, trial="t")
        assert rep.attributions.shape == (6, 7)
        assert 0 < rep.image_share < 1
        assert rep.image_share + rep.text_share == pytest.approx(1, abs=1e-9)
        assert rep.summary()["max_relative_residual"] == rep.max_relative_residual()
        assert rep.residual.shape == (6,)
        rep.save(tmp_path / "r.json")
        assert json.loads((tmp_path / "r.json").read_text())["trial"] == "t"
        assert (tmp_path / "r.csv").read_text().startswith("sample,image_share")

    def test_text_modality_has_no_image_share(self, rng):
        img, txt = unit(rng.normal(size=(4, 3))), unit(rng.normal(size=(4, 4)))
        rep = attribute_teacher(teacher("text"), img, txt)
        assert rep.image_share == 0.0 and rep.text_share == 1.0

    def test_sweep_records_failures(self, rng):
        img, txt = unit(rng.normal(size=(3, 3))), unit(rng.normal(size=(3, 4)))
        sweep = attribution_sweep([("ok", teacher(), img, txt), ("bad", teacher(), img * 3, txt)], n_steps=8)
        assert sweep.rows[0]["error"] is None
        assert "InputError" in sweep.rows[1]["error"]
        assert [t for t, _ in sweep.series()] == ["ok"]

    def test_single_trial_one_row(self, rng):
        img, txt = unit(rng.normal(size=(3, 3))), unit(rng.normal(size=(3, 4)))
        assert len(attribution_sweep([("only", teacher(), img, txt)], n_steps=8).rows) == 1
