from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from xmodal.errors import ConfigError, DegenerateInputError, InputError
from xmodal.losses import (
    KDConfig,
    as_onehot,
    average_logits,
    cosine_distance,
    cosine_distance_grad,
    cosreg_loss,
    cross_entropy,
    hierarchical_loss,
    kd_loss,
    kd_loss_grad,
    student_total,
    student_total_grad,
    teacher_total,
    teacher_total_grad,
)


def t64(x):
    return torch.tensor(np.asarray(x, dtype=np.float64))


class TestKDLossOracle:
    """Single instances against the mpmath reference."""

    @pytest.mark.parametrize("tau", [0.5, 1.0, 4.0, 10.0])
    def test_matches_reference(self, rng, tau):
        for _ in range(25):
            C = int(rng.integers(2, 15))
            z_s, z_b = rng.normal(0, 3, C), rng.normal(0, 3, C)
            got = float(kd_loss(t64(z_s), t64(z_b), tau))
            assert got == pytest.approx(float(oracles.kd(z_s, z_b, tau)), abs=1e-10)

    def test_identical_logits_give_tau_squared_entropy(self):
        z = np.array([1.0, 2.0, 0.5])
        p = np.exp(z / 4) / np.exp(z / 4).sum()
        entropy = -(p * np.log(p)).sum()
        assert float(kd_loss(t64(z), t64(z), 4.0)) == pytest.approx(16 * entropy, abs=1e-12)

    def test_uniform_teacher_on_two_classes(self):
        # p_t = (1/2, 1/2), z_s = (0, 0): loss = tau^2 * log 2
        got = float(kd_loss(t64([0.0, 0.0]), t64([3.0, 3.0]), 2.0))
        assert got == pytest.approx(4 * np.log(2), abs=1e-12)

    def test_extreme_logits_stay_finite(self):
        z_s = t64([1000.0, -1000.0, 0.0])
        z_b = t64([-800.0, 900.0, 0.0])
        assert torch.isfinite(kd_loss(z_s, z_b, 1.0))

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_rejects_nonpositive_tau(self, tau):
        with pytest.raises(ConfigError):
            kd_loss(t64([1.0, 2.0]), t64([1.0, 2.0]), tau)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            kd_loss(t64([1.0, 2.0]), t64([1.0, 2.0, 3.0]), 1.0)

    def test_batch_is_mean_of_rows(self, rng):
        z_s, z_b = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        rows = [float(kd_loss(t64(a), t64(b), 3.0)) for a, b in zip(z_s, z_b)]
        assert float(kd_loss(t64(z_s), t64(z_b), 3.0)) == pytest.approx(np.mean(rows), abs=1e-12)


class TestStudentAndTeacherObjectives:
    def test_average_logits(self, rng):
        a, b = rng.normal(size=7), rng.normal(size=7)
        ref = [float(v) for v in oracles.average_logits(a, b)]
        np.testing.assert_allclose(average_logits(t64(a), t64(b)).numpy(), ref, atol=1e-15)

    def test_student_total_reference(self, rng):
        for _ in range(20):
            C = int(rng.integers(2, 12))
            z_s, z_b = rng.normal(0, 2, C), rng.normal(0, 2, C)
            y = int(rng.integers(C))
            cfg = KDConfig(tau=float(rng.uniform(1, 6)), lambda_kd=float(rng.uniform(0, 2)))
            got = float(student_total(t64(z_s), t64(z_b), as_onehot(torch.tensor(y), C), cfg))
            ref = float(oracles.student_total(z_s, z_b, y, cfg.tau, cfg.lambda_kd))
            assert got == pytest.approx(ref, abs=1e-10)

    def test_zero_lambda_is_plain_cross_entropy(self, rng):
        z_s, z_b = t64(rng.normal(size=(4, 3))), t64(rng.normal(size=(4, 3)))
        y = torch.tensor([0, 2, 1, 1])
        got = student_total(z_s, z_b, y, KDConfig(lambda_kd=0.0))
        assert torch.equal(got, cross_entropy(z_s, y))

    def test_teacher_total_reference(self, rng):
        for _ in range(20):
            C, d = int(rng.integers(2, 10)), int(rng.integers(2, 8))
            z = rng.normal(size=C)
            y = int(rng.integers(C))
            n_gt, n_rel, n_pre = rng.normal(size=(3, d))
            cfg = KDConfig()
            got = float(teacher_total(t64(z), torch.tensor(y), t64(n_gt), t64(n_rel), t64(n_pre), cfg))
            ref = float(oracles.teacher_total(z, y, n_gt, n_rel, n_pre, cfg.lambda_hier, cfg.lambda_cosreg))
            assert got == pytest.approx(ref, abs=1e-10)

    def test_regularizers_vanish_at_exact_match(self):
        n = t64([0.6, 0.8])
        assert float(hierarchical_loss(n, n)) == pytest.approx(0.0, abs=1e-15)
        assert float(cosreg_loss(n, n)) == pytest.approx(0.0, abs=1e-15)

    def test_masked_rows_only(self):
        z = t64([[2.0, 0.0], [0.0, 2.0]])
        y = torch.tensor([0, 1])
        n_gt = t64([[1.0, 0.0], [1.0, 0.0]])
        n_rel = t64([[0.0, 1.0], [1.0, 0.0]])
        cfg = KDConfig(lambda_hier=1.0, lambda_cosreg=0.0)
        ce = float(cross_entropy(z, y))
        only_second = teacher_total(z, y, n_gt, n_rel, n_rel, cfg, relaxed_mask=torch.tensor([False, True]))
        only_first = teacher_total(z, y, n_gt, n_rel, n_rel, cfg, relaxed_mask=torch.tensor([True, False]))
        nothing = teacher_total(z, y, n_gt, n_rel, n_rel, cfg, relaxed_mask=torch.tensor([False, False]))
        assert float(only_second) == pytest.approx(ce)
        assert float(only_first) == pytest.approx(ce + 1.0)
        assert float(nothing) == pytest.approx(ce)

    def test_zero_vector_cosine_is_an_error(self):
        with pytest.raises(DegenerateInputError):
            cosine_distance(t64([0.0, 0.0]), t64([1.0, 0.0]))

    def test_invalid_onehot(self):
        with pytest.raises(InputError):
            as_onehot(torch.tensor([0.5, 0.5]), 2)
        with pytest.raises(InputError):
            as_onehot(torch.tensor([3]), 2)


def _central_fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestClosedFormGradients:
    def test_kd_against_finite_differences(self, rng):
        for _ in range(10):
            C = int(rng.integers(2, 8))
            z_s, z_b = rng.normal(0, 2, C), rng.normal(0, 2, C)
            tau = float(rng.uniform(0.5, 8))
            g_s, g_b = kd_loss_grad(z_s, z_b, tau)
            assert _rel_err(g_s, _central_fd(lambda v: float(kd_loss(t64(v), t64(z_b), tau)), z_s)) < 1e-4
            assert _rel_err(g_b, _central_fd(lambda v: float(kd_loss(t64(z_s), t64(v), tau)), z_b)) < 1e-4

    def test_kd_gradient_matches_autograd(self, rng):
        z_s = t64(rng.normal(size=6)).requires_grad_(True)
        z_b = t64(rng.normal(size=6)).requires_grad_(True)
        kd_loss(z_s, z_b, 3.0).backward()
        g_s, g_b = kd_loss_grad(z_s.detach().numpy(), z_b.detach().numpy(), 3.0)
        np.testing.assert_allclose(z_s.grad.numpy(), g_s, atol=1e-12)
        np.testing.assert_allclose(z_b.grad.numpy(), g_b, atol=1e-12)

    def test_student_total_grad(self, rng):
        cfg = KDConfig(tau=2.0, lambda_kd=0.7)
        z_s, z_b = rng.normal(size=5), rng.normal(size=5)
        y = np.eye(5)[3]
        g_s, _ = student_total_grad(z_s, z_b, y, cfg)
        fd = _central_fd(lambda v: float(student_total(t64(v), t64(z_b), t64(y), cfg)), z_s)
        assert _rel_err(g_s, fd) < 1e-4

    def test_cosine_distance_grad(self, rng):
        a, b = rng.normal(size=(2, 6))
        g_a, g_b = cosine_distance_grad(a, b)
        assert _rel_err(g_a, _central_fd(lambda v: float(cosine_distance(t64(v), t64(b))), a)) < 1e-4
        assert _rel_err(g_b, _central_fd(lambda v: float(cosine_distance(t64(a), t64(v))), b)) < 1e-4

    def test_teacher_total_grad_keys(self, rng):
        cfg = KDConfig()
        z = rng.normal(size=4)
        n = rng.normal(size=(3, 5))
        g = teacher_total_grad(z, np.eye(4)[1], n[0], n[1], n[2], cfg)
        fd = _central_fd(lambda v: float(teacher_total(t64(z), torch.tensor(1), t64(n[0]), t64(v), t64(n[2]), cfg)), n[1])
        assert _rel_err(g["n_relaxed"], fd) < 1e-4
        assert set(g) == {"z_tx", "n_gt", "n_relaxed", "n_pretrained"}


logit_vectors = arrays(np.float64, st.integers(2, 8), elements=st.floats(-20, 20))


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(z=logit_vectors, tau=st.floats(0.25, 20))
    def test_kd_minimised_at_teacher(self, z, tau):
        # cross-entropy against p_t is minimised by p_s = p_t: gradient vanishes there
        g_s, _ = kd_loss_grad(z, z, tau)
        np.testing.assert_allclose(g_s, 0.0, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(z_s=logit_vectors, shift=st.floats(-50, 50), tau=st.floats(0.5, 10))
    def test_kd_shift_invariant(self, z_s, shift, tau):
        z_b = np.roll(z_s, 1)
        a = float(kd_loss(t64(z_s), t64(z_b), tau))
        b = float(kd_loss(t64(z_s + shift), t64(z_b - shift), tau))
        assert a == pytest.approx(b, rel=1e-9, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(z_s=logit_vectors, tau=st.floats(0.5, 10))
    def test_kd_not_below_tau_squared_entropy(self, z_s, tau):
        z_b = z_s[::-1].copy()
        p = np.exp((z_b - z_b.max()) / tau)
        p /= p.sum()
        entropy = -np.sum(p * np.log(np.clip(p, 1e-300, None)))
        assert float(kd_loss(t64(z_s), t64(z_b), tau)) >= tau**2 * entropy - 1e-8

    @settings(max_examples=60, deadline=None)
    @given(
        a=arrays(np.float64, 4, elements=st.floats(-5, 5)),
        b=arrays(np.float64, 4, elements=st.floats(-5, 5)),
        scale=st.floats(0.1, 10),
    )
    def test_cosine_distance_range_and_scale(self, a, b, scale):
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        d = float(cosine_distance(t64(a), t64(b)))
        assert -1e-12 <= d <= 2 + 1e-12
        assert float(cosine_distance(t64(a * scale), t64(b))) == pytest.approx(d, abs=1e-9)
