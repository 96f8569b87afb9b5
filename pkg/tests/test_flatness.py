import numpy as np
import pytest

from dnq.datasets import sample_calibration, synth_blobs
from dnq.flatness import (
    hutchinson_trace,
    hvp,
    loglog_slope,
    model_loss_fn,
    perturbation_curve,
    perturbation_sharpness,
    sharpness_report,
)
from dnq.models import build, toy_mlp
from dnq.trainer import TrainConfig, train


def quadratic(h_matrix):
    """loss = 0.5 w^T H w with analytic gradient H w."""
    h = np.asarray(h_matrix, dtype=np.float64)

    def loss_fn(w):
        return float(0.5 * w @ h @ w)

    def grad_fn(w):
        return h @ w

    return loss_fn, grad_fn


class TestHvp:
    def test_diagonal_quadratic(self):
        # L = 0.5 (2 w1^2 + 4 w2^2): H = diag(2, 4), H (1,0) = (2,0)
        _, grad_fn = quadratic(np.diag([2.0, 4.0]))
        out = hvp(grad_fn, np.array([0.3, -0.7]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [2.0, 0.0], atol=1e-10)

    def test_zero_direction(self):
        _, grad_fn = quadratic(np.diag([2.0, 4.0]))
        out = hvp(grad_fn, np.array([0.3, -0.7]), np.zeros(2))
        np.testing.assert_allclose(out, [0.0, 0.0], atol=1e-12)

    def test_exact_for_quadratics(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 5))
        h = a + a.T
        _, grad_fn = quadratic(h)
        w = rng.normal(size=5)
        v = rng.normal(size=5)
        np.testing.assert_allclose(hvp(grad_fn, w, v), h @ v, rtol=1e-10, atol=1e-10)

    def test_symmetry_on_small_net(self):
        # v^T (H u) == u^T (H v) within 1e-4 relative.  Directions are unit
        # norm and the step small so the probe stays on one side of every
        # relu kink (the precondition for twice differentiability).
        train_ds = synth_blobs(3, 30, 6, 1.0, seed=0)
        g, params = build(toy_mlp(6, 8, 3), seed=0)
        _, grad_fn, w0 = model_loss_fn(g, params, train_ds)
        rng = np.random.default_rng(1)
        for _ in range(3):
            u = rng.normal(size=w0.shape)
            u /= np.linalg.norm(u)
            v = rng.normal(size=w0.shape)
            v /= np.linalg.norm(v)
            a = float(v @ hvp(grad_fn, w0, u, h_scale=1e-4))
            b = float(u @ hvp(grad_fn, w0, v, h_scale=1e-4))
            assert a == pytest.approx(b, rel=1e-4, abs=1e-8)

    def test_shape_mismatch(self):
        _, grad_fn = quadratic(np.eye(2))
        with pytest.raises(ValueError):
            hvp(grad_fn, np.zeros(2), np.zeros(3))

    def test_nonfinite_gradient_errors(self):
        grad_fn = lambda w: np.full_like(w, np.nan)
        with pytest.raises(FloatingPointError):
            hvp(grad_fn, np.zeros(2), np.ones(2))


class TestHutchinson:
    def test_diagonal_trace_estimate(self):
        # Rademacher probes on a diagonal Hessian: v^T H v == tr(H) for
        # every draw, so the estimate is 6 with (near) zero stderr.
        _, grad_fn = quadratic(np.diag([2.0, 4.0]))
        rng = np.random.default_rng(0)
        est, stderr = hutchinson_trace(grad_fn, np.zeros(2), 16, rng)
        assert abs(est - 6.0) <= max(3 * stderr, 1e-8)

    def test_nondiagonal_trace_within_stderr(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(8, 8))
        h = a + a.T
        _, grad_fn = quadratic(h)
        est, stderr = hutchinson_trace(grad_fn, rng.normal(size=8), 400, rng)
        assert abs(est - np.trace(h)) <= 3 * stderr

    def test_zero_hessian_linear_model(self):
        grad_fn = lambda w: np.full_like(w, 3.0)  # constant gradient
        rng = np.random.default_rng(2)
        est, stderr = hutchinson_trace(grad_fn, np.zeros(4), 8, rng)
        assert abs(est) <= max(3 * stderr, 1e-9)

    def test_seed_stability(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(6, 6))
        h = a + a.T
        _, grad_fn = quadratic(h)
        e1, s1 = hutchinson_trace(grad_fn, np.zeros(6), 300, np.random.default_rng(10))
        e2, s2 = hutchinson_trace(grad_fn, np.zeros(6), 300, np.random.default_rng(20))
        assert abs(e1 - e2) <= 3 * np.hypot(s1, s2)

    def test_variance_shrinks_with_samples(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(6, 6))
        h = a + a.T
        _, grad_fn = quadratic(h)
        _, s_small = hutchinson_trace(grad_fn, np.zeros(6), 100, np.random.default_rng(0))
        _, s_big = hutchinson_trace(grad_fn, np.zeros(6), 400, np.random.default_rng(0))
        assert s_big < s_small

    def test_needs_two_samples(self):
        _, grad_fn = quadratic(np.eye(2))
        with pytest.raises(ValueError):
            hutchinson_trace(grad_fn, np.zeros(2), 1, np.random.default_rng(0))


class TestPerturbationCurve:
    def test_sigma_zero_is_exactly_zero(self):
        loss_fn, _ = quadratic(np.eye(3))
        curve = perturbation_curve(loss_fn, np.zeros(3), np.ones(3), [0.0], 4, np.random.default_rng(0))
        assert curve[0] == (0.0, 0.0, 0.0)

    def test_quadratic_expected_gap(self):
        # L = 0.5 lam w^2 at w* = 0 with absolute sigma: E[dL] = 0.5 lam sigma^2
        lam = 3.0
        loss_fn, _ = quadratic(np.array([[lam]]))
        sigma = 0.2
        curve = perturbation_curve(loss_fn, np.zeros(1), np.ones(1), [sigma], 4000,
                                   np.random.default_rng(0))
        _, mean, stderr = curve[0]
        assert mean == pytest.approx(0.5 * lam * sigma**2, abs=3 * stderr)

    def test_negative_sigma_rejected(self):
        loss_fn, _ = quadratic(np.eye(2))
        with pytest.raises(ValueError):
            perturbation_curve(loss_fn, np.zeros(2), np.ones(2), [-0.1], 4, np.random.default_rng(0))


@pytest.fixture(scope="module")
def trained_toy():
    train_ds = synth_blobs(3, 100, 8, 1.0, seed=0, split="train")
    calib = sample_calibration(train_ds, 30, seed=0)
    spec = toy_mlp(8, 12, 3)
    cfg = TrainConfig(epochs=25, warmup_epochs=25, swa_start=26, ramp_epochs=1,
                      lr=0.05, batch_size=25, seed=0, checkpoint_every=0,
                      wqer=False, aqer=False)
    result = train(cfg, spec, train_ds, calib)
    probe = sample_calibration(train_ds, 100, seed=1)
    return result, probe


class TestTrainedModelProbes:
    def test_quadratic_scaling_at_minimum(self, trained_toy):
        result, probe = trained_toy
        curve = perturbation_sharpness(result.graph, result.final_params, probe,
                                       sigma_grid=[1e-3, 2e-3, 5e-3, 1e-2],
                                       draws_per_sigma=64, seed=0)
        slope = loglog_slope(curve, 1e-3, 1e-2)
        assert 1.7 <= slope <= 2.3

    def test_curve_nondecreasing_in_sigma(self, trained_toy):
        result, probe = trained_toy
        curve = perturbation_sharpness(result.graph, result.final_params, probe,
                                       sigma_grid=[0.003, 0.01, 0.03, 0.1],
                                       draws_per_sigma=32, seed=1)
        gaps = [m for _, m, _ in curve]
        assert all(b >= a * 0.9 for a, b in zip(gaps, gaps[1:]))  # monotone up to MC noise

    def test_report_roundtrip(self, trained_toy, tmp_path):
        import json

        result, probe = trained_toy
        rep = sharpness_report(result.graph, result.final_params, probe,
                               sigma_grid=[0.0, 0.01], draws_per_sigma=8,
                               trace_samples=8, seed=0)
        parsed = json.loads(rep.to_json())
        assert parsed["seed"] == 0
        assert parsed["curve"][0]["dl_mean"] == 0.0
        assert np.isfinite(parsed["trace"])
        assert parsed["trace_stderr"] >= 0
