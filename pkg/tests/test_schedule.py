import numpy as np
import pytest
import torch

from diffseg.schedule import (build_schedule, forward_noise, invert_noise, loss,
                              reverse_step, subsample_schedule)


def test_linear_t2_exact():
    s = build_schedule(2, "linear")
    assert torch.allclose(s.betas, torch.tensor([1e-4, 0.02], dtype=torch.float64))
    assert torch.allclose(s.alpha_bars,
                          torch.tensor([0.9999, 0.9999 * 0.98], dtype=torch.float64))


def test_alpha_bar_matches_brute_force_product():
    s = build_schedule(1000, "linear")
    # independent product loop (scratch oracle, frozen value below)
    prod = 1.0
    for i in range(1000):
        beta = 1e-4 + (0.02 - 1e-4) * i / 999
        prod *= 1.0 - beta
    assert prod == pytest.approx(4.0358297653756754e-05, rel=1e-12)
    assert float(s.alpha_bars[999]) == pytest.approx(prod, abs=1e-8)


def test_invariants_both_kinds():
    for kind in ("linear", "cosine"):
        s = build_schedule(500, kind)
        assert bool(((s.betas > 0) & (s.betas < 1)).all())
        diffs = s.alpha_bars[1:] - s.alpha_bars[:-1]
        assert bool((diffs < 0).all())  # strictly decreasing
        assert float(s.alpha_bars[0]) == float(s.alphas[0])
        ref = torch.cumprod(s.alphas, 0)
        assert torch.allclose(s.alpha_bars, ref, rtol=1e-10)


def test_linear_betas_nondecreasing():
    s = build_schedule(100, "linear")
    assert bool((s.betas[1:] >= s.betas[:-1]).all())


def test_t_too_small_rejected():
    with pytest.raises(ValueError):
        build_schedule(1)
    with pytest.raises(ValueError):
        build_schedule(1, "cosine")


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        build_schedule(10, "quadratic")


class TestForwardNoise:
    def test_zero_noise_coefficient_is_identity(self):
        s = build_schedule(10)
        x0 = torch.rand(4, 4) * 2 - 1
        xt = forward_noise(s, x0, 0, torch.zeros_like(x0))
        assert torch.allclose(xt, torch.sqrt(s.alpha_bars[0]).float() * x0)

    def test_zero_signal(self):
        s = build_schedule(10)
        noise = torch.randn(5, 5)
        xt = forward_noise(s, torch.zeros(5, 5), 7, noise)
        assert torch.allclose(xt, torch.sqrt(1 - s.alpha_bars[7]).float() * noise)

    def test_shape_mismatch(self):
        s = build_schedule(10)
        with pytest.raises(ValueError):
            forward_noise(s, torch.zeros(3, 3), 2, torch.zeros(4, 4))

    def test_t_out_of_range(self):
        s = build_schedule(10)
        x = torch.zeros(2, 2)
        with pytest.raises(ValueError):
            forward_noise(s, x, 10, x)
        with pytest.raises(ValueError):
            forward_noise(s, x, -1, x)

    @pytest.mark.parametrize("t", [1, 500, 999])
    def test_monte_carlo_mean_and_variance(self, t):
        s = build_schedule(1000)
        n = 100_000
        gen = torch.Generator().manual_seed(42 + t)
        noise = torch.randn(n, generator=gen, dtype=torch.float64)
        x0 = torch.full((n,), 0.5, dtype=torch.float64)
        xt = forward_noise(s, x0, t, noise)
        abar = float(s.alpha_bars[t])
        exp_mean = np.sqrt(abar) * 0.5
        exp_var = 1 - abar
        se_mean = np.sqrt(exp_var / n)
        se_var = exp_var * np.sqrt(2 / (n - 1))
        assert abs(float(xt.mean()) - exp_mean) < 3 * se_mean
        assert abs(float(xt.var()) - exp_var) < 3 * se_var

    def test_deterministic_round_trip(self):
        s = build_schedule(200)
        x0 = torch.rand(8, 8, dtype=torch.float64) * 2 - 1
        for t in (0, 57, 199):
            noise = torch.randn(8, 8, dtype=torch.float64)
            back = invert_noise(s, forward_noise(s, x0, t, noise), t, noise)
            assert torch.allclose(back, x0, rtol=1e-6)

    def test_signal_coefficient_strictly_decreasing(self):
        s = build_schedule(300)
        coeff = torch.sqrt(s.alpha_bars)
        assert bool((coeff[1:] < coeff[:-1]).all())


class TestLoss:
    def test_perfect_model_zero_loss(self):
        s = build_schedule(10)
        noise = torch.randn(4, 4)
        val = loss(s, lambda xt, img, t: noise, torch.zeros(4, 4), None, 3, noise)
        assert float(val) == 0.0

    def test_zero_model_approx_one(self):
        s = build_schedule(10)
        gen = torch.Generator().manual_seed(1)
        noise = torch.randn(200, 200, generator=gen)
        val = loss(s, lambda xt, img, t: torch.zeros_like(xt),
                   torch.zeros(200, 200), None, 5, noise)
        assert float(val) == pytest.approx(1.0, abs=0.05)

    def test_matches_hand_computed_mse(self):
        s = build_schedule(10)
        noise = torch.tensor([[0.3, -0.2], [0.1, 0.8]])
        pred = torch.tensor([[0.0, 0.5], [-0.1, 0.2]])
        val = loss(s, lambda xt, img, t: pred, torch.zeros(2, 2), None, 4, noise)
        hand = ((0.3 - 0.0) ** 2 + (-0.2 - 0.5) ** 2 + (0.1 + 0.1) ** 2
                + (0.8 - 0.2) ** 2) / 4
        assert float(val) == pytest.approx(hand, abs=1e-6)

    def test_gradient_check_tiny_stub(self):
        # <=50-parameter differentiable stub: eps_hat = W*xt + b
        s = build_schedule(50)
        torch.manual_seed(0)
        W = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
        b = torch.randn(4, dtype=torch.float64, requires_grad=True)

        def model(xt, img, t):
            return xt @ W + b

        x0 = torch.rand(3, 4, dtype=torch.float64)
        noise = torch.randn(3, 4, dtype=torch.float64)
        val = loss(s, model, x0, None, 20, noise)
        val.backward()
        h = 1e-4
        for param in (W, b):
            flat = param.detach().reshape(-1)
            grad = param.grad.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                with torch.no_grad():
                    flat[i] = orig + h
                    up = float(loss(s, model, x0, None, 20, noise))
                    flat[i] = orig - h
                    dn = float(loss(s, model, x0, None, 20, noise))
                    flat[i] = orig
                fd = (up - dn) / (2 * h)
                assert float(grad[i]) == pytest.approx(fd, rel=1e-3, abs=1e-8)


class TestReverseStep:
    def test_zero_noise_zero_z_collapse(self):
        s = build_schedule(10)
        xt = torch.rand(3, 3)
        out = reverse_step(s, xt, torch.zeros_like(xt), 4, torch.zeros_like(xt))
        assert torch.allclose(out, xt / torch.sqrt(s.alphas[4]).float())

    def test_scalar_hand_evaluation(self):
        s = build_schedule(2)
        xt = torch.tensor(0.7, dtype=torch.float64)
        eps = torch.tensor(-0.4, dtype=torch.float64)
        z = torch.tensor(1.3, dtype=torch.float64)
        t = 1
        beta, alpha, abar = 0.02, 0.98, 0.9999 * 0.98
        hand = (0.7 - beta / np.sqrt(1 - abar) * (-0.4)) / np.sqrt(alpha) + np.sqrt(beta) * 1.3
        out = reverse_step(s, xt, eps, t, z)
        assert float(out) == pytest.approx(hand, abs=1e-10)

    def test_nonzero_z_at_t0_rejected(self):
        s = build_schedule(10)
        x = torch.ones(2, 2)
        with pytest.raises(ValueError):
            reverse_step(s, x, x, 0, torch.ones(2, 2))

    def test_round_trip_with_true_noise_z_zero(self):
        # 1-pixel problem: noising then denoising with the exact noise,
        # injecting no randomness, returns x0
        s = build_schedule(20)
        x0 = torch.tensor([0.6], dtype=torch.float64)
        noise = torch.randn(1, dtype=torch.float64)
        x = forward_noise(s, x0, s.T - 1, noise)
        for t in range(s.T - 1, -1, -1):
            abar = s.alpha_bars[t]
            eps = (x - torch.sqrt(abar) * x0) / torch.sqrt(1 - abar)
            x = reverse_step(s, x, eps, t, torch.zeros_like(x))
        assert torch.allclose(x, x0, atol=1e-5)


def test_subsample_schedule_alpha_bars_exact():
    s = build_schedule(1000)
    red, idx = subsample_schedule(s, 100)
    assert red.T == 100
    assert torch.allclose(red.alpha_bars, s.alpha_bars[idx])
    ref = torch.cumprod(red.alphas, 0)
    assert torch.allclose(red.alpha_bars, ref, rtol=1e-8)
