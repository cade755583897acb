"""
Tests for the DDPM schedule, forward process, reverse step and sampler
"""
import math

import pytest
import torch

from app.modules.diffusion import (
    NoiseSample,
    NoiseSchedule,
    hfrm_loss,
    make_schedule,
    p_sample,
    q_sample,
    q_step,
    reverse_mean,
    sample_loop,
    sample_timesteps,
)
from app.utils.exceptions import ContractError, DimensionError, ParameterError


def zero_denoiser(cond, x_t, t):
    return torch.zeros_like(x_t)


# ============ Schedule ============

def test_default_schedule_length_and_range():
    s = make_schedule(1000)
    assert s.steps == 1000
    assert s.beta[1].item() == pytest.approx(1e-4)
    assert s.beta[1000].item() == pytest.approx(0.02)
    assert (s.beta[1:] > 0).all() and (s.beta[1:] < 1).all()
    assert (torch.diff(s.beta[1:]) >= 0).all()
    assert (torch.diff(s.alpha_bar) < 0).all()
    assert torch.equal(s.sigma2, s.beta)


def test_constant_schedule_product():
    s = make_schedule(5, 0.01, 0.01)
    assert s.alpha_bar[3].item() == pytest.approx(0.970299, abs=1e-12)
    assert s.alpha_bar[1].item() == pytest.approx(1.0 - s.beta[1].item(), abs=1e-15)


def test_alpha_bar_recurrence():
    s = make_schedule(1000)
    ratio = s.alpha_bar[1:] / s.alpha_bar[:-1]
    assert torch.allclose(ratio, s.alpha[1:], atol=1e-12, rtol=0)


@pytest.mark.parametrize("start,end", [(0.0, 0.02), (0.03, 0.02), (1e-4, 1.0)])
def test_invalid_betas_rejected(start, end):
    with pytest.raises(ParameterError):
        make_schedule(10, start, end)


def test_unknown_kind_rejected():
    with pytest.raises(ParameterError):
        make_schedule(10, kind="cosine")


# ============ Forward process ============

def test_q_sample_limits():
    s = make_schedule(50)
    x0 = torch.randn(3, 4, 4, dtype=torch.float64)
    eps = torch.randn(3, 4, 4, dtype=torch.float64)
    signal = math.sqrt(s.alpha_bar[20].item())
    spread = math.sqrt(1.0 - s.alpha_bar[20].item())
    assert torch.allclose(q_sample(x0, 20, torch.zeros_like(x0), s), signal * x0)
    assert torch.allclose(q_sample(torch.zeros_like(x0), 20, eps, s), spread * eps)


def test_q_sample_accepts_recorded_noise():
    s = make_schedule(10)
    noise = NoiseSample.draw((2, 3), seed=5, dtype=torch.float64)
    x0 = torch.ones(2, 3, dtype=torch.float64)
    assert torch.equal(q_sample(x0, 4, noise, s), q_sample(x0, 4, noise.eps, s))
    assert noise.seed == 5


def test_q_sample_batched_timesteps():
    s = make_schedule(100)
    x0 = torch.ones(2, 3, 4, 4, dtype=torch.float64)
    out = q_sample(x0, torch.tensor([1, 100]), torch.zeros_like(x0), s)
    assert out[0].mean().item() == pytest.approx(math.sqrt(s.alpha_bar[1].item()))
    assert out[1].mean().item() == pytest.approx(math.sqrt(s.alpha_bar[100].item()))


def test_q_sample_marginal_variance():
    """alpha_bar = 0.64 -> variance 0.36 for x0 = 0"""
    s = make_schedule(1, 0.36, 0.36)
    eps = torch.randn(100_000, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    out = q_sample(torch.zeros(100_000, dtype=torch.float64), 1, eps, s)
    assert out.var().item() == pytest.approx(0.36, abs=0.01)


@pytest.mark.parametrize("t", [0, 11, -1])
def test_timestep_out_of_range(t):
    s = make_schedule(10)
    x = torch.zeros(2)
    with pytest.raises(ParameterError):
        q_sample(x, t, torch.zeros(2), s)
    with pytest.raises(ParameterError):
        q_step(x, t, s, torch.Generator())


def test_q_sample_shape_mismatch():
    s = make_schedule(10)
    with pytest.raises(DimensionError):
        q_sample(torch.zeros(2, 2), 1, torch.zeros(2, 3), s)


def test_q_step_degenerate_transition():
    s = make_schedule(1, 1e-12, 1e-12)
    x = torch.randn(3, 8, 8, dtype=torch.float64)
    out = q_step(x, 1, s, torch.Generator().manual_seed(0))
    assert (out - x).abs().max().item() < 1e-5


def test_q_step_is_seeded():
    s = make_schedule(10)
    x = torch.ones(3, 4, 4)
    a = q_step(x, 5, s, torch.Generator().manual_seed(9))
    b = q_step(x, 5, s, torch.Generator().manual_seed(9))
    assert torch.equal(a, b)


def test_composed_steps_match_marginal():
    """t-fold q_step composition has the mean and variance of q_sample"""
    s = make_schedule(50)
    rng = torch.Generator().manual_seed(42)
    x0 = 0.7
    x = torch.full((400_000,), x0, dtype=torch.float64)
    for t in range(1, 51):
        x = q_step(x, t, s, rng)
    alpha_bar = s.alpha_bar[50].item()
    assert x.mean().item() == pytest.approx(math.sqrt(alpha_bar) * x0, rel=0.01)
    assert x.var().item() == pytest.approx(1.0 - alpha_bar, rel=0.01)


# ============ Reverse process ============

def test_reverse_mean_without_noise_prediction():
    s = make_schedule(10)
    x_t = torch.randn(3, 4, 4, dtype=torch.float64)
    out = reverse_mean(x_t, torch.zeros_like(x_t), 6, s)
    assert torch.allclose(out, x_t / math.sqrt(s.alpha[6].item()))


def test_reverse_mean_scalar_case():
    s = NoiseSchedule(
        beta=torch.tensor([0.0, 0.01], dtype=torch.float64),
        alpha=torch.tensor([1.0, 0.99], dtype=torch.float64),
        alpha_bar=torch.tensor([1.0, 0.9], dtype=torch.float64),
        sigma2=torch.tensor([0.0, 0.01], dtype=torch.float64),
        timesteps=torch.arange(2),
        beta_start=0.01,
        beta_end=0.01,
    )
    out = reverse_mean(torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64), 1, s)
    expected = (1.0 / math.sqrt(0.99)) * (1.0 - (0.01 / math.sqrt(0.1)) * 0.5)
    assert out.item() == pytest.approx(expected, abs=1e-12)


def test_reverse_mean_recovers_x0_at_first_step():
    s = make_schedule(1000)
    gen = torch.Generator().manual_seed(3)
    for _ in range(20):
        x0 = torch.randn(3, 8, 8, generator=gen, dtype=torch.float64)
        eps = torch.randn(3, 8, 8, generator=gen, dtype=torch.float64)
        x1 = q_sample(x0, 1, eps, s)
        assert (reverse_mean(x1, eps, 1, s) - x0).abs().max().item() <= 1e-6


def test_reverse_mean_shape_mismatch():
    s = make_schedule(10)
    with pytest.raises(ContractError):
        reverse_mean(torch.zeros(3, 4, 4), torch.zeros(3, 4, 2), 2, s)


def test_final_step_adds_no_noise():
    s = make_schedule(10)
    x_t = torch.randn(1, 3, 4, 4)
    out = p_sample(zero_denoiser, None, x_t, 1, s, torch.Generator().manual_seed(0))
    assert torch.equal(out, reverse_mean(x_t, torch.zeros_like(x_t), 1, s))


def test_oracle_denoiser_recovers_x0():
    s = make_schedule(100)
    x0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    x1 = q_sample(x0, 1, eps, s)
    out = p_sample(lambda cond, x, t: eps, None, x1, 1, s, torch.Generator())
    assert (out - x0).abs().max().item() <= 1e-5


def test_p_sample_is_seeded():
    s = make_schedule(10)
    x_t = torch.randn(1, 3, 4, 4)
    a = p_sample(zero_denoiser, None, x_t, 5, s, torch.Generator().manual_seed(1))
    b = p_sample(zero_denoiser, None, x_t, 5, s, torch.Generator().manual_seed(1))
    assert torch.equal(a, b)


def test_p_sample_rejects_bad_denoiser():
    s = make_schedule(10)
    with pytest.raises(ContractError):
        p_sample(lambda cond, x, t: x[:, :1], None, torch.zeros(1, 3, 4, 4), 3, s, torch.Generator())


def test_sample_loop_hand_unrolled():
    """T=4 with a zero denoiser is an affine recursion on the seeded draws"""
    s = make_schedule(4)
    shape = (1, 3, 4, 4)
    out = sample_loop(zero_denoiser, None, shape, s, torch.Generator().manual_seed(7))

    gen = torch.Generator().manual_seed(7)
    x = torch.randn(shape, generator=gen)
    for t in (4, 3, 2):
        x = x / math.sqrt(s.alpha[t].item()) + math.sqrt(s.beta[t].item()) * torch.randn(shape, generator=gen)
    x = x / math.sqrt(s.alpha[1].item())
    assert out.shape == shape
    assert torch.allclose(out, x, atol=1e-6)


def test_sample_loop_is_seeded():
    s = make_schedule(8)
    a = sample_loop(zero_denoiser, None, (2, 3, 4, 4), s, torch.Generator().manual_seed(5))
    b = sample_loop(zero_denoiser, None, (2, 3, 4, 4), s, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


def test_strided_sampling_visits_kept_steps():
    s = make_schedule(12)
    seen = []

    def recording(cond, x, t):
        seen.append(int(t[0]))
        return torch.zeros_like(x)

    sample_loop(recording, None, (1, 3, 2, 2), s, torch.Generator().manual_seed(0), stride=4)
    assert seen == [12, 8, 4]


def test_respaced_schedule_keeps_alpha_bar():
    s = make_schedule(100)
    r = s.respace(10)
    assert r.steps == 10
    assert torch.allclose(r.alpha_bar[1:], s.alpha_bar[10::10], atol=0, rtol=0)
    assert torch.allclose(r.alpha_bar[1:] / r.alpha_bar[:-1], r.alpha[1:], atol=1e-12, rtol=0)
    assert s.respace(1) is s


def test_stride_must_divide_steps():
    with pytest.raises(ParameterError):
        make_schedule(10).respace(3)
    with pytest.raises(ParameterError):
        make_schedule(10).respace(0)


# ============ Loss ============

def test_hfrm_loss_values():
    gen = torch.Generator().manual_seed(0)
    eps = torch.randn(2, 3, 4, 4, generator=gen)
    assert hfrm_loss(eps, eps).item() == 0.0
    assert hfrm_loss(eps, eps + 1).item() == pytest.approx(1.0, abs=1e-6)
    other = torch.randn(2, 3, 4, 4, generator=gen)
    assert hfrm_loss(eps, other).item() == pytest.approx((eps - other).abs().mean().item(), rel=1e-6)
    assert hfrm_loss(eps, other, "l2").item() == pytest.approx((eps - other).pow(2).mean().item(), rel=1e-6)


def test_hfrm_loss_rejects_mismatch_and_unknown_kind():
    with pytest.raises(DimensionError):
        hfrm_loss(torch.zeros(3, 4, 4), torch.zeros(3, 4, 2))
    with pytest.raises(ParameterError):
        hfrm_loss(torch.zeros(3), torch.zeros(3), "huber")


def test_sample_timesteps_range():
    s = make_schedule(7)
    t = sample_timesteps(1000, s, torch.Generator().manual_seed(0))
    assert t.min().item() >= 1 and t.max().item() <= 7
    assert set(t.tolist()) == set(range(1, 8))
