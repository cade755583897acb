"""
Diffusion Module
DDPM mathematics on subband stacks: variance schedule, forward process,
reverse step, sampling loop and the noise-prediction loss
"""
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union
import logging

import torch
import torch.nn.functional as F

from app.utils.exceptions import ContractError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

# (cond, x_t, t) -> predicted noise; t is a (B,) long tensor of original timesteps
Denoiser = Callable[[object, torch.Tensor, torch.Tensor], torch.Tensor]
Step = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Per-step tables in float64, indexed 1..T (index 0 holds beta=0, alpha_bar=1)

    `timesteps[k]` maps a row of the tables to the timestep of the original
    schedule; it is the identity unless the schedule was respaced.
    """
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    sigma2: torch.Tensor
    timesteps: torch.Tensor
    beta_start: float
    beta_end: float
    kind: str = "linear"

    @property
    def steps(self) -> int:
        return self.beta.shape[0] - 1

    def check_step(self, t: Step) -> None:
        values = torch.as_tensor(t)
        if values.numel() == 0:
            raise ParameterError("empty timestep tensor")
        if int(values.min()) < 1 or int(values.max()) > self.steps:
            raise ParameterError(f"timestep outside 1..{self.steps}: {values.tolist()}")

    def respace(self, stride: int) -> "NoiseSchedule":
        """
        Keep every stride-th step ({stride, 2*stride, ..., T}); the kept steps
        share the original alpha_bar and the per-step betas are re-derived
        """
        if stride < 1:
            raise ParameterError(f"stride must be positive, got {stride}")
        if stride == 1:
            return self
        if self.steps % stride:
            raise ParameterError(f"stride {stride} does not divide T={self.steps}")

        kept = torch.arange(stride, self.steps + 1, stride)
        alpha_bar = torch.cat((torch.ones(1, dtype=torch.float64), self.alpha_bar[kept]))
        beta = torch.zeros_like(alpha_bar)
        beta[1:] = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
        alpha = 1.0 - beta
        return NoiseSchedule(
            beta=beta,
            alpha=alpha,
            alpha_bar=alpha_bar,
            sigma2=beta.clone(),
            timesteps=torch.cat((torch.zeros(1, dtype=torch.long), self.timesteps[kept])),
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            kind=self.kind,
        )


@dataclass(frozen=True)
class NoiseSample:
    """Standard-normal draws together with the seed that produced them"""
    eps: torch.Tensor
    seed: int

    @classmethod
    def draw(cls, shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float32) -> "NoiseSample":
        generator = torch.Generator().manual_seed(seed)
        return cls(torch.randn(tuple(shape), generator=generator, dtype=dtype), seed)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    """
    Build a variance schedule

    Args:
        T: Number of diffusion steps
        beta_start: First variance increment
        beta_end: Last variance increment (inclusive)
        kind: Only "linear" is supported

    Returns:
        NoiseSchedule with sigma2 = beta
    """
    if kind != "linear":
        raise ParameterError(f"Unsupported schedule kind: {kind}")
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")

    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    beta = torch.cat((torch.zeros(1, dtype=torch.float64), betas))
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma2=beta.clone(),
        timesteps=torch.arange(T + 1),
        beta_start=beta_start,
        beta_end=beta_end,
        kind=kind,
    )


def _coefficient(table: torch.Tensor, t: Step, like: torch.Tensor) -> torch.Tensor:
    """Gather table[t] and shape it to broadcast against a (B, ...) tensor"""
    if isinstance(t, int):
        return table[t].to(dtype=like.dtype, device=like.device)
    index = t.to(device="cpu", dtype=torch.long)
    values = table[index].to(dtype=like.dtype, device=like.device)
    if values.dim() == 1 and like.dim() > 1:
        values = values.reshape(-1, *([1] * (like.dim() - 1)))
    return values


def _noise_tensor(eps: Union[torch.Tensor, NoiseSample]) -> torch.Tensor:
    return eps.eps if isinstance(eps, NoiseSample) else eps


def q_sample(x0: torch.Tensor, t: Step, eps: Union[torch.Tensor, NoiseSample], s: NoiseSchedule) -> torch.Tensor:
    """Closed-form marginal: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps"""
    s.check_step(t)
    noise = _noise_tensor(eps)
    if noise.shape != x0.shape:
        raise DimensionError(f"noise shape {tuple(noise.shape)} differs from state {tuple(x0.shape)}")
    signal = _coefficient(torch.sqrt(s.alpha_bar), t, x0)
    spread = _coefficient(torch.sqrt(1.0 - s.alpha_bar), t, x0)
    return signal * x0 + spread * noise


def q_step(x_prev: torch.Tensor, t: Step, s: NoiseSchedule, rng: torch.Generator) -> torch.Tensor:
    """One forward transition: sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * z"""
    s.check_step(t)
    z = torch.randn(x_prev.shape, generator=rng, dtype=x_prev.dtype).to(x_prev.device)
    keep = _coefficient(torch.sqrt(1.0 - s.beta), t, x_prev)
    spread = _coefficient(torch.sqrt(s.beta), t, x_prev)
    return keep * x_prev + spread * z


def reverse_mean(x_t: torch.Tensor, eps_pred: torch.Tensor, t: Step, s: NoiseSchedule) -> torch.Tensor:
    """mu = (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(alpha_t)"""
    s.check_step(t)
    if eps_pred.shape != x_t.shape:
        raise ContractError(f"noise prediction {tuple(eps_pred.shape)} differs from state {tuple(x_t.shape)}")
    inv_sqrt_alpha = _coefficient(1.0 / torch.sqrt(s.alpha), t, x_t)
    noise_scale = _coefficient((1.0 - s.alpha) / torch.sqrt(1.0 - s.alpha_bar), t, x_t)
    return inv_sqrt_alpha * (x_t - noise_scale * eps_pred)


def p_sample(
    denoiser: Denoiser,
    cond,
    x_t: torch.Tensor,
    t: int,
    s: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """
    One reverse transition

    The denoiser receives the original-schedule timestep, so a respaced
    schedule can drive a network trained on the full one. The final step
    (t == 1) adds no noise.
    """
    s.check_step(t)
    batch = x_t.shape[0] if x_t.dim() == 4 else 1
    timestep = torch.full((batch,), int(s.timesteps[t]), dtype=torch.long, device=x_t.device)
    eps_pred = denoiser(cond, x_t, timestep)
    if eps_pred.shape != x_t.shape:
        raise ContractError(
            f"denoiser returned {tuple(eps_pred.shape)} for state {tuple(x_t.shape)}"
        )
    mean = reverse_mean(x_t, eps_pred, t, s)
    if t == 1:
        return mean
    z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype).to(x_t.device)
    return mean + float(torch.sqrt(s.sigma2[t])) * z


@torch.no_grad()
def sample_loop(
    denoiser: Denoiser,
    cond,
    shape: Sequence[int],
    s: NoiseSchedule,
    rng: torch.Generator,
    stride: int = 1,
    device: Optional[torch.device] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """
    Ancestral sampling from N(0, I) down to the clean state

    Draw order on `rng`: the initial state first, then one noise tensor per
    step from t = T' down to 2 on the (possibly respaced) schedule.
    """
    schedule = s.respace(stride)
    x = torch.randn(tuple(shape), generator=rng, dtype=dtype).to(device or "cpu")
    for t in range(schedule.steps, 0, -1):
        x = p_sample(denoiser, cond, x, t, schedule, rng)
    logger.debug(f"Sampled {tuple(shape)} in {schedule.steps} steps (stride {stride})")
    return x


def hfrm_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor, kind: str = "l1") -> torch.Tensor:
    """Noise-prediction loss averaged over all elements (L1 by default, L2 for ablation)"""
    if eps_true.shape != eps_pred.shape:
        raise DimensionError(f"shape mismatch {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}")
    if kind == "l1":
        return F.l1_loss(eps_pred, eps_true)
    if kind == "l2":
        return F.mse_loss(eps_pred, eps_true)
    raise ParameterError(f"Unknown loss kind: {kind}")


def sample_timesteps(batch: int, s: NoiseSchedule, rng: torch.Generator) -> torch.Tensor:
    """Uniform t in 1..T, one per batch element"""
    return torch.randint(1, s.steps + 1, (batch,), generator=rng)
