"""
Networks Module
The coarse dose UNet (CDPM), the conditioned high-frequency denoiser (HFRM)
and the building blocks they share
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple
import logging
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.models.schemas import NetworkConfig
from app.utils.exceptions import ConfigError, ContractError

logger = logging.getLogger(__name__)


# ============ Building blocks ============

class ConvBlock(nn.Sequential):
    """3x3 conv, GroupNorm, Swish"""

    def __init__(self, in_ch: int, out_ch: int, groups: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.GroupNorm(groups, out_ch),
            nn.SiLU(),
        )


class ResBlock(nn.Module):
    """Two ConvBlocks with a residual path; the timestep embedding is added between them"""

    def __init__(self, in_ch: int, out_ch: int, groups: int, tdim: Optional[int] = None):
        super().__init__()
        self.block1 = ConvBlock(in_ch, out_ch, groups)
        self.block2 = ConvBlock(out_ch, out_ch, groups)
        self.time_proj = nn.Sequential(nn.SiLU(), nn.Linear(tdim, out_ch)) if tdim else None
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.block1(x)
        if self.time_proj is not None:
            if temb is None:
                raise ContractError("this ResBlock needs a timestep embedding")
            h = h + self.time_proj(temb)[:, :, None, None]
        h = self.block2(h)
        return h + self.shortcut(x)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    """Nearest-neighbour x2 followed by a 1x1 conv"""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Attention(nn.Module):
    """
    Multi-head dot-product attention between a feature map (queries) and a
    context map (keys/values); the context defaults to the input itself
    """

    def __init__(self, ch: int, groups: int, heads: int = 1, context_ch: Optional[int] = None):
        super().__init__()
        if ch % heads:
            raise ConfigError(f"{ch} channels cannot be split into {heads} heads")
        self.heads = heads
        self.norm = nn.GroupNorm(groups, ch)
        self.proj_q = nn.Conv2d(ch, ch, 1)
        self.proj_k = nn.Conv2d(context_ch or ch, ch, 1)
        self.proj_v = nn.Conv2d(context_ch or ch, ch, 1)
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        return x.reshape(b, self.heads, c // self.heads, h * w).transpose(-1, -2)

    def weights(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Attention weights (B, heads, queries, keys); each row sums to 1"""
        h = self.norm(x)
        context = h if context is None else context
        q = self._split(self.proj_q(h))
        k = self._split(self.proj_k(context))
        scale = q.shape[-1] ** -0.5
        return torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        b, c, h, w = x.shape
        weights = self.weights(x, context)
        source = self.norm(x) if context is None else context
        v = self._split(self.proj_v(source))
        out = (weights @ v).transpose(-1, -2).reshape(b, c, h, w)
        return x + self.proj_out(out)


class TimeEmbedding(nn.Module):
    """Sinusoidal timestep embedding followed by a two-layer MLP"""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, device=t.device, dtype=torch.float64) / half
        )
        angles = t.to(torch.float64)[:, None] * freqs[None, :]
        emb = torch.cat((angles.sin(), angles.cos()), dim=-1).to(self.mlp[0].weight.dtype)
        return self.mlp(emb)


# ============ Conditioning ============

@dataclass
class ConditioningBundle:
    """
    Conditioning for the denoiser

    image_cond is concatenated with the diffusion state; feature_cond holds one
    encoder feature map per denoiser level from the network producing the
    coarse prediction.
    """
    image_cond: torch.Tensor
    feature_cond: List[torch.Tensor] = field(default_factory=list)

    def zeros_like(self) -> "ConditioningBundle":
        return ConditioningBundle(
            torch.zeros_like(self.image_cond),
            [torch.zeros_like(f) for f in self.feature_cond],
        )

    def detach(self) -> "ConditioningBundle":
        return ConditioningBundle(self.image_cond.detach(), [f.detach() for f in self.feature_cond])

    def repeat(self, copies: int) -> "ConditioningBundle":
        """Repeat along the batch axis"""
        return ConditioningBundle(
            self.image_cond.repeat_interleave(copies, dim=0),
            [f.repeat_interleave(copies, dim=0) for f in self.feature_cond],
        )


class FeaturePort(nn.Module):
    """Inject an aligned feature map by addition or by cross-attention"""

    def __init__(self, feature_ch: int, ch: int, groups: int, heads: int, cross_attention: bool):
        super().__init__()
        self.project = nn.Conv2d(feature_ch, ch, 1)
        self.attention = Attention(ch, groups, heads, context_ch=ch) if cross_attention else None

    def align(self, feature: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        if tuple(feature.shape[-2:]) != tuple(size):
            if feature.shape[-2] < size[0] or feature.shape[-1] < size[1]:
                raise ContractError(
                    f"conditioning feature {tuple(feature.shape[-2:])} is coarser than level {tuple(size)}"
                )
            feature = F.adaptive_avg_pool2d(feature, size)
        return self.project(feature)

    def forward(self, h: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
        context = self.align(feature, tuple(h.shape[-2:]))
        if self.attention is None:
            return h + context
        return self.attention(h, context)


# ============ UNet ============

class UNet(nn.Module):
    """
    Encoder of `levels` modules (ResBlock, then Downsample except the last),
    bottleneck of ResBlock + self-attention + ResBlock, and a mirrored decoder
    of skip-concat, two ResBlocks and an Upsample (except the last module)
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels
        groups = cfg.groupnorm_groups
        tdim = cfg.time_embedding_dim if cfg.use_time_embedding else None

        self.time_embedding = TimeEmbedding(tdim) if tdim else None
        self.stem = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)

        self.encoder = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = chs[0]
        for i, ch in enumerate(chs):
            self.encoder.append(ResBlock(prev, ch, groups, tdim))
            self.downsamples.append(Downsample(ch) if i < cfg.levels - 1 else nn.Identity())
            prev = ch

        self.ports = nn.ModuleList()
        if cfg.feature_channels is not None:
            for i, ch in enumerate(chs):
                self.ports.append(
                    FeaturePort(cfg.feature_channels[i], ch, groups, cfg.attention_heads,
                                cross_attention=i >= cfg.add_levels)
                )

        self.mid_block1 = ResBlock(prev, prev, groups, tdim)
        self.mid_attention = Attention(prev, groups, cfg.attention_heads)
        self.mid_block2 = ResBlock(prev, prev, groups, tdim)

        self.decoder = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(cfg.levels)):
            ch = chs[i]
            self.decoder.append(nn.ModuleList([
                ResBlock(prev + ch, ch, groups, tdim),
                ResBlock(ch, ch, groups, tdim),
            ]))
            if i > 0:
                self.upsamples.append(Upsample(ch, chs[i - 1]))
                prev = chs[i - 1]
            else:
                self.upsamples.append(nn.Identity())
                prev = ch

        self.head = nn.Sequential(
            nn.GroupNorm(groups, prev),
            nn.SiLU(),
            nn.Conv2d(prev, cfg.out_channels, 3, padding=1),
        )

    def forward(
        self,
        x: torch.Tensor,
        t: Optional[torch.Tensor] = None,
        features: Optional[List[torch.Tensor]] = None,
    ) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """
        Returns:
            Tuple of (output, encoder_features), encoder_features holding the
            post-ResBlock activation of every encoder module
        """
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ContractError(f"expected (B, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        self.cfg.check_input_size(x.shape[-2], x.shape[-1])

        temb = None
        if self.time_embedding is not None:
            if t is None:
                raise ContractError("timestep required")
            temb = self.time_embedding(t.reshape(-1).to(x.device))
            if temb.shape[0] != x.shape[0]:
                temb = temb.expand(x.shape[0], -1)

        if len(self.ports):
            if features is None or len(features) != len(self.ports):
                raise ContractError(
                    f"expected {len(self.ports)} conditioning features, got {0 if features is None else len(features)}"
                )

        h = self.stem(x)
        skips: List[torch.Tensor] = []
        for i, (block, down) in enumerate(zip(self.encoder, self.downsamples)):
            h = block(h, temb)
            if len(self.ports):
                h = self.ports[i](h, features[i])
            skips.append(h)
            h = down(h)

        encoder_features = list(skips)

        h = self.mid_block1(h, temb)
        h = self.mid_attention(h)
        h = self.mid_block2(h, temb)

        for blocks, up in zip(self.decoder, self.upsamples):
            h = torch.cat((h, skips.pop()), dim=1)
            for block in blocks:
                h = block(h, temb)
            h = up(h)

        return self.head(h), encoder_features


# ============ Builders and forward helpers ============

def build_cdpm(cfg: NetworkConfig, seed: Optional[int] = None) -> UNet:
    """Coarse dose UNet; `seed` makes the initial parameters reproducible"""
    if cfg.use_time_embedding or cfg.feature_channels is not None:
        raise ConfigError("the coarse network takes neither timesteps nor feature conditioning")
    if seed is not None:
        torch.manual_seed(seed)
    model = UNet(cfg)
    logger.info(f"Built CDPM: {count_parameters(model):,} parameters, widths {cfg.channels}")
    return model


def build_hfrm(cfg: NetworkConfig, seed: Optional[int] = None) -> UNet:
    """Time-conditioned denoiser with the CDPM topology plus feature ports"""
    if not cfg.use_time_embedding:
        raise ConfigError("the denoiser needs use_time_embedding=True")
    if seed is not None:
        torch.manual_seed(seed)
    model = UNet(cfg)
    logger.info(f"Built denoiser: {count_parameters(model):,} parameters, widths {cfg.channels}")
    return model


def cdpm_forward(model: UNet, X: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Coarse dose (B, 1, H, W) in normalized units plus the encoder feature list"""
    return model(X)


def downsample_planning(X: torch.Tensor) -> torch.Tensor:
    """Bring the planning stack to subband resolution (x2 average pooling)"""
    return F.avg_pool2d(X, 2)


def hfrm_denoise(model: UNet, cond: ConditioningBundle, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Noise prediction for the state x_t at timestep t"""
    if cond.image_cond.shape[-2:] != x_t.shape[-2:] or cond.image_cond.shape[0] != x_t.shape[0]:
        raise ContractError(
            f"image condition {tuple(cond.image_cond.shape)} misaligned with state {tuple(x_t.shape)}"
        )
    expected = model.cfg.in_channels - x_t.shape[1]
    if cond.image_cond.shape[1] != expected:
        raise ContractError(f"image condition needs {expected} channels, got {cond.image_cond.shape[1]}")
    eps, _ = model(torch.cat((x_t, cond.image_cond), dim=1), t, cond.feature_cond or None)
    return eps


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
