"""
Wavelet Module
Single-level orthonormal 2D Haar analysis/synthesis over the last two axes
"""
from typing import NamedTuple

import torch

from app.utils.exceptions import DimensionError


class SubbandSet(NamedTuple):
    """The four Haar subbands of a grid, each half the source size in both axes"""
    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor

    @property
    def high(self) -> torch.Tensor:
        """High-frequency group stacked on the channel axis in (LH, HL, HH) order.

        A 2D grid yields (3, h, w); a (..., C, h, w) tensor yields (..., 3C, h, w).
        """
        if self.ll.dim() == 2:
            return torch.stack((self.lh, self.hl, self.hh), dim=0)
        return torch.cat((self.lh, self.hl, self.hh), dim=-3)

    @property
    def low(self) -> torch.Tensor:
        return self.ll

    @classmethod
    def from_high(cls, high: torch.Tensor, ll: torch.Tensor) -> "SubbandSet":
        """Rebuild a SubbandSet from a (LH, HL, HH) stack and a low band"""
        if ll.dim() == 2:
            if high.dim() != 3 or high.shape[0] != 3:
                raise DimensionError(f"Expected a (3, h, w) high stack, got {tuple(high.shape)}")
            lh, hl, hh = high.unbind(0)
        else:
            lh, hl, hh = torch.chunk(high, 3, dim=-3)
        return cls(ll, lh, hl, hh)

    def energy(self) -> torch.Tensor:
        return sum(band.pow(2).sum() for band in self)


def dwt2(image: torch.Tensor) -> SubbandSet:
    """
    Haar analysis of every trailing 2x2 block [a b; c d]

    Args:
        image: Tensor (..., H, W) with H and W even

    Returns:
        SubbandSet with ll=(a+b+c+d)/2, lh=(a+b-c-d)/2, hl=(a-b+c-d)/2, hh=(a-b-c+d)/2
    """
    if image.dim() < 2:
        raise DimensionError(f"dwt2 needs at least 2 dimensions, got {image.dim()}")
    height, width = image.shape[-2:]
    if height < 2 or width < 2 or height % 2 or width % 2:
        raise DimensionError(f"dwt2 needs even dimensions, got {height}x{width}")

    a = image[..., 0::2, 0::2]
    b = image[..., 0::2, 1::2]
    c = image[..., 1::2, 0::2]
    d = image[..., 1::2, 1::2]

    ll = (a + b + c + d) / 2
    lh = (a + b - c - d) / 2
    hl = (a - b + c - d) / 2
    hh = (a - b - c + d) / 2
    return SubbandSet(ll, lh, hl, hh)


def iwt2(bands: SubbandSet) -> torch.Tensor:
    """
    Exact inverse of dwt2

    Args:
        bands: SubbandSet whose four bands share one shape (..., h, w)

    Returns:
        Tensor (..., 2h, 2w)
    """
    ll, lh, hl, hh = bands
    if not (ll.shape == lh.shape == hl.shape == hh.shape):
        raise DimensionError(
            f"Mismatched band shapes {[tuple(band.shape) for band in bands]}"
        )
    if ll.dim() < 2:
        raise DimensionError("bands need at least 2 dimensions")

    a = (ll + hl + lh + hh) / 2
    b = (ll - hl + lh - hh) / 2
    c = (ll + hl - lh - hh) / 2
    d = (ll - hl - lh + hh) / 2

    *lead, h, w = ll.shape
    # Interleave columns, then rows
    top = torch.stack((a, b), dim=-1).reshape(*lead, h, 2 * w)
    bottom = torch.stack((c, d), dim=-1).reshape(*lead, h, 2 * w)
    return torch.stack((top, bottom), dim=-2).reshape(*lead, 2 * h, 2 * w)


def high_band_energy(image: torch.Tensor) -> torch.Tensor:
    """Squared norm of the LH, HL and HH bands"""
    bands = dwt2(image)
    return bands.lh.pow(2).sum() + bands.hl.pow(2).sum() + bands.hh.pow(2).sum()
