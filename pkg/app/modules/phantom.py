"""
Phantom Module
Deterministic synthetic pelvic planning slices: CT, PTV/OAR masks and a
beam-model dose with sharp field edges
"""
from typing import Dict, List, Sequence, Tuple
import logging
import math

import numpy as np
from scipy import ndimage
from skimage.draw import ellipse

from app.models.schemas import PhantomConfig, PlanningSample, STRUCTURES
from app.utils.exceptions import GenerationError, ParameterError
from app.utils.helpers import derive_seed

logger = logging.getLogger(__name__)

SPLITS: Tuple[str, ...] = ("train", "val", "test")

# Nominal HU and relative electron density per tissue
_HU = {"air": -1000.0, "soft": 40.0, "bone": 700.0, "fluid": 10.0, "gas": -600.0}
_DENSITY = {"soft": 1.0, "bone": 1.6, "fluid": 1.0}


class PhantomGenerator:
    """Builds PlanningSamples that are pure functions of (config, index)"""

    def __init__(self, cfg: PhantomConfig):
        self.cfg = cfg
        self.size = cfg.slice_size

    # ---------- geometry ----------

    def _ellipse_mask(self, center: Tuple[float, float], radii: Tuple[float, float], rotation: float = 0.0) -> np.ndarray:
        mask = np.zeros((self.size, self.size), dtype=bool)
        rr, cc = ellipse(center[0], center[1], radii[0], radii[1], shape=mask.shape, rotation=rotation)
        mask[rr, cc] = True
        return mask

    def _jitter(self, rng: np.random.Generator, fraction: float) -> float:
        """A fraction of the slice size, perturbed by up to +-geometry_jitter (relative)"""
        j = self.cfg.geometry_jitter
        return fraction * self.size * (1.0 + rng.uniform(-j, j))

    def _anatomy(self, rng: np.random.Generator) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """Body outline and structure masks, retried until the OARs clear the PTV"""
        c = self.size / 2.0
        for attempt in range(self.cfg.max_retries):
            body = self._ellipse_mask((c, c), (self._jitter(rng, 0.38), self._jitter(rng, 0.45)))

            ptv = self._ellipse_mask(
                (c + self._jitter(rng, 0.08), c + self._jitter(rng, 0.02) * rng.choice((-1.0, 1.0))),
                (self._jitter(rng, 0.10), self._jitter(rng, 0.12)),
                rotation=rng.uniform(-0.4, 0.4),
            )
            femur_row = c + self._jitter(rng, 0.04)
            femur_r = self._jitter(rng, 0.065)
            masks = {
                "PTV": ptv,
                "ST": self._ellipse_mask(
                    (c - self._jitter(rng, 0.26), c + self._jitter(rng, 0.04)),
                    (self._jitter(rng, 0.05), self._jitter(rng, 0.14)),
                ),
                "FHL": self._ellipse_mask((femur_row, c + self._jitter(rng, 0.30)), (femur_r, femur_r)),
                "FHR": self._ellipse_mask((femur_row, c - self._jitter(rng, 0.30)), (femur_r, femur_r)),
                "BLD": self._ellipse_mask(
                    (c - self._jitter(rng, 0.14), c),
                    (self._jitter(rng, 0.06), self._jitter(rng, 0.09)),
                ),
            }

            inside = all((mask & ~body).sum() == 0 and mask.any() for mask in masks.values())
            clear = all(not (masks[name] & ptv).any() for name in STRUCTURES[1:])
            if inside and clear:
                return body, masks
            logger.debug(f"Rejected phantom geometry on attempt {attempt + 1}")

        raise GenerationError(f"No valid phantom geometry after {self.cfg.max_retries} attempts")

    def _ct(self, rng: np.random.Generator, body: np.ndarray, masks: Dict[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        """HU map windowed to [0, 1] and the relative density map used for attenuation"""
        hu = np.full(body.shape, _HU["air"])
        hu[body] = _HU["soft"]
        hu[masks["BLD"]] = _HU["fluid"]
        hu[masks["ST"]] = _HU["soft"] - 30.0
        hu[masks["FHL"] | masks["FHR"]] = _HU["bone"]
        hu[body] += rng.normal(0.0, 15.0, size=int(body.sum()))

        density = np.zeros(body.shape)
        density[body] = _DENSITY["soft"]
        density[masks["FHL"] | masks["FHR"]] = _DENSITY["bone"]

        lo, hi = self.cfg.hu_window_min, self.cfg.hu_window_max
        ct = np.clip((hu - lo) / (hi - lo), 0.0, 1.0)
        return ct, density

    # ---------- dose ----------

    def _beam(self, angle: float, target: np.ndarray, density: np.ndarray) -> np.ndarray:
        """
        One diverging field aimed at the target centroid: hard lateral edges,
        exp(-mu * radiological depth) along the beam axis
        """
        s = self.size
        rows, cols = np.mgrid[0:s, 0:s].astype(np.float64)
        centroid = np.argwhere(target).mean(axis=0)
        direction = np.array([math.sin(angle), math.cos(angle)])  # source -> target
        normal = np.array([-direction[1], direction[0]])

        rel_r, rel_c = rows - centroid[0], cols - centroid[1]
        along = rel_r * direction[0] + rel_c * direction[1]
        lateral = rel_r * normal[0] + rel_c * normal[1]

        target_pts = np.argwhere(target) - centroid
        half_width = np.abs(target_pts @ normal).max() + 0.5

        source_distance = 1.5 * s
        magnification = np.clip((source_distance + along) / source_distance, 0.1, None)
        field = (np.abs(lateral) <= half_width * magnification).astype(np.float64)

        # Rotate so the beam travels down the rows, integrate density, rotate back
        degrees = math.degrees(angle) - 90.0
        rotated = ndimage.rotate(density, degrees, reshape=False, order=1, mode="constant")
        depth = np.cumsum(np.clip(rotated, 0.0, None), axis=0)
        depth = ndimage.rotate(depth, -degrees, reshape=False, order=1, mode="nearest")

        return field * np.exp(-self.cfg.attenuation * np.clip(depth, 0.0, None))

    def _dose(self, rng: np.random.Generator, body: np.ndarray, ptv: np.ndarray,
              density: np.ndarray, prescription: float) -> np.ndarray:
        offset = rng.uniform(0.0, 2.0 * math.pi)
        total = np.zeros(body.shape)
        for k in range(self.cfg.beam_count):
            angle = offset + 2.0 * math.pi * k / self.cfg.beam_count + rng.normal(0.0, 0.05)
            total += self._beam(angle, ptv, density)

        total *= body
        total = ndimage.gaussian_filter(total, sigma=self.cfg.penumbra_width, mode="constant")
        total = np.clip(total, 0.0, None)
        ptv_mean = total[ptv].mean()
        if not ptv_mean > 0:
            raise GenerationError("PTV received no dose")
        return total * (prescription / ptv_mean)

    # ---------- public ----------

    def generate(self, index: int) -> PlanningSample:
        seed = derive_seed(self.cfg.seed, index)
        rng = np.random.default_rng(seed)
        body, masks = self._anatomy(rng)
        ct, density = self._ct(rng, body, masks)
        prescription = float(rng.uniform(self.cfg.prescription_min, self.cfg.prescription_max))
        dose = self._dose(rng, body, masks["PTV"], density, prescription)
        return PlanningSample(
            sample_id=f"{index:05d}",
            index=index,
            seed=seed,
            ct=ct.astype(np.float32),
            masks={name: mask.astype(np.float32) for name, mask in masks.items()},
            dose=dose.astype(np.float32),
            prescription=prescription,
        )


def generate_sample(cfg: PhantomConfig, index: int) -> PlanningSample:
    """Sample `index` of the phantom family defined by cfg (deterministic)"""
    return PhantomGenerator(cfg).generate(index)


def allocate_split_counts(n_total: int, ratios: Sequence[float]) -> List[int]:
    """Largest-remainder allocation of n_total items over relative weights"""
    weights = np.asarray(ratios, dtype=np.float64)
    if n_total < 0 or weights.ndim != 1 or (weights < 0).any() or weights.sum() <= 0:
        raise ParameterError(f"Cannot allocate {n_total} items over ratios {list(ratios)}")
    exact = weights / weights.sum() * n_total
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    for i in order[: n_total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def split_dataset(n_total: int, ratios: Sequence[int], seed: int) -> List[str]:
    """
    Assign each of n_total items to train/val/test

    Args:
        n_total: Number of items
        ratios: Split sizes (train, val, test) summing to n_total
        seed: Permutation seed

    Returns:
        List of split names indexed by item
    """
    counts = [int(r) for r in ratios]
    if len(counts) != len(SPLITS) or any(c < 0 for c in counts) or sum(counts) != n_total:
        raise ParameterError(f"Split sizes {list(ratios)} do not partition {n_total} items")
    permutation = np.random.default_rng(seed).permutation(n_total)
    assignment = [""] * n_total
    start = 0
    for name, count in zip(SPLITS, counts):
        for item in permutation[start:start + count]:
            assignment[int(item)] = name
        start += count
    return assignment
