"""
Metrics Module
Dose percentiles, mean dose, conformity index, DVH and prediction-vs-truth deltas.
Every function accepts 2D slices or 3D volumes.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence
import logging
import math

import numpy as np
import torch

from app.models.schemas import AggregateDelta, CaseDelta, DvhCurve, MetricsReport, STRUCTURES
from app.modules.wavelet import high_band_energy
from app.utils.exceptions import ContractError, EmptyMaskError, ParameterError

logger = logging.getLogger(__name__)


def _masked(dose: np.ndarray, mask: np.ndarray) -> np.ndarray:
    dose = np.asarray(dose, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if dose.shape != mask.shape:
        raise ContractError(f"dose {dose.shape} and mask {mask.shape} differ")
    values = dose[mask]
    if values.size == 0:
        raise EmptyMaskError("structure mask is empty")
    return values


def dose_percentile(dose: np.ndarray, mask: np.ndarray, m: float) -> float:
    """
    D_m: the largest dose D such that at least ceil(m% * N) in-mask voxels receive >= D

    Args:
        dose: Dose grid in Gy
        mask: Binary structure mask
        m: Volume percentage in (0, 100]

    Returns:
        Dose in Gy
    """
    if not (0 < m <= 100):
        raise ParameterError(f"percentage must be in (0, 100], got {m}")
    values = np.sort(_masked(dose, mask))[::-1]
    # Round before ceil so 2 * 50 / 100 stays 1, not 1.0000000000000002
    k = max(1, math.ceil(round(m * values.size / 100.0, 9)))
    return float(values[k - 1])


def mean_dose(dose: np.ndarray, mask: np.ndarray) -> float:
    return float(_masked(dose, mask).mean())


def conformity_index(dose: np.ndarray, ptv_mask: np.ndarray, prescription: float) -> float:
    """Paddick CI = |PTV & ISO|^2 / (|PTV| * |ISO|) with ISO = {dose >= prescription}"""
    if prescription <= 0:
        raise ParameterError(f"prescription must be positive, got {prescription}")
    dose = np.asarray(dose, dtype=np.float64)
    ptv = np.asarray(ptv_mask).astype(bool)
    if dose.shape != ptv.shape:
        raise ContractError(f"dose {dose.shape} and mask {ptv.shape} differ")
    v_ptv = int(ptv.sum())
    if v_ptv == 0:
        raise EmptyMaskError("PTV mask is empty")
    iso = dose >= prescription
    v_iso = int(iso.sum())
    if v_iso == 0:
        return 0.0
    overlap = int((iso & ptv).sum())
    return overlap * overlap / (v_ptv * v_iso)


def dvh(dose: np.ndarray, mask: np.ndarray, bin_width: float, max_dose: float, structure: str = "") -> DvhCurve:
    """
    Cumulative DVH: fraction of in-mask voxels with dose >= each edge 0, w, 2w, ..., max_dose

    Negative doses count as 0 Gy, so the curve always starts at 1.0.
    """
    if bin_width <= 0:
        raise ParameterError(f"bin_width must be positive, got {bin_width}")
    if max_dose < 0:
        raise ParameterError(f"max_dose must be non-negative, got {max_dose}")
    values = np.sort(np.clip(_masked(dose, mask), 0.0, None))
    edges = np.arange(int(math.floor(max_dose / bin_width + 1e-9)) + 1) * bin_width
    at_least = values.size - np.searchsorted(values, edges, side="left")
    return DvhCurve(
        structure=structure,
        dose_bins=edges.tolist(),
        volume_fraction=(at_least / values.size).tolist(),
    )


def high_band_energy_ratio(pred: np.ndarray, gt: np.ndarray) -> float:
    """||high bands of pred|| / ||high bands of gt||; inf when the truth has no detail"""
    pred_energy = float(high_band_energy(torch.as_tensor(np.asarray(pred, dtype=np.float64))))
    gt_energy = float(high_band_energy(torch.as_tensor(np.asarray(gt, dtype=np.float64))))
    if gt_energy == 0.0:
        return math.inf if pred_energy > 0 else 1.0
    return math.sqrt(pred_energy / gt_energy)


@dataclass
class DoseCase:
    """A dose map with the masks and prescription it is evaluated against"""
    case_id: str
    dose: np.ndarray
    masks: Dict[str, np.ndarray]
    prescription: float


def _structure_metrics(case: DoseCase, structure: str) -> Dict[str, Optional[float]]:
    mask = case.masks[structure]
    return {
        "ci": conformity_index(case.dose, mask, case.prescription) if structure == "PTV" else None,
        "d2": dose_percentile(case.dose, mask, 2),
        "d50": dose_percentile(case.dose, mask, 50),
        "dmean": mean_dose(case.dose, mask),
    }


def _abs_stats(values: List[float]) -> tuple:
    magnitudes = np.abs(np.asarray(values, dtype=np.float64))
    return float(magnitudes.mean()), float(magnitudes.std())


def aggregate_deltas(cases: Sequence[CaseDelta]) -> List[AggregateDelta]:
    """Mean and population std of |delta| per structure, in first-seen structure order"""
    summary = []
    for structure in dict.fromkeys(c.structure for c in cases):
        rows = [c for c in cases if c.structure == structure]
        ci_values = [c.delta_ci for c in rows if c.delta_ci is not None]
        ci_mean, ci_std = _abs_stats(ci_values) if ci_values else (None, None)
        d2_mean, d2_std = _abs_stats([c.delta_d2 for c in rows])
        d50_mean, d50_std = _abs_stats([c.delta_d50 for c in rows])
        dmean_mean, dmean_std = _abs_stats([c.delta_dmean for c in rows])
        summary.append(AggregateDelta(
            structure=structure,
            cases=len(rows),
            ci_mean=ci_mean,
            ci_std=ci_std,
            d2_mean=d2_mean,
            d2_std=d2_std,
            d50_mean=d50_mean,
            d50_std=d50_std,
            dmean_mean=dmean_mean,
            dmean_std=dmean_std,
        ))
    return summary


def delta_report(pred_cases: Sequence[DoseCase], gt_cases: Sequence[DoseCase],
                 structures: Sequence[str] = STRUCTURES) -> MetricsReport:
    """
    Signed metric(pred) - metric(gt) per case and structure, plus |delta| aggregates

    Raises:
        ContractError: Cases that cannot be paired by id, or whose masks differ
    """
    truth = {case.case_id: case for case in gt_cases}
    if len(truth) != len(gt_cases) or len({c.case_id for c in pred_cases}) != len(pred_cases):
        raise ContractError("duplicate case ids")
    pred_ids = {c.case_id for c in pred_cases}
    if pred_ids != set(truth):
        missing = sorted(set(truth) ^ pred_ids)
        raise ContractError(f"unpaired cases: {', '.join(missing)}")

    rows: List[CaseDelta] = []
    for pred in pred_cases:
        gt = truth[pred.case_id]
        ratio = high_band_energy_ratio(pred.dose, gt.dose) if pred.dose.shape[-1] % 2 == 0 and pred.dose.shape[-2] % 2 == 0 else None
        for structure in structures:
            if not np.array_equal(pred.masks[structure], gt.masks[structure]):
                raise ContractError(f"case {pred.case_id}: {structure} masks differ between prediction and truth")
            p = _structure_metrics(pred, structure)
            g = _structure_metrics(gt, structure)
            rows.append(CaseDelta(
                case_id=pred.case_id,
                structure=structure,
                delta_ci=None if p["ci"] is None else p["ci"] - g["ci"],
                delta_d2=p["d2"] - g["d2"],
                delta_d50=p["d50"] - g["d50"],
                delta_dmean=p["dmean"] - g["dmean"],
                high_band_ratio=ratio,
            ))

    logger.info(f"Evaluated {len(pred_cases)} cases over {len(structures)} structures")
    return MetricsReport(cases=rows, summary=aggregate_deltas(rows))
