"""
Reporting Module
CSV tables for metric deltas, DVH curves, ablation runs and bench timings,
plus the DVH and dose-panel figures
"""
from typing import Dict, Iterable, List, Optional, Sequence
import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from app.models.schemas import AblationRow, BenchRow, DvhCurve, MetricsReport  # noqa: E402
from app.utils.exceptions import ContractError, PersistenceError  # noqa: E402

logger = logging.getLogger(__name__)

CASE_COLUMNS = ["case_id", "structure", "delta_ci", "delta_d2", "delta_d50", "delta_dmean", "high_band_ratio"]
SUMMARY_COLUMNS = [
    "structure", "cases",
    "delta_ci_mean", "delta_ci_std",
    "delta_d2_mean", "delta_d2_std",
    "delta_d50_mean", "delta_d50_std",
    "delta_dmean_mean", "delta_dmean_std",
    "high_band_ratio_mean",
]
DVH_COLUMNS = ["structure", "source", "dose_gy", "volume_fraction"]


def _write_csv(frame: pd.DataFrame, filename: str) -> None:
    try:
        os.makedirs(os.path.dirname(filename) or ".", exist_ok=True)
        frame.to_csv(filename, index=False)
    except OSError as exc:
        raise PersistenceError(f"Failed to write {filename}: {exc}") from exc
    logger.info(f"Saved CSV to {filename} ({len(frame)} rows)")


def summary_path(cases_csv: str) -> str:
    """`out.csv` -> `out_summary.csv`"""
    stem, ext = os.path.splitext(cases_csv)
    return f"{stem}_summary{ext or '.csv'}"


def case_frame(report: MetricsReport) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in report.cases], columns=CASE_COLUMNS)


def summary_frame(report: MetricsReport) -> pd.DataFrame:
    """Mean and std of |delta| per structure, laid out like the comparison table"""
    cases = case_frame(report)
    cases["high_band_ratio"] = pd.to_numeric(cases["high_band_ratio"], errors="coerce")
    ratios = cases.groupby("structure", sort=False)["high_band_ratio"].mean()
    rows = []
    for agg in report.summary:
        rows.append({
            "structure": agg.structure,
            "cases": agg.cases,
            "delta_ci_mean": agg.ci_mean,
            "delta_ci_std": agg.ci_std,
            "delta_d2_mean": agg.d2_mean,
            "delta_d2_std": agg.d2_std,
            "delta_d50_mean": agg.d50_mean,
            "delta_d50_std": agg.d50_std,
            "delta_dmean_mean": agg.dmean_mean,
            "delta_dmean_std": agg.dmean_std,
            "high_band_ratio_mean": ratios.get(agg.structure),
        })
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def write_metrics_report(report: MetricsReport, filename: str) -> List[str]:
    """
    Write the per-case CSV and its summary sibling

    Returns:
        Paths written (cases, summary)
    """
    _write_csv(case_frame(report), filename)
    summary = summary_path(filename)
    _write_csv(summary_frame(report), summary)
    return [filename, summary]


def dvh_frame(curves: Dict[str, Sequence[DvhCurve]]) -> pd.DataFrame:
    """Long table with one row per (structure, source, dose edge)"""
    frames = []
    for source, source_curves in curves.items():
        for curve in source_curves:
            frames.append(pd.DataFrame({
                "structure": curve.structure,
                "source": source,
                "dose_gy": curve.dose_bins,
                "volume_fraction": curve.volume_fraction,
            }))
    if not frames:
        return pd.DataFrame(columns=DVH_COLUMNS)
    return pd.concat(frames, ignore_index=True)[DVH_COLUMNS]


def plot_dvh(truth: Sequence[DvhCurve], predicted: Sequence[DvhCurve], svg_path: str, title: str = "") -> None:
    """Ground truth solid, prediction dashed, one colour per structure"""
    fig, ax = plt.subplots(figsize=(7, 5))
    colours = plt.get_cmap("tab10")
    pred_by_structure = {curve.structure: curve for curve in predicted}
    for i, gt in enumerate(truth):
        colour = colours(i % 10)
        ax.plot(gt.dose_bins, gt.volume_fraction, color=colour, linestyle="-", label=f"{gt.structure} ground truth")
        pred = pred_by_structure.get(gt.structure)
        if pred is not None:
            ax.plot(pred.dose_bins, pred.volume_fraction, color=colour, linestyle="--",
                    label=f"{gt.structure} prediction")
    ax.set_xlabel("Dose (Gy)")
    ax.set_ylabel("Volume fraction")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    ax.legend(fontsize="small", ncol=2)
    fig.tight_layout()
    try:
        os.makedirs(os.path.dirname(svg_path) or ".", exist_ok=True)
        fig.savefig(svg_path, format="svg")
    except OSError as exc:
        raise PersistenceError(f"Failed to write {svg_path}: {exc}") from exc
    finally:
        plt.close(fig)
    logger.info(f"Saved DVH figure to {svg_path}")


def write_dvh(truth: Sequence[DvhCurve], predicted: Sequence[DvhCurve], csv_path: str, svg_path: str,
              title: str = "") -> None:
    _write_csv(dvh_frame({"ground_truth": truth, "prediction": predicted}), csv_path)
    plot_dvh(truth, predicted, svg_path, title=title)


def write_bench(rows: Iterable[BenchRow], filename: str) -> pd.DataFrame:
    frame = pd.DataFrame([row.model_dump() for row in rows], columns=list(BenchRow.model_fields))
    _write_csv(frame, filename)
    return frame


def ablation_summary(rows: Iterable[AblationRow]) -> pd.DataFrame:
    """Median over seeds of every score, one row per mode"""
    frame = pd.DataFrame([row.model_dump(mode="json") for row in rows], columns=list(AblationRow.model_fields))
    scores = ["train_l1", "ptv_dmean_abs", "high_band_ratio"]
    summary = frame.groupby("mode", sort=True)[scores].median().reset_index()
    summary.insert(1, "seeds", frame.groupby("mode", sort=True)["seed"].nunique().to_numpy())
    return summary


def write_ablation(rows: Sequence[AblationRow], filename: str) -> List[str]:
    """
    Write one row per (mode, seed) run and the per-mode medians next to it

    Returns:
        Paths written (runs, summary)
    """
    frame = pd.DataFrame([row.model_dump(mode="json") for row in rows], columns=list(AblationRow.model_fields))
    _write_csv(frame, filename)
    summary = summary_path(filename)
    _write_csv(ablation_summary(rows), summary)
    return [filename, summary]


def plot_dose_panels(ct: np.ndarray, truth: np.ndarray, predicted: np.ndarray, svg_path: str,
                     ptv: Optional[np.ndarray] = None, title: str = "") -> None:
    """
    CT, ground-truth dose, predicted dose and |error| side by side

    Both dose panels share one colour scale; the PTV outline is drawn on
    every panel when given.
    """
    if not (ct.shape == truth.shape == predicted.shape):
        raise ContractError(f"panel shapes differ: {ct.shape}, {truth.shape}, {predicted.shape}")
    error = np.abs(predicted.astype(np.float64) - truth.astype(np.float64))
    dose_max = max(float(truth.max()), float(predicted.max()), 1e-6)

    fig, axes = plt.subplots(1, 4, figsize=(16, 4.4))
    panels = [
        ("CT", ct, dict(cmap="gray", vmin=0.0, vmax=1.0)),
        ("Ground truth (Gy)", truth, dict(cmap="jet", vmin=0.0, vmax=dose_max)),
        ("Prediction (Gy)", predicted, dict(cmap="jet", vmin=0.0, vmax=dose_max)),
        ("|Error| (Gy)", error, dict(cmap="magma", vmin=0.0)),
    ]
    for ax, (name, image, style) in zip(axes, panels):
        shown = ax.imshow(image, **style)
        if ptv is not None and ptv.any():
            ax.contour(ptv.astype(float), levels=[0.5], colors="white", linewidths=0.8)
        ax.set_title(name)
        ax.axis("off")
        if name != "CT":
            fig.colorbar(shown, ax=ax, fraction=0.046, pad=0.04)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    try:
        os.makedirs(os.path.dirname(svg_path) or ".", exist_ok=True)
        fig.savefig(svg_path, format="svg")
    except OSError as exc:
        raise PersistenceError(f"Failed to write {svg_path}: {exc}") from exc
    finally:
        plt.close(fig)
    logger.info(f"Saved dose panels to {svg_path} (max |error| {error.max():.2f} Gy)")
