"""
Command-line entrypoint
Dataset generation, training, inference, evaluation, DVH and dose plots,
the mode ablation study and the denoiser speed benchmark: `python main.py <command> [flags]`
"""
from typing import List, Optional, Sequence
import argparse
import logging
import os
import sys

import numpy as np

from app.config import get_settings, load_run_config
from app.models.schemas import PipelineMode, PredictionManifest, STRUCTURES, RunConfig
from app.modules.checkpoint import load_checkpoint
from app.modules.dataset import PlanningDataset, read_array, read_dataset, write_array, write_dataset
from app.modules.diffusion import make_schedule
from app.modules.metrics import DoseCase, delta_report, dvh
from app.modules.phantom import PhantomGenerator, allocate_split_counts, split_dataset
from app.modules.pipeline import (
    FDDMModels,
    Trainer,
    ablation_study,
    benchmark_step_cost,
    check_mode_compatible,
    network_configs,
    predict_cases,
)
from app.modules.reporting import (
    ablation_summary,
    plot_dose_panels,
    write_ablation,
    write_bench,
    write_dvh,
    write_metrics_report,
)
from app.utils.exceptions import ConfigError, DatasetError, FDDMError, UsageError
from app.utils.helpers import load_json, save_to_json, setup_logging

logger = logging.getLogger(__name__)

PREDICTION_MANIFEST = "prediction_manifest.json"


class CommandParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting with status 2"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _parse_size(value: str) -> tuple:
    try:
        height, width = (int(part) for part in value.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 160x160, got {value!r}")
    if height < 2 or width < 2:
        raise argparse.ArgumentTypeError(f"size too small: {value}")
    return height, width


def _parse_structures(value: str) -> List[str]:
    names = [name.strip().upper() for name in value.split(",") if name.strip()]
    unknown = [name for name in names if name not in STRUCTURES]
    if unknown or not names:
        raise argparse.ArgumentTypeError(f"structures must be drawn from {','.join(STRUCTURES)}, got {value!r}")
    return names


def _parse_modes(value: str) -> List[PipelineMode]:
    try:
        modes = [PipelineMode(name.strip().upper()) for name in value.split(",") if name.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"modes must be drawn from A,B,C,D, got {value!r}")
    if not modes:
        raise argparse.ArgumentTypeError("at least one mode is needed")
    return modes


def _parse_seeds(value: str) -> List[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {value!r}")


# ============ Commands ============

def cmd_gen_data(args, cfg: RunConfig) -> None:
    phantom = cfg.phantom_config()
    count = args.count if args.count is not None else int(round(sum(phantom.split_ratios)))
    if count < 0:
        raise UsageError(f"--count must be non-negative, got {count}")

    splits = split_dataset(count, allocate_split_counts(count, phantom.split_ratios), phantom.seed)
    generator = PhantomGenerator(phantom)
    samples = [generator.generate(index) for index in range(count)]
    write_dataset(samples, args.out, splits, generator=phantom.model_dump(mode="json"))
    logger.info(f"Generated {count} phantom slices into {args.out}")


def cmd_train(args, cfg: RunConfig) -> None:
    mode = PipelineMode(args.mode)
    train_cfg = cfg.train_config().model_copy(update={"mode": mode})
    device = get_settings().device

    train_set = PlanningDataset(read_dataset(args.data, "train"))
    val_set = PlanningDataset(read_dataset(args.data, "val"))

    if args.resume and os.path.exists(args.out):
        checkpoint = load_checkpoint(args.out)
        if checkpoint.networks != network_configs(cfg.hyperparameters(), mode):
            raise ConfigError(f"checkpoint {args.out} was trained with different network settings")
        trainer = Trainer.from_checkpoint(checkpoint, train_cfg, device=device)
    else:
        models = FDDMModels.for_mode(cfg.hyperparameters(), mode, seed=train_cfg.seed)
        trainer = Trainer(models, train_cfg, device=device)

    loss_csv = args.loss_csv or f"{os.path.splitext(args.out)[0]}_loss.csv"
    reports = trainer.fit(train_set, checkpoint_path=args.out, loss_csv=loss_csv, val_dataset=val_set)
    if reports:
        logger.info(f"✅ Trained {len(reports)} steps; last l_total={reports[-1].l_total:.5f}")
    logger.info(f"Checkpoint: {args.out}, loss log: {loss_csv}")


def cmd_predict(args, cfg: RunConfig) -> None:
    checkpoint = load_checkpoint(args.ckpt)
    mode = PipelineMode(args.mode) if args.mode else checkpoint.mode
    check_mode_compatible(list(checkpoint.networks), mode)
    if mode is not checkpoint.mode:
        logger.info(f"Running mode {mode.value} with the networks of a mode {checkpoint.mode.value} checkpoint")
    models = FDDMModels.from_checkpoint(checkpoint)
    schedule = make_schedule(checkpoint.timesteps, checkpoint.beta_start, checkpoint.beta_end,
                             checkpoint.schedule_kind)

    stride = args.stride if args.stride is not None else cfg.test_stride
    if not mode.uses_diffusion and args.stride is not None:
        logger.warning(f"Mode {mode.value} does not sample; --stride {args.stride} ignored")
    if not mode.uses_diffusion:
        stride = 1
    schedule.respace(stride)  # rejects strides that do not divide T

    samples = list(read_dataset(args.data, args.split))
    for sample in samples:
        for name, net_cfg in checkpoint.networks.items():
            size = sample.shape if name in ("cdpm", "image_denoiser") else tuple(s // 2 for s in sample.shape)
            net_cfg.check_input_size(*size)

    doses = predict_cases(models, samples, schedule, mode, stride, cfg.seed,
                          device=get_settings().device, workers=args.workers)
    for sample_id, dose in doses.items():
        write_array(os.path.join(args.out, f"{sample_id}.arr"), dose)

    manifest = PredictionManifest(
        checkpoint=os.path.abspath(args.ckpt),
        mode=mode,
        seed=cfg.seed,
        stride=stride,
        split=args.split,
        cases=[sample.sample_id for sample in samples],
    )
    save_to_json(manifest.model_dump(mode="json"), os.path.join(args.out, PREDICTION_MANIFEST), strict=True)
    logger.info(f"✅ Wrote {len(samples)} predictions to {args.out}")


def _evaluated_split(pred_dir: str, split: Optional[str]) -> str:
    """--split, else the split recorded by predict, else test"""
    manifest_path = os.path.join(pred_dir, PREDICTION_MANIFEST)
    if split is None and os.path.exists(manifest_path):
        split = load_json(manifest_path).get("split")
    return split or "test"


def _read_prediction(pred_dir: str, sample_id: str) -> np.ndarray:
    path = os.path.join(pred_dir, f"{sample_id}.arr")
    if not os.path.exists(path):
        raise DatasetError(f"No prediction for case {sample_id} ({path})")
    return read_array(path, label=f"prediction {sample_id}")


def _paired_cases(pred_dir: str, data_dir: str, split: Optional[str]):
    """Ground-truth and predicted DoseCases for every sample of the evaluated split"""
    truth, predicted = [], []
    for sample in read_dataset(data_dir, _evaluated_split(pred_dir, split)):
        dose = _read_prediction(pred_dir, sample.sample_id)
        truth.append(DoseCase(sample.sample_id, sample.dose, sample.masks, sample.prescription))
        predicted.append(DoseCase(sample.sample_id, dose, sample.masks, sample.prescription))
    return truth, predicted


def cmd_evaluate(args, cfg: RunConfig) -> None:
    truth, predicted = _paired_cases(args.pred, args.data, args.split)
    report = delta_report(predicted, truth)
    paths = write_metrics_report(report, args.out)
    logger.info(f"✅ Evaluated {len(truth)} cases: {', '.join(paths)}")


def cmd_plot_dvh(args, cfg: RunConfig) -> None:
    truth, predicted = _paired_cases(args.pred, args.data, args.split)
    if args.case:
        truth = [c for c in truth if c.case_id == args.case]
        predicted = [c for c in predicted if c.case_id == args.case]
        if not truth:
            raise DatasetError(f"Case {args.case} is not in the evaluated split")
    if not truth:
        raise DatasetError("No cases to plot")

    # Cases are pooled voxel-wise, the way a multi-slice volume would be
    def pooled(cases, structure):
        dose = np.concatenate([c.dose.ravel() for c in cases])
        mask = np.concatenate([c.masks[structure].ravel() for c in cases])
        return dose, mask

    max_dose = max(float(np.max(c.dose)) for c in truth + predicted)
    gt_curves, pred_curves = [], []
    for structure in args.structures:
        gt_curves.append(dvh(*pooled(truth, structure), args.bin_width, max_dose, structure=structure))
        pred_curves.append(dvh(*pooled(predicted, structure), args.bin_width, max_dose, structure=structure))

    stem = os.path.splitext(args.out)[0]
    title = f"Case {args.case}" if args.case else f"{len(truth)} cases"
    write_dvh(gt_curves, pred_curves, f"{stem}.csv", f"{stem}.svg", title=title)


def cmd_plot_dose(args, cfg: RunConfig) -> None:
    samples = list(read_dataset(args.data, _evaluated_split(args.pred, args.split)))
    if args.case:
        samples = [s for s in samples if s.sample_id == args.case]
        if not samples:
            raise DatasetError(f"Case {args.case} is not in the evaluated split")
    if not samples:
        raise DatasetError("No cases to plot")

    sample = samples[0]
    predicted = _read_prediction(args.pred, sample.sample_id)
    plot_dose_panels(sample.ct, sample.dose, predicted, args.out, ptv=sample.masks["PTV"].astype(bool),
                     title=f"Case {sample.sample_id} ({sample.prescription:.1f} Gy)")


def cmd_ablate(args, cfg: RunConfig) -> None:
    samples = list(read_dataset(args.data, args.split))
    if not samples:
        raise DatasetError(f"Split {args.split} of {args.data} is empty")
    seeds = args.seeds if args.seeds else [cfg.seed + i for i in range(3)]
    stride = args.stride if args.stride is not None else cfg.test_stride

    rows = ablation_study(samples, cfg.hyperparameters(), cfg.train_config(), args.modes, seeds,
                          stride=stride, device=get_settings().device)
    paths = write_ablation(rows, args.out or os.path.join(get_settings().artifacts_dir, "ablation.csv"))
    for _, row in ablation_summary(rows).iterrows():
        logger.info(
            f"mode {row['mode']} (median of {row['seeds']} seeds): L1={row['train_l1']:.4f} "
            f"|dDmean|={row['ptv_dmean_abs']:.3f} Gy high-band ratio={row['high_band_ratio']:.3f}"
        )
    logger.info(f"✅ Ablation written to {', '.join(paths)}")


def cmd_bench(args, cfg: RunConfig) -> None:
    height, width = args.size
    if height % 2 or width % 2:
        raise UsageError(f"--size must be even, got {height}x{width}")
    row = benchmark_step_cost(cfg.hyperparameters(), height, width, trials=args.trials,
                              steps=args.steps or cfg.bench_steps, device=get_settings().device,
                              seed=cfg.seed)
    write_bench([row], args.out or os.path.join(get_settings().artifacts_dir, "bench.csv"))


# ============ Parser ============

def build_parser() -> CommandParser:
    parser = CommandParser(prog="fddm", description="Frequency-domain diffusion dose prediction toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=CommandParser)
    sub.required = True

    def add(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="Flat key = value run config")
        p.add_argument("--seed", type=int, help="Overrides FDDM_SEED and the config seed")
        return p

    p = add("gen-data", "Generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.set_defaults(handler=cmd_gen_data)

    p = add("train", "Train the networks of one mode")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=[m.value for m in PipelineMode], default=PipelineMode.FULL.value)
    p.add_argument("--out", required=True, help="Checkpoint path")
    p.add_argument("--loss-csv")
    p.add_argument("--resume", action="store_true", help="Continue from --out if it exists")
    p.set_defaults(handler=cmd_train)

    p = add("predict", "Predict dose for one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--stride", type=int)
    p.add_argument("--mode", choices=[m.value for m in PipelineMode],
                   help="Run another mode with the checkpoint's networks (default: the checkpoint's mode)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_predict)

    p = add("evaluate", "Metric deltas between predictions and ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--out", required=True, help="Per-case CSV; the summary goes next to it")
    p.set_defaults(handler=cmd_evaluate)

    p = add("plot-dvh", "DVH curves of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--structures", type=_parse_structures, default=list(STRUCTURES))
    p.add_argument("--case")
    p.add_argument("--bin-width", type=float, default=0.5)
    p.add_argument("--out", required=True, help="Output stem; writes <stem>.csv and <stem>.svg")
    p.set_defaults(handler=cmd_plot_dvh)

    p = add("plot-dose", "CT, ground truth, prediction and |error| of one case")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--case", help="Sample id (default: the first case of the split)")
    p.add_argument("--out", required=True, help="SVG path")
    p.set_defaults(handler=cmd_plot_dose)

    p = add("ablate", "Train and score modes A-D on one split for several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("--modes", type=_parse_modes, default=list(PipelineMode))
    p.add_argument("--seeds", type=_parse_seeds, help="Comma-separated (default: seed, seed+1, seed+2)")
    p.add_argument("--stride", type=int)
    p.add_argument("--out", help="Per-run CSV (default <artifacts_dir>/ablation.csv); medians go next to it")
    p.set_defaults(handler=cmd_ablate)

    p = add("bench", "Time wavelet-domain against image-domain denoiser steps")
    p.add_argument("--size", type=_parse_size, default=(160, 160))
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="Timing CSV (default <artifacts_dir>/bench.csv)")
    p.set_defaults(handler=cmd_bench)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit code"""
    try:
        args = build_parser().parse_args(argv)
        settings = get_settings()
        setup_logging(settings.log_file, getattr(logging, settings.log_level.upper(), logging.INFO))
        cfg = load_run_config(args.config, seed_override=args.seed)
        args.handler(args, cfg)
        return 0
    except FDDMError as exc:
        print(f"FDDM-E{exc.exit_code} {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"FDDM-E2 IO: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.error(f"❌ Unexpected failure: {exc}", exc_info=True)
        print(f"FDDM-E3 INTERNAL: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
