"""
Pipeline Module
End-to-end training and inference for the four run modes:
(A) coarse UNet only, (B) image-domain diffusion, (C) coarse UNet + CNN
subband refiner, (D) coarse UNet + wavelet-domain diffusion refinement
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import islice
from typing import Dict, List, Optional, Sequence
import logging
import os
import sys
import time

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from app.config import get_settings
from app.models.schemas import (
    AblationRow,
    BenchRow,
    LossReport,
    NetworkConfig,
    NetworkHyperparameters,
    PipelineMode,
    PlanningSample,
    STRUCTURES,
    TrainConfig,
)
from app.modules.checkpoint import Checkpoint, pack_optimizer_state, save_checkpoint, unpack_optimizer_state
from app.modules.dataset import PlanningDataset, denormalize_dose, normalize_dose
from app.modules.diffusion import (
    NoiseSchedule,
    hfrm_loss,
    make_schedule,
    q_sample,
    sample_loop,
    sample_timesteps,
)
from app.modules.networks import (
    ConditioningBundle,
    UNet,
    build_cdpm,
    build_hfrm,
    cdpm_forward,
    downsample_planning,
    hfrm_denoise,
)
from app.modules.metrics import high_band_energy_ratio, mean_dose
from app.modules.wavelet import SubbandSet, dwt2, iwt2
from app.utils.exceptions import ConfigError, ContractError, TrainingError
from app.utils.helpers import CsvAppender, derive_seed, format_seconds, save_to_json

logger = logging.getLogger(__name__)

PLANNING_CHANNELS = 1 + len(STRUCTURES)
HIGH_BANDS = 3
LOSS_CSV_HEADER = ("step", "epoch", "l_cdpm", "l_hfrm", "l_total")


# ============ Model container ============

def align_feature_channels(cdpm_channels: Sequence[int]) -> List[int]:
    """
    The denoiser runs at half resolution, so its level i pairs with coarse
    encoder level i + 1; the deepest level reuses the deepest coarse feature
    """
    return list(cdpm_channels[1:]) + [cdpm_channels[-1]]


def align_features(features: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    return list(features[1:]) + [features[-1]]


def network_configs(hp: NetworkHyperparameters, mode: PipelineMode) -> Dict[str, NetworkConfig]:
    """Configs of every network a mode needs"""
    base = hp.model_dump(include=set(NetworkHyperparameters.model_fields))
    cdpm = NetworkConfig(**base, in_channels=PLANNING_CHANNELS, out_channels=1)
    configs: Dict[str, NetworkConfig] = {}
    if mode.uses_cdpm:
        configs["cdpm"] = cdpm
    if mode is PipelineMode.FULL:
        configs["hfrm"] = NetworkConfig(
            **base,
            in_channels=HIGH_BANDS + HIGH_BANDS + PLANNING_CHANNELS,
            out_channels=HIGH_BANDS,
            use_time_embedding=True,
            feature_channels=align_feature_channels(cdpm.channels),
        )
    elif mode is PipelineMode.COARSE_CNN_REFINE:
        configs["refiner"] = NetworkConfig(
            **base, in_channels=HIGH_BANDS + PLANNING_CHANNELS, out_channels=HIGH_BANDS,
        )
    elif mode is PipelineMode.DIFFUSION_DIRECT:
        configs["image_denoiser"] = NetworkConfig(
            **base, in_channels=1 + PLANNING_CHANNELS, out_channels=1, use_time_embedding=True,
        )
    return configs


MODE_NETWORKS = {
    PipelineMode.COARSE_ONLY: ("cdpm",),
    PipelineMode.DIFFUSION_DIRECT: ("image_denoiser",),
    PipelineMode.COARSE_CNN_REFINE: ("cdpm", "refiner"),
    PipelineMode.FULL: ("cdpm", "hfrm"),
}


def check_mode_compatible(networks: Sequence[str], mode: PipelineMode) -> None:
    """
    Raise ConfigError unless `networks` holds everything `mode` runs; a mode-D
    checkpoint can run mode A, a mode-A checkpoint cannot run mode D
    """
    missing = [name for name in MODE_NETWORKS[mode] if name not in networks]
    if missing:
        raise ConfigError(f"mode {mode.value} needs network(s) {', '.join(missing)}, not in the checkpoint")


class FDDMModels(nn.Module):
    """Holds the networks of one run; absent networks are None"""

    def __init__(self, configs: Dict[str, NetworkConfig], seed: Optional[int] = None):
        super().__init__()
        self.configs = dict(configs)
        self.cdpm: Optional[UNet] = None
        self.hfrm: Optional[UNet] = None
        self.refiner: Optional[UNet] = None
        self.image_denoiser: Optional[UNet] = None
        for offset, (name, cfg) in enumerate(sorted(configs.items())):
            net_seed = None if seed is None else derive_seed(seed, offset)
            if cfg.use_time_embedding:
                net = build_hfrm(cfg, seed=net_seed)
            elif cfg.feature_channels is None:
                net = build_cdpm(cfg, seed=net_seed)
            else:
                raise ContractError(f"network {name} has feature ports but no timestep input")
            setattr(self, name, net)

    @classmethod
    def for_mode(cls, hp: NetworkHyperparameters, mode: PipelineMode, seed: Optional[int] = None) -> "FDDMModels":
        return cls(network_configs(hp, mode), seed=seed)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "FDDMModels":
        models = cls(checkpoint.networks)
        for name, state in checkpoint.state.items():
            net = getattr(models, name, None)
            if net is None:
                raise ContractError(f"checkpoint carries weights for unknown network {name}")
            net.load_state_dict(state)
        return models

    def require(self, name: str) -> UNet:
        net = getattr(self, name)
        if net is None:
            raise ContractError(f"network '{name}' is not loaded")
        return net

    def state(self) -> Dict[str, Dict[str, torch.Tensor]]:
        return {name: getattr(self, name).state_dict() for name in self.configs}


def build_conditioning(coarse_high: torch.Tensor, X: torch.Tensor, cdpm_features: Sequence[torch.Tensor]) -> ConditioningBundle:
    """Image-level (coarse subbands + pooled X) and feature-level conditioning"""
    return ConditioningBundle(
        image_cond=torch.cat((coarse_high, downsample_planning(X)), dim=1),
        feature_cond=align_features(cdpm_features),
    )


def _denoiser(net: UNet):
    def predict_noise(cond: ConditioningBundle, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return hfrm_denoise(net, cond, x_t, t.to(x_t.device))
    return predict_noise


# ============ Training ============

def _draw_noise(shape, rng: torch.Generator, like: torch.Tensor) -> torch.Tensor:
    return torch.randn(tuple(shape), generator=rng, dtype=like.dtype).to(like.device)


def compute_losses(batch: dict, models: FDDMModels, schedule: NoiseSchedule, rng: torch.Generator,
                   cfg: TrainConfig) -> Dict[str, torch.Tensor]:
    """L_CDPM (L1 on the coarse map) and the refinement loss for the configured mode"""
    mode = cfg.mode
    x, y = batch["x"], batch["y"]
    zero = x.new_zeros(())
    out: Dict[str, torch.Tensor] = {"l_cdpm": zero, "l_hfrm": zero}

    if mode is PipelineMode.DIFFUSION_DIRECT:
        net = models.require("image_denoiser")
        t = sample_timesteps(x.shape[0], schedule, rng)
        eps = _draw_noise(y.shape, rng, y)
        y_t = q_sample(y, t, eps, schedule)
        eps_pred = hfrm_denoise(net, ConditioningBundle(x), y_t, t.to(x.device))
        out["l_hfrm"] = hfrm_loss(eps, eps_pred, cfg.hfrm_loss)
        out["t"] = t
        return out

    coarse, features = cdpm_forward(models.require("cdpm"), x)
    out["l_cdpm"] = F.l1_loss(coarse, y)
    if mode is PipelineMode.COARSE_ONLY:
        return out

    coarse_high = dwt2(coarse).high
    target_high = dwt2(y).high
    cond = build_conditioning(coarse_high, x, features)
    if not cfg.end_to_end:
        cond = cond.detach()

    if mode is PipelineMode.COARSE_CNN_REFINE:
        refined, _ = models.require("refiner")(cond.image_cond)
        out["l_hfrm"] = F.l1_loss(refined, target_high)
        return out

    t = sample_timesteps(x.shape[0], schedule, rng)
    eps = _draw_noise(target_high.shape, rng, target_high)
    state_t = q_sample(target_high, t, eps, schedule)
    eps_pred = hfrm_denoise(models.require("hfrm"), cond, state_t, t.to(x.device))
    out["l_hfrm"] = hfrm_loss(eps, eps_pred, cfg.hfrm_loss)
    out["t"] = t
    return out


def _nan_dump(batch: dict, losses: Dict[str, torch.Tensor], models: FDDMModels, step: int, epoch: int) -> str:
    dump = {
        "step": step,
        "epoch": epoch,
        "l_cdpm": losses["l_cdpm"].detach().item(),
        "l_hfrm": losses["l_hfrm"].detach().item(),
        "sample_ids": list(batch.get("sample_id", [])),
        "timesteps": losses["t"].tolist() if "t" in losses else [],
        "input_finite": bool(torch.isfinite(batch["x"]).all()),
        "target_finite": bool(torch.isfinite(batch["y"]).all()),
        "nonfinite_parameters": [
            name for name, p in models.named_parameters() if not torch.isfinite(p).all()
        ],
    }
    path = os.path.join(get_settings().artifacts_dir, f"nan_dump_step{step}.json")
    save_to_json(dump, path)
    return path


def train_step(batch: dict, models: FDDMModels, schedule: NoiseSchedule, rng: torch.Generator,
               cfg: TrainConfig, optimizer: torch.optim.Optimizer, step: int = 0, epoch: int = 0,
               objective: str = "total") -> LossReport:
    """
    One optimizer update on L_total = L_CDPM + L_HFRM

    Args:
        objective: "total", or "hfrm" to step on the refinement loss alone

    Raises:
        TrainingError: Non-finite loss (a diagnostic dump is written first)
    """
    models.train()
    losses = compute_losses(batch, models, schedule, rng, cfg)
    if objective == "total":
        loss = losses["l_cdpm"] + losses["l_hfrm"]
    elif objective == "hfrm":
        loss = losses["l_hfrm"]
    else:
        raise ContractError(f"unknown objective {objective}")

    if not torch.isfinite(loss):
        path = _nan_dump(batch, losses, models, step, epoch)
        logger.error(f"❌ Non-finite loss at step {step}; state dumped to {path}")
        raise TrainingError(f"Non-finite loss at step {step} (dump: {path})", dump_path=path)

    optimizer.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
        optimizer.step()

    l_cdpm = losses["l_cdpm"].detach().item()
    l_hfrm = losses["l_hfrm"].detach().item()
    return LossReport(l_cdpm=l_cdpm, l_hfrm=l_hfrm, l_total=l_cdpm + l_hfrm, step=step, epoch=epoch)


def _to_device(batch: dict, device: torch.device) -> dict:
    return {k: v.to(device) if isinstance(v, torch.Tensor) else v for k, v in batch.items()}


class Trainer:
    """Owns the models, optimizer and training generator of one run"""

    def __init__(self, models: FDDMModels, cfg: TrainConfig, device: str = "cpu"):
        self.cfg = cfg
        self.device = torch.device(device)
        self.models = models.to(self.device)
        self.schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end, cfg.schedule_kind)
        self.optimizer = torch.optim.Adam(self.models.parameters(), lr=cfg.learning_rate)
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.epoch = 0

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, cfg: TrainConfig, device: str = "cpu") -> "Trainer":
        if checkpoint.mode is not cfg.mode:
            raise ContractError(f"checkpoint mode {checkpoint.mode.value} differs from run mode {cfg.mode.value}")
        trainer = cls(FDDMModels.from_checkpoint(checkpoint), cfg, device)
        trainer.step = checkpoint.step
        trainer.epoch = checkpoint.epoch
        if "optimizer" in checkpoint.blobs:
            trainer.optimizer.load_state_dict(unpack_optimizer_state(checkpoint.blobs["optimizer"]))
        else:
            logger.warning("Checkpoint has no optimizer state; Adam moments restart from zero")
        if "rng" in checkpoint.blobs:
            trainer.rng.set_state(torch.frombuffer(bytearray(checkpoint.blobs["rng"]), dtype=torch.uint8))
        logger.info(f"Resumed at step {trainer.step}, epoch {trainer.epoch}")
        return trainer

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            mode=self.cfg.mode,
            networks=self.models.configs,
            state=self.models.state(),
            timesteps=self.cfg.timesteps,
            beta_start=self.cfg.beta_start,
            beta_end=self.cfg.beta_end,
            schedule_kind=self.cfg.schedule_kind,
            step=self.step,
            epoch=self.epoch,
            seed=self.cfg.seed,
            blobs={
                "optimizer": pack_optimizer_state(self.optimizer),
                "rng": self.rng.get_state().numpy().tobytes(),
            },
        )

    def epoch_loader(self, dataset: PlanningDataset, epoch: int) -> DataLoader:
        """Shuffled batches whose order depends only on (seed, epoch)"""
        generator = torch.Generator().manual_seed(derive_seed(self.cfg.seed, epoch))
        return DataLoader(dataset, batch_size=self.cfg.batch_size, shuffle=True, generator=generator)

    def finished(self) -> bool:
        """True once cfg.max_steps or cfg.epochs is reached"""
        if self.cfg.max_steps and self.step >= self.cfg.max_steps:
            return True
        return self.epoch >= self.cfg.epochs

    def run_step(self, batch: dict, objective: str = "total") -> LossReport:
        report = train_step(_to_device(batch, self.device), self.models, self.schedule, self.rng,
                            self.cfg, self.optimizer, step=self.step, epoch=self.epoch, objective=objective)
        self.step += 1
        return report

    def fit(self, dataset: PlanningDataset, checkpoint_path: Optional[str] = None,
            loss_csv: Optional[str] = None, val_dataset: Optional[PlanningDataset] = None,
            on_checkpoint=None) -> List[LossReport]:
        """
        Train until cfg.epochs or cfg.max_steps

        Args:
            dataset: Training samples
            checkpoint_path: Written every cfg.checkpoint_every steps and at the end
            loss_csv: Per-step loss log (appended)
            val_dataset: Evaluated at the end of each epoch with cfg.eval_stride
            on_checkpoint: Optional callback receiving each saved Checkpoint

        Returns:
            LossReports of the steps run by this call; empty when the run is
            already at its step or epoch limit
        """
        if len(dataset) == 0:
            raise ContractError("training set is empty")
        if self.finished():
            logger.info(f"Run already complete at step {self.step}, epoch {self.epoch}; nothing to train")
            return []
        csv_log = CsvAppender(loss_csv, LOSS_CSV_HEADER) if loss_csv else None
        batches_per_epoch = -(-len(dataset) // self.cfg.batch_size)
        reports: List[LossReport] = []

        def save():
            if checkpoint_path:
                ckpt = self.checkpoint()
                save_checkpoint(checkpoint_path, ckpt)
                if on_checkpoint:
                    on_checkpoint(ckpt)

        logger.info(
            f"Training mode {self.cfg.mode.value}: {len(dataset)} samples, "
            f"{batches_per_epoch} batches/epoch, from step {self.step}"
        )
        while self.epoch < self.cfg.epochs:
            done_in_epoch = self.step - self.epoch * batches_per_epoch
            loader = islice(self.epoch_loader(dataset, self.epoch), max(done_in_epoch, 0), None)
            progress = tqdm(loader, total=batches_per_epoch - max(done_in_epoch, 0),
                            desc=f"epoch {self.epoch}", disable=not sys.stdout.isatty(), leave=False)
            for batch in progress:
                report = self.run_step(batch)
                reports.append(report)
                if csv_log:
                    csv_log.append([(report.step, report.epoch, report.l_cdpm, report.l_hfrm, report.l_total)])
                if self.step % self.cfg.log_every == 0:
                    logger.info(
                        f"step {report.step} epoch {report.epoch}: l_cdpm={report.l_cdpm:.5f} "
                        f"l_hfrm={report.l_hfrm:.5f} l_total={report.l_total:.5f}"
                    )
                if self.step % self.cfg.checkpoint_every == 0:
                    save()
                if self.cfg.max_steps and self.step >= self.cfg.max_steps:
                    save()
                    return reports
            self.epoch += 1
            if val_dataset is not None and len(val_dataset):
                val_l1 = validation_l1(self.models, val_dataset, self.schedule, self.cfg.mode,
                                       self.cfg.eval_stride, self.cfg.seed, self.device)
                logger.info(f"epoch {self.epoch - 1} validation L1 (normalized): {val_l1:.5f}")

        save()
        return reports


# ============ Inference ============

@dataclass
class PredictionResult:
    """Final dose in Gy plus the normalized maps it came from"""
    dose: torch.Tensor
    normalized: torch.Tensor
    coarse: Optional[torch.Tensor] = None


@torch.no_grad()
def predict(models: FDDMModels, X: torch.Tensor, schedule: NoiseSchedule, rng: torch.Generator,
            mode: PipelineMode, stride: int = 1, prescription: Optional[torch.Tensor] = None) -> PredictionResult:
    """
    Predict dose for a batch of planning inputs

    Args:
        models: Networks for `mode`
        X: Planning stack (B, 6, H, W)
        schedule: Training schedule (respaced by `stride` when sampling)
        rng: Generator for the sampling noise
        mode: Run mode
        stride: Sampling stride for the diffusion modes
        prescription: (B,) Gy used for de-normalization; None keeps normalized units

    Returns:
        PredictionResult; dose is clamped to >= 0 after de-normalization
    """
    models.eval()
    coarse = None

    if mode is PipelineMode.DIFFUSION_DIRECT:
        net = models.require("image_denoiser")
        normalized = sample_loop(_denoiser(net), ConditioningBundle(X), (X.shape[0], 1, *X.shape[-2:]),
                                 schedule, rng, stride=stride, device=X.device, dtype=X.dtype)
    else:
        coarse, features = cdpm_forward(models.require("cdpm"), X)
        if mode is PipelineMode.COARSE_ONLY:
            normalized = coarse
        else:
            bands = dwt2(coarse)
            cond = build_conditioning(bands.high, X, features)
            if mode is PipelineMode.COARSE_CNN_REFINE:
                high, _ = models.require("refiner")(cond.image_cond)
            else:
                high = sample_loop(_denoiser(models.require("hfrm")), cond, tuple(bands.high.shape),
                                   schedule, rng, stride=stride, device=X.device, dtype=X.dtype)
            normalized = iwt2(SubbandSet.from_high(high, bands.ll))

    if prescription is None:
        dose = normalized.clamp_min(-1.0)
    else:
        scale = prescription.to(normalized.dtype).reshape(-1, 1, 1, 1).to(normalized.device)
        dose = denormalize_dose(normalized, scale).clamp_min(0.0)
    return PredictionResult(dose=dose, normalized=normalized, coarse=coarse)


def predict_cases(models: FDDMModels, samples: Sequence[PlanningSample], schedule: NoiseSchedule,
                  mode: PipelineMode, stride: int, seed: int, device: str = "cpu",
                  workers: int = 1) -> Dict[str, np.ndarray]:
    """
    Predict every sample with its own generator seeded from (seed, sample index)

    Returns:
        Mapping sample_id -> dose in Gy (H, W)
    """
    models = models.to(device).eval()

    def run(sample: PlanningSample) -> np.ndarray:
        rng = torch.Generator().manual_seed(derive_seed(seed, sample.index))
        X = torch.from_numpy(sample.planning_input())[None].to(device)
        result = predict(models, X, schedule, rng, mode, stride,
                         prescription=torch.tensor([sample.prescription]))
        logger.info(f"Predicted case {sample.sample_id}")
        return result.dose[0, 0].cpu().numpy().astype(np.float32)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            doses = list(pool.map(run, samples))
    else:
        doses = [run(sample) for sample in samples]
    return {sample.sample_id: dose for sample, dose in zip(samples, doses)}


def validation_l1(models: FDDMModels, dataset: PlanningDataset, schedule: NoiseSchedule,
                  mode: PipelineMode, stride: int, seed: int, device: torch.device) -> float:
    """Mean normalized L1 between predictions and targets over a dataset"""
    total, count = 0.0, 0
    for i in range(len(dataset)):
        item = dataset[i]
        rng = torch.Generator().manual_seed(derive_seed(seed, i))
        result = predict(models, item["x"][None].to(device), schedule, rng, mode, stride)
        total += float((result.normalized[0].cpu() - item["y"]).abs().mean())
        count += 1
    return total / max(count, 1)


# ============ Ablation ============

@torch.no_grad()
def score_mode(models: FDDMModels, samples: Sequence[PlanningSample], schedule: NoiseSchedule,
               mode: PipelineMode, stride: int, seed: int, device: str = "cpu", steps: int = 0) -> AblationRow:
    """
    Predict every sample and score it against its own ground truth

    Returns:
        AblationRow with normalized L1, PTV |delta Dmean| (Gy) and high-band
        energy ratio, each averaged over samples
    """
    if not samples:
        raise ContractError("nothing to score")
    models = models.to(device).eval()
    l1, dmean, ratios = [], [], []
    for sample in samples:
        rng = torch.Generator().manual_seed(derive_seed(seed, sample.index))
        X = torch.from_numpy(sample.planning_input())[None].to(device)
        result = predict(models, X, schedule, rng, mode, stride, prescription=torch.tensor([sample.prescription]))
        normalized = result.normalized[0, 0].cpu().numpy().astype(np.float64)
        dose = result.dose[0, 0].cpu().numpy().astype(np.float64)
        target = normalize_dose(sample.dose.astype(np.float64), sample.prescription)
        ptv = sample.masks["PTV"]
        l1.append(float(np.abs(normalized - target).mean()))
        dmean.append(abs(mean_dose(dose, ptv) - mean_dose(sample.dose, ptv)))
        ratios.append(high_band_energy_ratio(dose, sample.dose))
    return AblationRow(
        mode=mode,
        seed=seed,
        steps=steps,
        cases=len(samples),
        train_l1=float(np.mean(l1)),
        ptv_dmean_abs=float(np.mean(dmean)),
        high_band_ratio=float(np.mean(ratios)),
    )


def ablation_study(samples: Sequence[PlanningSample], hp: NetworkHyperparameters, cfg: TrainConfig,
                   modes: Sequence[PipelineMode], seeds: Sequence[int], stride: int = 1,
                   device: str = "cpu") -> List[AblationRow]:
    """
    Train each mode from scratch once per seed on `samples`, then score it on
    the same samples; the diffusion modes sample with `stride`
    """
    dataset = PlanningDataset(samples)
    rows: List[AblationRow] = []
    for seed in seeds:
        for mode in modes:
            run_cfg = cfg.model_copy(update={"mode": mode, "seed": seed})
            trainer = Trainer(FDDMModels.for_mode(hp, mode, seed=seed), run_cfg, device=device)
            trainer.fit(dataset)
            run_stride = stride if mode.uses_diffusion else 1
            trainer.schedule.respace(run_stride)
            row = score_mode(trainer.models, samples, trainer.schedule, mode, run_stride, seed,
                             device=device, steps=trainer.step)
            logger.info(
                f"Ablation mode {mode.value} seed {seed}: L1={row.train_l1:.4f} "
                f"|dDmean|={row.ptv_dmean_abs:.3f} Gy high-band ratio={row.high_band_ratio:.3f}"
            )
            rows.append(row)
    return rows


# ============ Benchmark ============

def _median_forward(fn, trials: int, device: torch.device) -> float:
    timings = []
    for _ in range(trials):
        if device.type == "cuda":
            torch.cuda.synchronize()
        start = time.perf_counter()
        fn()
        if device.type == "cuda":
            torch.cuda.synchronize()
        timings.append(time.perf_counter() - start)
    return float(np.median(timings))


@torch.no_grad()
def benchmark_step_cost(hp: NetworkHyperparameters, height: int, width: int, trials: int = 100,
                        steps: int = 10, device: str = "cpu", seed: int = 0) -> BenchRow:
    """
    Time one denoiser forward in the wavelet domain (half resolution, 3
    subbands, feature-conditioned) against the image domain (full resolution,
    1 channel) at matched hyperparameters, plus full sampling for `steps` steps
    """
    dev = torch.device(device)
    wavelet_models = FDDMModels.for_mode(hp, PipelineMode.FULL, seed=seed).to(dev).eval()
    image_models = FDDMModels.for_mode(hp, PipelineMode.DIFFUSION_DIRECT, seed=seed).to(dev).eval()
    wavelet_net = wavelet_models.require("hfrm")
    image_net = image_models.require("image_denoiser")
    wavelet_net.cfg.check_input_size(height // 2, width // 2)
    image_net.cfg.check_input_size(height, width)

    gen = torch.Generator().manual_seed(seed)
    X = torch.randn((1, PLANNING_CHANNELS, height, width), generator=gen).to(dev)
    _, features = cdpm_forward(wavelet_models.require("cdpm"), X)
    cond = build_conditioning(torch.randn((1, HIGH_BANDS, height // 2, width // 2), generator=gen).to(dev), X, features)
    wavelet_state = torch.randn((1, HIGH_BANDS, height // 2, width // 2), generator=gen).to(dev)
    image_state = torch.randn((1, 1, height, width), generator=gen).to(dev)
    t = torch.full((1,), steps, dtype=torch.long)

    wavelet_step = lambda: hfrm_denoise(wavelet_net, cond, wavelet_state, t.to(dev))
    image_step = lambda: hfrm_denoise(image_net, ConditioningBundle(X), image_state, t.to(dev))
    for _ in range(2):  # warm-up
        wavelet_step()
        image_step()

    wavelet_median = _median_forward(wavelet_step, trials, dev)
    image_median = _median_forward(image_step, trials, dev)

    schedule = make_schedule(steps)
    start = time.perf_counter()
    sample_loop(_denoiser(wavelet_net), cond, tuple(wavelet_state.shape), schedule,
                torch.Generator().manual_seed(seed), device=dev)
    wavelet_sampling = time.perf_counter() - start
    start = time.perf_counter()
    sample_loop(_denoiser(image_net), ConditioningBundle(X), tuple(image_state.shape), schedule,
                torch.Generator().manual_seed(seed), device=dev)
    image_sampling = time.perf_counter() - start

    row = BenchRow(
        height=height,
        width=width,
        trials=trials,
        steps=steps,
        image_elements=height * width,
        wavelet_elements=(height // 2) * (width // 2),
        image_step_median_s=image_median,
        wavelet_step_median_s=wavelet_median,
        image_sampling_s=image_sampling,
        wavelet_sampling_s=wavelet_sampling,
        speedup=image_median / wavelet_median,
    )
    logger.info(
        f"Bench {height}x{width}: image step {format_seconds(image_median)}, "
        f"wavelet step {format_seconds(wavelet_median)}, speedup {row.speedup:.2f}x"
    )
    return row
