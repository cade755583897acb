"""
Tests for training, inference and benchmarking across the four run modes
"""
import csv
import math
import os
import warnings

import numpy as np
import pytest
import torch
from torch.utils.data import DataLoader

from app.models.schemas import AblationRow, NetworkHyperparameters, PhantomConfig, PipelineMode, TrainConfig
from app.modules.checkpoint import load_checkpoint, save_checkpoint
from app.modules.dataset import PlanningDataset
from app.modules.diffusion import make_schedule
from app.modules.networks import cdpm_forward
from app.modules.phantom import PhantomGenerator, split_dataset
from app.modules.pipeline import (
    LOSS_CSV_HEADER,
    FDDMModels,
    Trainer,
    ablation_study,
    align_feature_channels,
    benchmark_step_cost,
    check_mode_compatible,
    network_configs,
    predict,
    predict_cases,
    score_mode,
    train_step,
    validation_l1,
)
from app.modules.reporting import ablation_summary
from app.modules.wavelet import dwt2
from app.utils.exceptions import ConfigError, ContractError, TrainingError


def batch_of(samples):
    return next(iter(DataLoader(PlanningDataset(samples), batch_size=len(samples))))


def snapshot(net):
    return {name: p.detach().clone() for name, p in net.named_parameters()}


def unchanged(net, before):
    return all(torch.equal(p, before[name]) for name, p in net.named_parameters())


@pytest.fixture
def full_models(tiny_hp):
    return FDDMModels.for_mode(tiny_hp, PipelineMode.FULL, seed=0)


def train_cfg(mode=PipelineMode.FULL, **overrides):
    values = dict(mode=mode, timesteps=20, batch_size=2, epochs=5, checkpoint_every=1000, log_every=1, seed=7)
    values.update(overrides)
    return TrainConfig(**values)


# Desk-scale runs: one batch of 8 per step, 2000 steps
DESK_HP = NetworkHyperparameters(
    levels=3,
    base_channels=16,
    channel_multipliers=[1, 2, 2],
    groupnorm_groups=4,
    time_embedding_dim=32,
)


def desk_cfg(mode=PipelineMode.FULL, **overrides):
    values = dict(mode=mode, timesteps=200, batch_size=8, epochs=10_000, max_steps=2000, learning_rate=1e-3,
                  checkpoint_every=10_000, log_every=100, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


# ============ Network wiring ============

def test_network_configs_per_mode(tiny_hp):
    assert set(network_configs(tiny_hp, PipelineMode.COARSE_ONLY)) == {"cdpm"}
    assert set(network_configs(tiny_hp, PipelineMode.DIFFUSION_DIRECT)) == {"image_denoiser"}
    assert set(network_configs(tiny_hp, PipelineMode.COARSE_CNN_REFINE)) == {"cdpm", "refiner"}

    full = network_configs(tiny_hp, PipelineMode.FULL)
    assert set(full) == {"cdpm", "hfrm"}
    assert (full["cdpm"].in_channels, full["cdpm"].out_channels) == (6, 1)
    assert (full["hfrm"].in_channels, full["hfrm"].out_channels) == (12, 3)
    assert full["hfrm"].use_time_embedding and not full["cdpm"].use_time_embedding
    assert full["hfrm"].feature_channels == [16, 16, 16]

    refiner = network_configs(tiny_hp, PipelineMode.COARSE_CNN_REFINE)["refiner"]
    assert (refiner.in_channels, refiner.out_channels, refiner.use_time_embedding) == (9, 3, False)
    image = network_configs(tiny_hp, PipelineMode.DIFFUSION_DIRECT)["image_denoiser"]
    assert (image.in_channels, image.out_channels, image.use_time_embedding) == (7, 1, True)


def test_feature_alignment_shifts_one_level():
    assert align_feature_channels([8, 16, 32, 64]) == [16, 32, 64, 64]


def test_models_are_seeded(tiny_hp):
    a = FDDMModels.for_mode(tiny_hp, PipelineMode.FULL, seed=3)
    b = FDDMModels.for_mode(tiny_hp, PipelineMode.FULL, seed=3)
    for (name, p), q in zip(a.named_parameters(), b.parameters()):
        assert torch.equal(p, q), name


def test_missing_network_is_a_contract_error(tiny_hp):
    models = FDDMModels.for_mode(tiny_hp, PipelineMode.COARSE_ONLY, seed=0)
    assert models.hfrm is None
    with pytest.raises(ContractError):
        models.require("hfrm")


def test_mode_compatibility_with_checkpoint_networks():
    check_mode_compatible(["cdpm", "hfrm"], PipelineMode.FULL)
    check_mode_compatible(["cdpm", "hfrm"], PipelineMode.COARSE_ONLY)
    check_mode_compatible(["cdpm", "refiner"], PipelineMode.COARSE_ONLY)
    with pytest.raises(ConfigError, match="hfrm"):
        check_mode_compatible(["cdpm"], PipelineMode.FULL)
    with pytest.raises(ConfigError, match="image_denoiser"):
        check_mode_compatible(["cdpm", "hfrm"], PipelineMode.DIFFUSION_DIRECT)
    with pytest.raises(ConfigError):
        check_mode_compatible(["image_denoiser"], PipelineMode.COARSE_ONLY)


# ============ Training ============

def test_total_loss_is_the_sum(full_models, phantom_samples):
    optimizer = torch.optim.Adam(full_models.parameters(), lr=1e-4)
    report = train_step(batch_of(phantom_samples[:2]), full_models, make_schedule(20),
                        torch.Generator().manual_seed(0), train_cfg(), optimizer)
    assert report.l_total == report.l_cdpm + report.l_hfrm
    assert report.l_cdpm > 0 and report.l_hfrm > 0
    assert report.is_finite()


def test_coarse_only_mode_leaves_refinement_untouched(full_models, phantom_samples):
    before_hfrm, before_cdpm = snapshot(full_models.hfrm), snapshot(full_models.cdpm)
    optimizer = torch.optim.Adam(full_models.parameters(), lr=1e-3)
    report = train_step(batch_of(phantom_samples[:2]), full_models, make_schedule(20),
                        torch.Generator().manual_seed(0), train_cfg(PipelineMode.COARSE_ONLY), optimizer)
    assert report.l_hfrm == 0.0
    assert unchanged(full_models.hfrm, before_hfrm)
    assert not unchanged(full_models.cdpm, before_cdpm)


def test_detached_conditioning_freezes_the_coarse_network(full_models, phantom_samples):
    before_hfrm, before_cdpm = snapshot(full_models.hfrm), snapshot(full_models.cdpm)
    optimizer = torch.optim.Adam(full_models.parameters(), lr=1e-3)
    train_step(batch_of(phantom_samples[:2]), full_models, make_schedule(20), torch.Generator().manual_seed(0),
               train_cfg(end_to_end=False), optimizer, objective="hfrm")
    assert unchanged(full_models.cdpm, before_cdpm)
    assert not unchanged(full_models.hfrm, before_hfrm)


def test_end_to_end_refinement_loss_reaches_the_coarse_network(full_models, phantom_samples):
    before_cdpm = snapshot(full_models.cdpm)
    optimizer = torch.optim.Adam(full_models.parameters(), lr=1e-3)
    train_step(batch_of(phantom_samples[:2]), full_models, make_schedule(20), torch.Generator().manual_seed(0),
               train_cfg(), optimizer, objective="hfrm")
    assert not unchanged(full_models.cdpm, before_cdpm)


@pytest.mark.parametrize("mode", [PipelineMode.DIFFUSION_DIRECT, PipelineMode.COARSE_CNN_REFINE])
def test_ablation_modes_train(tiny_hp, phantom_samples, mode):
    models = FDDMModels.for_mode(tiny_hp, mode, seed=0)
    optimizer = torch.optim.Adam(models.parameters(), lr=1e-4)
    report = train_step(batch_of(phantom_samples[:2]), models, make_schedule(20),
                        torch.Generator().manual_seed(0), train_cfg(mode), optimizer)
    assert report.is_finite() and report.l_hfrm > 0
    assert (report.l_cdpm == 0.0) == (mode is PipelineMode.DIFFUSION_DIRECT)


def test_non_finite_loss_dumps_and_raises(full_models, phantom_samples, tmp_path):
    batch = batch_of(phantom_samples[:2])
    batch["x"][0, 0, 0, 0] = float("nan")
    optimizer = torch.optim.Adam(full_models.parameters(), lr=1e-4)
    with pytest.raises(TrainingError) as info:
        train_step(batch, full_models, make_schedule(20), torch.Generator().manual_seed(0),
                   train_cfg(), optimizer, step=12)
    assert info.value.exit_code == 3
    assert info.value.dump_path.startswith(str(tmp_path / "artifacts"))
    assert os.path.exists(info.value.dump_path)


def test_unknown_objective(full_models, phantom_samples):
    optimizer = torch.optim.Adam(full_models.parameters(), lr=1e-4)
    with pytest.raises(ContractError):
        train_step(batch_of(phantom_samples[:2]), full_models, make_schedule(20),
                   torch.Generator().manual_seed(0), train_cfg(), optimizer, objective="cdpm")


def test_loss_report_reads_detached_values(full_models, phantom_samples):
    optimizer = torch.optim.Adam(full_models.parameters(), lr=1e-4)
    with warnings.catch_warnings():
        warnings.filterwarnings("error", message=".*requires_grad.*")
        report = train_step(batch_of(phantom_samples[:2]), full_models, make_schedule(20),
                            torch.Generator().manual_seed(0), train_cfg(), optimizer)
    assert type(report.l_cdpm) is float and type(report.l_hfrm) is float


def test_fit_logs_every_step_and_checkpoints(tiny_hp, phantom_samples, tmp_path):
    ckpt_path, loss_csv = str(tmp_path / "run.ckpt"), str(tmp_path / "loss.csv")
    trainer = Trainer(FDDMModels.for_mode(tiny_hp, PipelineMode.FULL, seed=7), train_cfg(max_steps=3))
    reports = trainer.fit(PlanningDataset(phantom_samples), checkpoint_path=ckpt_path, loss_csv=loss_csv)
    assert [r.step for r in reports] == [0, 1, 2]
    assert [r.epoch for r in reports] == [0, 0, 1]

    with open(loss_csv, newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == LOSS_CSV_HEADER
    assert len(rows) == 4
    for row in rows[1:]:
        l_cdpm, l_hfrm, l_total = (float(v) for v in row[2:])
        assert l_total == l_cdpm + l_hfrm

    checkpoint = load_checkpoint(ckpt_path)
    assert (checkpoint.step, checkpoint.epoch) == (3, 1)
    assert {"optimizer", "rng"} <= set(checkpoint.blobs)


def test_resume_reproduces_the_next_step(tiny_hp, phantom_samples, tmp_path):
    dataset = PlanningDataset(phantom_samples)
    reference = Trainer(FDDMModels.for_mode(tiny_hp, PipelineMode.FULL, seed=7), train_cfg(max_steps=4))
    expected = reference.fit(dataset)[-1]

    first = Trainer(FDDMModels.for_mode(tiny_hp, PipelineMode.FULL, seed=7), train_cfg(max_steps=3))
    first.fit(dataset, checkpoint_path=str(tmp_path / "run.ckpt"))
    resumed = Trainer.from_checkpoint(load_checkpoint(str(tmp_path / "run.ckpt")), train_cfg(max_steps=4))
    (report,) = resumed.fit(dataset)

    assert (report.step, report.epoch) == (expected.step, expected.epoch) == (3, 1)
    assert report.l_cdpm == expected.l_cdpm
    assert report.l_hfrm == expected.l_hfrm


def test_resume_at_max_steps_trains_nothing(tiny_hp, phantom_samples, tmp_path):
    dataset = PlanningDataset(phantom_samples)
    ckpt_path = str(tmp_path / "run.ckpt")
    first = Trainer(FDDMModels.for_mode(tiny_hp, PipelineMode.FULL, seed=7), train_cfg(max_steps=3))
    first.fit(dataset, checkpoint_path=ckpt_path)
    with open(ckpt_path, "rb") as f:
        saved = f.read()

    resumed = Trainer.from_checkpoint(load_checkpoint(ckpt_path), train_cfg(max_steps=3))
    assert resumed.finished()
    assert resumed.fit(dataset, checkpoint_path=ckpt_path) == []
    assert resumed.step == 3
    with open(ckpt_path, "rb") as f:
        assert f.read() == saved


def test_run_past_its_last_epoch_trains_nothing(tiny_hp, phantom_samples):
    dataset = PlanningDataset(phantom_samples)
    trainer = Trainer(FDDMModels.for_mode(tiny_hp, PipelineMode.COARSE_ONLY, seed=7),
                      train_cfg(PipelineMode.COARSE_ONLY, epochs=1))
    assert len(trainer.fit(dataset)) == 2
    assert trainer.fit(dataset) == []
    assert (trainer.step, trainer.epoch) == (2, 1)


def test_resume_rejects_other_mode(tiny_hp):
    trainer = Trainer(FDDMModels.for_mode(tiny_hp, PipelineMode.FULL, seed=0), train_cfg())
    with pytest.raises(ContractError):
        Trainer.from_checkpoint(trainer.checkpoint(), train_cfg(PipelineMode.COARSE_CNN_REFINE))


def test_empty_training_set(full_models):
    with pytest.raises(ContractError):
        Trainer(full_models, train_cfg()).fit(PlanningDataset([]))


# ============ Inference ============

def test_coarse_only_prediction_is_the_coarse_map(full_models, phantom_samples):
    X = batch_of(phantom_samples[:2])["x"]
    result = predict(full_models, X, make_schedule(10), torch.Generator().manual_seed(0), PipelineMode.COARSE_ONLY)
    coarse, _ = cdpm_forward(full_models.cdpm, X)
    assert torch.equal(result.normalized, coarse.detach())


def test_refinement_keeps_the_coarse_low_band(tiny_hp):
    generator = PhantomGenerator(PhantomConfig(slice_size=64, seed=5))
    samples = [generator.generate(i) for i in range(20)]
    trainer = Trainer(FDDMModels.for_mode(tiny_hp, PipelineMode.FULL, seed=0), train_cfg(max_steps=2, batch_size=4))
    trainer.fit(PlanningDataset(samples))

    models = trainer.models.double()
    X = batch_of(samples)["x"].double()
    result = predict(models, X, make_schedule(20), torch.Generator().manual_seed(0), PipelineMode.FULL, stride=5)
    assert result.normalized.shape == (20, 1, 64, 64)
    ll_gap = (dwt2(result.normalized).ll - dwt2(result.coarse).ll).abs().amax(dim=(1, 2, 3))
    assert ll_gap.shape == (20,)
    assert (ll_gap <= 1e-9).all()
    assert not torch.equal(result.normalized, result.coarse)


def test_prediction_is_seeded(full_models, phantom_samples):
    X = batch_of(phantom_samples[:1])["x"]
    schedule = make_schedule(10)
    run = lambda seed: predict(full_models, X, schedule, torch.Generator().manual_seed(seed), PipelineMode.FULL).normalized
    assert torch.equal(run(5), run(5))
    assert not torch.equal(run(5), run(6))


def test_prediction_in_gray_is_non_negative(full_models, phantom_samples):
    batch = batch_of(phantom_samples[:2])
    result = predict(full_models, batch["x"], make_schedule(10), torch.Generator().manual_seed(0),
                     PipelineMode.FULL, prescription=batch["prescription"])
    assert (result.dose >= 0).all()
    expected = ((result.normalized + 1) / 2 * batch["prescription"].reshape(-1, 1, 1, 1) * 1.1).clamp_min(0)
    assert torch.allclose(result.dose, expected, rtol=1e-5, atol=1e-4)


def test_strided_prediction(full_models, phantom_samples):
    X = batch_of(phantom_samples[:1])["x"]
    result = predict(full_models, X, make_schedule(20), torch.Generator().manual_seed(0), PipelineMode.FULL, stride=5)
    assert torch.isfinite(result.normalized).all()


@pytest.mark.parametrize("mode", list(PipelineMode))
def test_every_mode_predicts(tiny_hp, phantom_samples, mode):
    models = FDDMModels.for_mode(tiny_hp, mode, seed=0)
    X = batch_of(phantom_samples[:1])["x"]
    result = predict(models, X, make_schedule(5), torch.Generator().manual_seed(0), mode)
    assert result.normalized.shape == (1, 1, 64, 64)
    assert (result.coarse is None) == (mode is PipelineMode.DIFFUSION_DIRECT)


def test_predict_cases_is_independent_of_workers(full_models, phantom_samples):
    schedule = make_schedule(5)
    serial = predict_cases(full_models, phantom_samples, schedule, PipelineMode.FULL, 1, seed=9)
    threaded = predict_cases(full_models, phantom_samples, schedule, PipelineMode.FULL, 1, seed=9, workers=2)
    assert list(serial) == [s.sample_id for s in phantom_samples]
    for sample_id, dose in serial.items():
        assert dose.dtype == np.float32 and dose.shape == (64, 64)
        assert (dose >= 0).all()
        assert np.array_equal(dose, threaded[sample_id])


def test_checkpointed_models_predict_identically(full_models, phantom_samples, tmp_path):
    trainer = Trainer(full_models, train_cfg())
    save_checkpoint(str(tmp_path / "m.ckpt"), trainer.checkpoint())
    restored = FDDMModels.from_checkpoint(load_checkpoint(str(tmp_path / "m.ckpt")))
    X = batch_of(phantom_samples[:1])["x"]
    schedule = make_schedule(5)
    a = predict(full_models, X, schedule, torch.Generator().manual_seed(1), PipelineMode.FULL).normalized
    b = predict(restored, X, schedule, torch.Generator().manual_seed(1), PipelineMode.FULL).normalized
    assert torch.equal(a, b)


def test_validation_l1(full_models, phantom_samples):
    value = validation_l1(full_models, PlanningDataset(phantom_samples[:2]), make_schedule(10),
                          PipelineMode.FULL, stride=5, seed=0, device=torch.device("cpu"))
    assert math.isfinite(value) and value >= 0


# ============ Ablation ============

def test_score_mode_row(full_models, phantom_samples):
    row = score_mode(full_models, phantom_samples, make_schedule(10), PipelineMode.FULL, 5, seed=0, steps=12)
    assert (row.mode, row.seed, row.steps, row.cases) == (PipelineMode.FULL, 0, 12, 4)
    assert row.train_l1 >= 0 and row.ptv_dmean_abs >= 0 and row.high_band_ratio >= 0
    again = score_mode(full_models, phantom_samples, make_schedule(10), PipelineMode.FULL, 5, seed=0)
    assert again.high_band_ratio == row.high_band_ratio


def test_score_mode_of_empty_set(full_models):
    with pytest.raises(ContractError):
        score_mode(full_models, [], make_schedule(10), PipelineMode.FULL, 1, seed=0)


def test_ablation_study_trains_every_mode_per_seed(tiny_hp, phantom_samples):
    cfg = train_cfg(max_steps=1, timesteps=10)
    rows = ablation_study(phantom_samples[:2], tiny_hp, cfg, list(PipelineMode), seeds=[0, 1], stride=5)
    assert [(r.mode, r.seed) for r in rows] == [(m, s) for s in (0, 1) for m in PipelineMode]
    assert all(r.steps == 1 and r.cases == 2 for r in rows)


def test_ablation_summary_takes_medians():
    rows = [
        AblationRow(mode=PipelineMode.FULL, seed=s, steps=1, cases=2, train_l1=l1, ptv_dmean_abs=d, high_band_ratio=r)
        for s, l1, d, r in [(0, 0.1, 1.0, 0.9), (1, 0.3, 5.0, 0.7), (2, 0.2, 2.0, 0.8)]
    ]
    rows.append(AblationRow(mode=PipelineMode.COARSE_ONLY, seed=0, steps=1, cases=2, train_l1=0.5,
                            ptv_dmean_abs=3.0, high_band_ratio=0.4))
    summary = ablation_summary(rows).set_index("mode")
    assert list(summary.index) == ["A", "D"]
    assert summary.loc["D", "seeds"] == 3 and summary.loc["A", "seeds"] == 1
    assert summary.loc["D", "train_l1"] == pytest.approx(0.2)
    assert summary.loc["D", "ptv_dmean_abs"] == 2.0
    assert summary.loc["D", "high_band_ratio"] == pytest.approx(0.8)


# ============ Benchmark ============

def test_benchmark_row(tiny_hp):
    row = benchmark_step_cost(tiny_hp, 32, 32, trials=2, steps=3)
    assert (row.height, row.width, row.trials, row.steps) == (32, 32, 2, 3)
    assert row.wavelet_elements * 4 == row.image_elements
    assert row.speedup == row.image_step_median_s / row.wavelet_step_median_s
    assert row.image_sampling_s > 0 and row.wavelet_sampling_s > 0


def test_benchmark_rejects_illegal_size(tiny_hp):
    with pytest.raises(ConfigError):
        benchmark_step_cost(tiny_hp, 36, 36, trials=1, steps=1)


# ============ Desk-scale experiments ============

@pytest.mark.slow
def test_coarse_network_memorizes_eight_slices(phantom_cfg):
    generator = PhantomGenerator(phantom_cfg)
    samples = [generator.generate(i) for i in range(8)]
    trainer = Trainer(FDDMModels.for_mode(DESK_HP, PipelineMode.COARSE_ONLY, seed=0),
                      desk_cfg(mode=PipelineMode.COARSE_ONLY))
    reports = trainer.fit(PlanningDataset(samples))
    assert len(reports) == 2000
    assert reports[-1].l_cdpm < 0.02


@pytest.mark.slow
def test_full_model_trains_down(tiny_hp, phantom_samples):
    trainer = Trainer(FDDMModels.for_mode(tiny_hp, PipelineMode.FULL, seed=0),
                      train_cfg(batch_size=2, epochs=200, learning_rate=1e-3, timesteps=100))
    reports = trainer.fit(PlanningDataset(phantom_samples))
    first = np.mean([r.l_total for r in reports[:10]])
    last = np.mean([r.l_total for r in reports[-10:]])
    assert last < first


@pytest.fixture(scope="module")
def desk_train_set():
    """24 training slices of a 32-slice 64x64 phantom set split 24/8"""
    generator = PhantomGenerator(PhantomConfig(slice_size=64, seed=2024))
    splits = split_dataset(32, [24, 8, 0], seed=2024)
    return [generator.generate(i) for i, name in enumerate(splits) if name == "train"]


@pytest.mark.slow
def test_diffusion_refinement_restores_high_frequency_detail(desk_train_set):
    rows = ablation_study(desk_train_set, DESK_HP, desk_cfg(), [PipelineMode.COARSE_ONLY, PipelineMode.FULL],
                          seeds=[0], stride=10)
    coarse, full = rows
    assert len(desk_train_set) == 24 and coarse.steps == full.steps == 2000
    assert coarse.train_l1 < 0.05
    assert abs(full.high_band_ratio - 1.0) < abs(coarse.high_band_ratio - 1.0)


@pytest.mark.slow
def test_ablation_ordering_over_three_seeds(desk_train_set):
    modes = [PipelineMode.DIFFUSION_DIRECT, PipelineMode.COARSE_CNN_REFINE, PipelineMode.FULL]
    rows = ablation_study(desk_train_set, DESK_HP, desk_cfg(), modes, seeds=[0, 1, 2], stride=10)
    medians = ablation_summary(rows).set_index("mode")
    assert (medians["seeds"] == 3).all()
    assert medians.loc["D", "ptv_dmean_abs"] <= medians.loc["B", "ptv_dmean_abs"]
    assert medians.loc["D", "high_band_ratio"] >= medians.loc["C", "high_band_ratio"]


@pytest.mark.slow
def test_wavelet_denoiser_step_is_faster_at_160():
    row = benchmark_step_cost(NetworkHyperparameters(), 160, 160, trials=100, steps=2)
    assert row.trials == 100
    assert row.speedup >= 1.5
