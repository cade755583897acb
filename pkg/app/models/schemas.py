"""
Pydantic Models for configuration, data records and reports
"""
import hashlib
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.utils.exceptions import ConfigError


# Structure order of the planning input stack (channel 1..5 after the CT)
STRUCTURES: Tuple[str, ...] = ("PTV", "ST", "FHL", "FHR", "BLD")
OARS: Tuple[str, ...] = STRUCTURES[1:]


def _split_list(v):
    """Accept `1,2,2,4,4` strings from flat config files"""
    if isinstance(v, str):
        return [item.strip() for item in v.split(",") if item.strip()]
    return v


# ============ Run modes ============

class PipelineMode(str, Enum):
    """Ablation modes: coarse only, image-domain diffusion, CNN refiner, full model"""
    COARSE_ONLY = "A"
    DIFFUSION_DIRECT = "B"
    COARSE_CNN_REFINE = "C"
    FULL = "D"

    @property
    def uses_cdpm(self) -> bool:
        return self is not PipelineMode.DIFFUSION_DIRECT

    @property
    def uses_diffusion(self) -> bool:
        return self in (PipelineMode.DIFFUSION_DIRECT, PipelineMode.FULL)


# ============ Network configuration ============

class NetworkHyperparameters(BaseModel):
    """Architecture knobs shared by every UNet in the toolkit"""

    levels: int = Field(default=5, ge=2, description="Encoder modules; the bottleneck makes one more level")
    base_channels: int = Field(default=32, ge=1)
    channel_multipliers: List[int] = Field(default_factory=lambda: [1, 2, 2, 4, 4])
    groupnorm_groups: int = Field(default=8, ge=1)
    attention_heads: int = Field(default=1, ge=1)
    time_embedding_dim: int = Field(default=128, ge=2)

    @field_validator("channel_multipliers", mode="before")
    @classmethod
    def parse_multipliers(cls, v):
        return _split_list(v)

    @field_validator("time_embedding_dim")
    @classmethod
    def even_embedding(cls, v: int) -> int:
        if v % 2:
            raise ValueError("time_embedding_dim must be even")
        return v

    @model_validator(mode="after")
    def check_channels(self):
        if len(self.channel_multipliers) != self.levels:
            raise ValueError(
                f"channel_multipliers has {len(self.channel_multipliers)} entries for {self.levels} levels"
            )
        if any(m < 1 for m in self.channel_multipliers):
            raise ValueError("channel_multipliers must be positive")
        for width in self.channels:
            if width % self.groupnorm_groups:
                raise ValueError(f"channel width {width} not divisible by groupnorm_groups={self.groupnorm_groups}")
            if width % self.attention_heads:
                raise ValueError(f"channel width {width} not divisible by attention_heads={self.attention_heads}")
        return self

    @property
    def channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def size_multiple(self) -> int:
        """Spatial sizes must be divisible by this"""
        return 2 ** (self.levels - 1)


class NetworkConfig(NetworkHyperparameters):
    """Complete description of one UNet instance"""

    in_channels: int = Field(default=6, ge=1)
    out_channels: int = Field(default=1, ge=1)
    use_time_embedding: bool = False
    # Encoder widths of the network supplying feature-level conditioning
    feature_channels: Optional[List[int]] = None
    # Encoder modules conditioned by element-wise addition; deeper ones use cross-attention
    add_levels: int = Field(default=2, ge=0)
    attention: Literal[True] = True

    @model_validator(mode="after")
    def check_feature_ports(self):
        if self.feature_channels is not None and len(self.feature_channels) != self.levels:
            raise ValueError("feature_channels needs one entry per encoder level")
        return self

    def check_input_size(self, height: int, width: int) -> None:
        """Raise ConfigError unless (height, width) is legal for this network"""
        multiple = self.size_multiple
        if height % multiple or width % multiple or height < multiple or width < multiple:
            raise ConfigError(
                f"Input {height}x{width} not divisible by 2^(levels-1)={multiple}"
            )

    def digest(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


# ============ Training configuration ============

class TrainConfig(BaseModel):
    """Optimisation and diffusion hyperparameters"""

    mode: PipelineMode = PipelineMode.FULL
    epochs: int = Field(default=1300, ge=1)
    max_steps: Optional[int] = Field(default=None, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0)
    batch_size: int = Field(default=16, ge=1)
    timesteps: int = Field(default=1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_kind: Literal["linear"] = "linear"
    loss_weight_cdpm: float = 1.0
    loss_weight_hfrm: float = 1.0
    hfrm_loss: Literal["l1", "l2"] = "l1"
    end_to_end: bool = True
    eval_stride: int = Field(default=20, ge=1)
    test_stride: int = Field(default=1, ge=1)
    checkpoint_every: int = Field(default=500, ge=1)
    log_every: int = Field(default=50, ge=1)
    seed: int = 0

    @field_validator("loss_weight_cdpm", "loss_weight_hfrm")
    @classmethod
    def fixed_weights(cls, v: float) -> float:
        if v != 1.0:
            raise ValueError("the total loss is the plain sum L_CDPM + L_HFRM; weights are fixed to 1")
        return v

    @model_validator(mode="after")
    def check_betas(self):
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        return self


# ============ Phantom configuration ============

class PhantomConfig(BaseModel):
    """Synthetic planning-slice generator parameters"""

    slice_size: int = Field(default=64, ge=16)
    beam_count: int = Field(default=7, ge=1)
    prescription_min: float = Field(default=45.0, gt=0)
    prescription_max: float = Field(default=55.0, gt=0)
    penumbra_width: float = Field(default=1.5, gt=0, description="Gaussian sigma in voxels")
    attenuation: float = Field(default=0.02, gt=0, description="Per voxel of unit-density tissue")
    geometry_jitter: float = Field(default=0.1, ge=0, lt=0.5)
    hu_window_min: float = -1000.0
    hu_window_max: float = 1000.0
    max_retries: int = Field(default=50, ge=1)
    split_ratios: List[float] = Field(default_factory=lambda: [98.0, 10.0, 22.0])
    seed: int = 0

    @field_validator("split_ratios", mode="before")
    @classmethod
    def parse_ratios(cls, v):
        return _split_list(v)

    @model_validator(mode="after")
    def check_phantom(self):
        if self.slice_size % 2:
            raise ValueError("slice_size must be even")
        if self.prescription_min > self.prescription_max:
            raise ValueError("prescription_min exceeds prescription_max")
        if self.hu_window_min >= self.hu_window_max:
            raise ValueError("empty HU window")
        if len(self.split_ratios) != 3 or any(r < 0 for r in self.split_ratios) or sum(self.split_ratios) <= 0:
            raise ValueError("split_ratios needs three non-negative weights (train, val, test)")
        return self


# ============ Flat run config ============

class RunConfig(TrainConfig, PhantomConfig, NetworkHyperparameters):
    """Everything a `key = value` run config file may set"""

    model_config = ConfigDict(extra="forbid")

    bench_steps: int = Field(default=10, ge=1)

    @model_validator(mode="after")
    def check_slice_for_network(self):
        # The denoiser sees half-resolution subbands, so it sets the stricter constraint
        multiple = 2 ** self.levels
        if self.slice_size % multiple:
            raise ValueError(f"slice_size {self.slice_size} must be divisible by 2^levels={multiple}")
        return self

    def hyperparameters(self) -> NetworkHyperparameters:
        return NetworkHyperparameters(**self.model_dump(include=set(NetworkHyperparameters.model_fields)))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.model_dump(include=set(TrainConfig.model_fields)))

    def phantom_config(self) -> PhantomConfig:
        return PhantomConfig(**self.model_dump(include=set(PhantomConfig.model_fields)))


# ============ Data records ============

class PlanningSample(BaseModel):
    """One 2D planning slice: CT, structure masks and ground-truth dose"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sample_id: str
    index: int
    seed: int
    ct: np.ndarray
    masks: Dict[str, np.ndarray]
    dose: np.ndarray
    prescription: float = Field(..., gt=0)

    @model_validator(mode="after")
    def check_sample(self):
        shape = self.ct.shape
        if len(shape) != 2:
            raise ValueError("planning slices are 2D")
        if set(self.masks) != set(STRUCTURES):
            raise ValueError(f"masks must be exactly {STRUCTURES}")
        for name, mask in self.masks.items():
            if mask.shape != shape:
                raise ValueError(f"mask {name} shape {mask.shape} differs from CT {shape}")
            if not np.isin(mask, (0, 1)).all():
                raise ValueError(f"mask {name} is not binary")
        if self.dose.shape != shape:
            raise ValueError("dose shape differs from CT")
        if not np.isfinite(self.dose).all() or (self.dose < 0).any():
            raise ValueError("dose must be finite and non-negative")
        if not self.masks["PTV"].any():
            raise ValueError("PTV mask is empty")
        return self

    @property
    def shape(self) -> Tuple[int, int]:
        return self.ct.shape

    def planning_input(self) -> np.ndarray:
        """X: CT followed by the binary masks in STRUCTURES order, float32 (6, H, W)"""
        channels = [self.ct] + [self.masks[name] for name in STRUCTURES]
        return np.stack(channels).astype(np.float32)


class LossReport(BaseModel):
    """Losses of one optimisation step"""

    l_cdpm: float
    l_hfrm: float
    l_total: float
    step: int
    epoch: int

    @model_validator(mode="after")
    def check_additivity(self):
        if self.l_total != self.l_cdpm + self.l_hfrm:
            raise ValueError("l_total must equal l_cdpm + l_hfrm")
        return self

    def is_finite(self) -> bool:
        return bool(np.isfinite([self.l_cdpm, self.l_hfrm, self.l_total]).all())


# ============ Metrics ============

class DvhCurve(BaseModel):
    """Cumulative dose-volume histogram of one structure"""

    structure: str = ""
    dose_bins: List[float]
    volume_fraction: List[float]

    @model_validator(mode="after")
    def check_curve(self):
        if len(self.dose_bins) != len(self.volume_fraction) or not self.dose_bins:
            raise ValueError("dose_bins and volume_fraction must be non-empty and aligned")
        if self.dose_bins[0] != 0.0 or self.volume_fraction[0] != 1.0:
            raise ValueError("DVH must start at 1.0 at 0 Gy")
        fractions = np.asarray(self.volume_fraction)
        if (fractions < 0).any() or (fractions > 1).any() or (np.diff(fractions) > 0).any():
            raise ValueError("DVH fractions must be non-increasing within [0, 1]")
        return self


class CaseDelta(BaseModel):
    """Signed prediction-minus-ground-truth metric differences for one case and structure"""

    case_id: str
    structure: str
    delta_ci: Optional[float] = None
    delta_d2: float
    delta_d50: float
    delta_dmean: float
    high_band_ratio: Optional[float] = None


class AggregateDelta(BaseModel):
    """Mean and population std of |delta| over cases"""

    structure: str
    cases: int
    ci_mean: Optional[float] = None
    ci_std: Optional[float] = None
    d2_mean: float
    d2_std: float
    d50_mean: float
    d50_std: float
    dmean_mean: float
    dmean_std: float


class MetricsReport(BaseModel):
    """Per-case deltas plus per-structure aggregates"""

    cases: List[CaseDelta]
    summary: List[AggregateDelta]


# ============ Artifacts ============

class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    crc32: int


class BlobEntry(BaseModel):
    name: str
    nbytes: int
    crc32: int


class CheckpointHeader(BaseModel):
    """JSON header of a checkpoint file"""
    model_config = {"protected_namespaces": ()}

    format_version: int
    mode: PipelineMode
    networks: Dict[str, NetworkConfig]
    timesteps: int
    beta_start: float
    beta_end: float
    schedule_kind: str = "linear"
    step: int = 0
    epoch: int = 0
    seed: int = 0
    tensors: List[TensorEntry]
    blobs: List[BlobEntry] = Field(default_factory=list)


class PredictionManifest(BaseModel):
    """Written next to predicted dose arrays"""

    checkpoint: str
    mode: PipelineMode
    seed: int
    stride: int
    split: str
    cases: List[str]


class BenchRow(BaseModel):
    """One line of the wavelet-vs-image denoiser timing table"""

    height: int
    width: int
    trials: int
    steps: int
    image_elements: int
    wavelet_elements: int
    image_step_median_s: float
    wavelet_step_median_s: float
    image_sampling_s: float
    wavelet_sampling_s: float
    speedup: float


class AblationRow(BaseModel):
    """Train-set scores of one (mode, seed) run of the ablation study"""

    mode: PipelineMode
    seed: int
    steps: int
    cases: int
    train_l1: float = Field(description="Mean normalized L1 between prediction and target")
    ptv_dmean_abs: float = Field(description="Mean |delta Dmean| of the PTV in Gy")
    high_band_ratio: float = Field(description="Mean high-band energy ratio, 1.0 is ideal")
