"""
Configuration objects for the codec and its training schedule.

Configurations are frozen dataclasses validated on construction. They can be
stored in and read back from TOML files with the layout:

    [codec]
    N = 32
    M = 48
    num_slices = 4
    lmbda = 0.013
    metric = "mse"

        [codec.ablation]
        rope = true
        hgcp = true

    [train]
    stage1_steps = 5000
    stage2_steps = 20000
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from ._compat import require_tomlkit, require_tomllib
from .errors import ConfigError

METRICS = ("mse", "ms-ssim")
ENTROPY_MODELS = ("multiref", "hyperprior")

# Rate-distortion weights, lowest quality first.
MSE_LAMBDAS: Tuple[float, ...] = (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483)
MSSSIM_LAMBDAS: Tuple[float, ...] = (2.4, 4.58, 8.73, 16.64, 31.73, 60.5)

# Fields that change the network layout. Everything else (lambda, metric)
# can differ between checkpoints of the same architecture.
_ARCHITECTURE_FIELDS = (
    "N",
    "M",
    "num_slices",
    "stm_blocks_per_stage",
    "depthrb_expansion",
    "gate_expansion",
    "window_size",
    "window_overlap",
    "context_expansion",
    "hyper_channels",
    "entropy_model",
    "ablation",
)


@dataclass(frozen=True)
class AblationCase:
    """Independent on/off switches for every entropy-model and transform component."""
    ilr: bool = True      # latent residual prediction
    gsc: bool = True      # guided selective compression
    rope: bool = True     # 2D rotary positions in global attention
    cr: bool = True       # channel-wise context reweighting
    hgcp: bool = True     # hyperprior-guided global context for slice 0
    stmt: bool = True     # token mixing blocks in the transforms
    gate: bool = True     # gate residuals in the context modules

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AblationCase":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown ablation toggles: {sorted(unknown)}")
        return cls(**{k: bool(v) for k, v in data.items()})

    @classmethod
    def all_disabled(cls) -> "AblationCase":
        return cls(**{f.name: False for f in dataclasses.fields(cls)})


@dataclass(frozen=True)
class CodecConfig:
    """
    Architecture and rate-distortion settings of one codec.

    Parameters
    ----------
    N : int
        Channels of the transforms and of the side information z.
    M : int
        Channels of the latent y.
    num_slices : int
        Number of channel slices coded one after another.
    lmbda : float
        Rate-distortion trade-off weight.
    metric : str
        "mse" or "ms-ssim".
    stm_blocks_per_stage : int
        Token mixing blocks after each resampling layer of g_a / g_s.
    hyper_channels : int, optional
        Channels of the hyperprior features; defaults to 2M.
    entropy_model : str
        "multiref" for the full context model, "hyperprior" for the
        hyperprior-only baseline.
    """
    N: int = 32
    M: int = 48
    num_slices: int = 4
    lmbda: float = 0.013
    metric: str = "mse"
    stm_blocks_per_stage: int = 2
    depthrb_expansion: int = 2
    gate_expansion: int = 1
    window_size: int = 8
    window_overlap: int = 4
    context_expansion: int = 1
    hyper_channels: Optional[int] = None
    entropy_model: str = "multiref"
    skip_threshold: float = 0.3
    ablation: AblationCase = field(default_factory=AblationCase)

    def __post_init__(self):
        if self.N < 4 or self.M < 4:
            raise ConfigError(f"N and M must be >= 4, got N={self.N}, M={self.M}")
        if self.num_slices < 2:
            raise ConfigError(f"num_slices must be >= 2, got {self.num_slices}")
        if self.M % self.num_slices:
            raise ConfigError(
                f"M={self.M} is not divisible by num_slices={self.num_slices}"
            )
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got '{self.metric}'")
        if self.entropy_model not in ENTROPY_MODELS:
            raise ConfigError(
                f"entropy_model must be one of {ENTROPY_MODELS}, got '{self.entropy_model}'"
            )
        if self.lmbda < 0:
            raise ConfigError(f"lmbda must be non-negative, got {self.lmbda}")
        if self.stm_blocks_per_stage < 0:
            raise ConfigError("stm_blocks_per_stage must be >= 0")
        if not 0 <= self.window_overlap < self.window_size or self.window_overlap % 2:
            raise ConfigError(
                f"window_overlap must be even and smaller than window_size, "
                f"got window_size={self.window_size}, window_overlap={self.window_overlap}"
            )
        if self.slice_channels % 2 or self.context_channels % 2:
            raise ConfigError(
                "slice and context channel counts must be even for rotary positions, "
                f"got {self.slice_channels} and {self.context_channels}"
            )
        if isinstance(self.ablation, dict):
            object.__setattr__(self, "ablation", AblationCase.from_dict(self.ablation))

    @property
    def slice_channels(self) -> int:
        return self.M // self.num_slices

    @property
    def context_channels(self) -> int:
        return self.slice_channels * self.context_expansion

    @property
    def hyper_out_channels(self) -> int:
        return self.hyper_channels if self.hyper_channels is not None else 2 * self.M

    def replace(self, **changes) -> "CodecConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        if data["hyper_channels"] is None:
            del data["hyper_channels"]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CodecConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown codec settings: {sorted(unknown)}")
        if "ablation" in data:
            data["ablation"] = AblationCase.from_dict(dict(data["ablation"]))
        return cls(**data)

    def architecture(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        return {name: data[name] for name in _ARCHITECTURE_FIELDS}

    @property
    def config_hash(self) -> str:
        """SHA256 over the architecture fields, in canonical JSON."""
        payload = json.dumps(self.architecture(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    @property
    def model_id(self) -> int:
        """One-byte architecture tag written into bitstream headers."""
        return int(self.config_hash[-2:], 16)


PRESETS: Dict[str, CodecConfig] = {
    "desk": CodecConfig(),
    "full": CodecConfig(
        N=192,
        M=320,
        num_slices=10,
        stm_blocks_per_stage=2,
        context_expansion=2,
    ),
}


def get_preset(name: str, **overrides) -> CodecConfig:
    """Return a named preset, optionally with some fields replaced."""
    if name not in PRESETS:
        available = ", ".join(sorted(PRESETS))
        raise ConfigError(f"Unknown preset '{name}'. Available: {available}")
    return PRESETS[name].replace(**overrides) if overrides else PRESETS[name]


def lambdas_for(metric: str) -> Tuple[float, ...]:
    if metric == "mse":
        return MSE_LAMBDAS
    if metric == "ms-ssim":
        return MSSSIM_LAMBDAS
    raise ConfigError(f"metric must be one of {METRICS}, got '{metric}'")


@dataclass(frozen=True)
class TrainConfig:
    """
    Two-stage training schedule plus selective-compression post-training.

    Stage-2 learning rates are applied piecewise: ``stage2_lrs[k]`` holds from
    fraction ``stage2_milestones[k-1]`` of the stage onward.
    """
    stage1_steps: int = 5000
    stage2_steps: int = 20000
    skip_steps: int = 2000
    upper_bound_steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-4
    stage2_lrs: Tuple[float, ...] = (1e-4, 3e-5, 1e-5)
    stage2_milestones: Tuple[float, ...] = (0.6, 0.85)
    patch_size: int = 64
    large_patch_size: int = 128
    patch_switch: float = 0.6
    skip_lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 10
    mse_scale: float = 255.0
    min_bpp: float = 3.0
    jpeg_downsample: bool = True
    num_workers: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage2_lrs", tuple(self.stage2_lrs))
        object.__setattr__(self, "stage2_milestones", tuple(self.stage2_milestones))
        if len(self.stage2_lrs) != len(self.stage2_milestones) + 1:
            raise ConfigError(
                "stage2_lrs needs exactly one more entry than stage2_milestones"
            )
        if any(b >= a for a, b in zip(self.stage2_lrs, self.stage2_lrs[1:])):
            raise ConfigError(
                f"stage-2 learning rates must be strictly decreasing, got {self.stage2_lrs}"
            )
        if any(not 0 < m < 1 for m in self.stage2_milestones) or list(
            self.stage2_milestones
        ) != sorted(self.stage2_milestones):
            raise ConfigError(
                f"stage2_milestones must be increasing fractions in (0, 1), "
                f"got {self.stage2_milestones}"
            )
        if self.patch_size % 64 or self.large_patch_size % 64:
            raise ConfigError("patch sizes must be multiples of 64")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mse_scale not in (1.0, 255.0):
            raise ConfigError(f"mse_scale must be 1 or 255, got {self.mse_scale}")

    def stage2_lr(self, step: int) -> float:
        """Learning rate of stage 2 at ``step``."""
        fraction = step / max(self.stage2_steps, 1)
        index = sum(fraction >= m for m in self.stage2_milestones)
        return self.stage2_lrs[index]

    def stage2_patch_size(self, step: int) -> int:
        if step >= self.patch_switch * self.stage2_steps:
            return self.large_patch_size
        return self.patch_size

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["stage2_lrs"] = list(self.stage2_lrs)
        data["stage2_milestones"] = list(self.stage2_milestones)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown train settings: {sorted(unknown)}")
        return cls(**data)


def load_config(path: Union[str, Path]) -> Tuple[CodecConfig, TrainConfig]:
    """
    Read codec and training settings from a TOML file.

    A ``preset`` key in ``[codec]`` selects the base configuration the other
    keys override.

    Raises
    ------
    FileNotFoundError
        If the file does not exist
    ConfigError
        If a value is invalid
    """
    tomllib = require_tomllib()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    with open(path, "rb") as f:
        data = tomllib.load(f)

    codec_data = dict(data.get("codec", {}))
    preset = codec_data.pop("preset", None)
    if preset is not None:
        base = get_preset(preset).to_dict()
        base.update(codec_data)
        codec_data = base
    codec = CodecConfig.from_dict(codec_data)
    train = TrainConfig.from_dict(dict(data.get("train", {})))
    return codec, train


def save_config(
    path: Union[str, Path],
    codec: CodecConfig,
    train: Optional[TrainConfig] = None,
) -> None:
    """Write settings to TOML, keeping any other tables already in the file."""
    tomlkit = require_tomlkit()
    path = Path(path)

    if path.exists():
        with open(path, "r") as f:
            doc = tomlkit.load(f)
    else:
        doc = tomlkit.document()

    codec_table = tomlkit.table()
    codec_data = codec.to_dict()
    ablation = codec_data.pop("ablation")
    for key, value in codec_data.items():
        codec_table.add(key, value)
    ablation_table = tomlkit.table()
    for key, value in ablation.items():
        ablation_table.add(key, value)
    codec_table.add("ablation", ablation_table)
    doc["codec"] = codec_table

    if train is not None:
        train_table = tomlkit.table()
        for key, value in train.to_dict().items():
            train_table.add(key, value)
        doc["train"] = train_table

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(tomlkit.dumps(doc))
