"""Configuration management for the Masked AutoEncoder Purifier"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.error_handler import ConfigValidationError
from src.io_utils import atomic_write_text, fingerprint
from src.models import (
    AttackDirection, AttackNorm, DistanceKind, FinetuneMode, Objective, ResolutionPolicy
)

logger = logging.getLogger(__name__)


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PurifierConfig(_StrictModel):
    """Architecture of the purifier P = g o f.

    Defaults are the desk-scale toy model; only the patch size matches the
    full-scale CIFAR-10 setup.
    """
    patch_size: int = Field(2, ge=1)
    in_chans: int = Field(3, ge=1)
    input_hw: Tuple[int, int] = (32, 32)
    embed_dim: int = Field(128, ge=4)
    depth: int = Field(4, ge=1)
    num_heads: int = Field(4, ge=1)
    decoder_embed_dim: int = Field(96, ge=4)
    decoder_depth: int = Field(2, ge=1)
    decoder_num_heads: int = Field(4, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)

    @model_validator(mode="after")
    def _check_shapes(self) -> "PurifierConfig":
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.decoder_embed_dim % self.decoder_num_heads:
            raise ValueError("decoder_embed_dim must be divisible by decoder_num_heads")
        # 2-D sin-cos tables split the width into four equal parts
        if self.embed_dim % 4 or self.decoder_embed_dim % 4:
            raise ValueError("embed widths must be divisible by 4")
        h, w = self.input_hw
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"patch_size {self.patch_size} must divide input_hw {self.input_hw}")
        return self

    @property
    def grid_hw(self) -> Tuple[int, int]:
        return (self.input_hw[0] // self.patch_size, self.input_hw[1] // self.patch_size)

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    def fingerprint(self) -> str:
        """Hash used to match checkpoints against the instantiated model"""
        return fingerprint(self.model_dump(mode="json"), length=32)


class AttackConfig(_StrictModel):
    """White-box attack parameters (pixel scale, [0, 1] images)"""
    norm: AttackNorm = AttackNorm.LINF
    epsilon: float = Field(8 / 255, ge=0)
    steps: int = Field(10, ge=1)
    step_size: float = Field(2 / 255, gt=0)
    random_start: bool = False
    direction: AttackDirection = AttackDirection.ASCEND
    seed: int = 0

    @classmethod
    def linf_8_255(cls, steps: int = 20, random_start: bool = False) -> "AttackConfig":
        return cls(norm=AttackNorm.LINF, epsilon=8 / 255, steps=steps, step_size=2 / 255,
                   random_start=random_start)

    @classmethod
    def l2_0_5(cls, steps: int = 20, random_start: bool = False) -> "AttackConfig":
        return cls(norm=AttackNorm.L2, epsilon=0.5, steps=steps, step_size=0.1, random_start=random_start)

    def label(self) -> str:
        """Human-readable label for report tables"""
        if self.norm == AttackNorm.LINF:
            budget = f"eps_inf={self.epsilon * 255:.3g}/255"
        else:
            budget = f"eps_2={self.epsilon:.3g}"
        return f"PGD-{self.norm.value} ({budget}, {self.steps} steps)"

    def fingerprint(self) -> str:
        return fingerprint(self.model_dump(mode="json"))


class TrainConfig(_StrictModel):
    """Purifier training schedule; desk-scale defaults"""
    objective: Objective = Objective.MAEP
    mask_ratio: float = 0.5
    distance: DistanceKind = DistanceKind.L1_MEAN
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1.5e-3, gt=0)
    weight_decay: float = Field(0.05, ge=0)
    warmup_steps: int = Field(100, ge=0)
    min_lr_ratio: float = Field(0.0, ge=0, le=1)
    grad_clip: Optional[float] = Field(1.0, gt=0)
    max_steps_per_epoch: Optional[int] = Field(None, ge=1)
    seed: int = 0
    deterministic: bool = True
    trades_lambda: float = 1.0
    finetune_mode: FinetuneMode = FinetuneMode.LORA
    finetune_epochs: int = Field(5, ge=0)
    finetune_lr: float = Field(1e-3, gt=0)
    lora_rank: int = Field(4, ge=1)
    lora_alpha: float = Field(4.0, gt=0)
    mlm_finetune_epochs: int = Field(0, ge=0)
    precompute_pairs: bool = False
    progress: bool = True

    @model_validator(mode="after")
    def _check_objective(self) -> "TrainConfig":
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ValueError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.trades_lambda <= 0:
            raise ValueError("trades_lambda must be > 0")
        if self.objective.uses_mask and self.mask_ratio <= 0:
            raise ValueError(f"objective {self.objective.value} needs mask_ratio > 0")
        if not self.objective.uses_mask and self.mask_ratio != 0:
            raise ValueError(f"objective {self.objective.value} runs unmasked; set mask_ratio to 0")
        return self


class DataConfig(_StrictModel):
    """Dataset, classifier and cache locations"""
    dataset: str = "synthetic"
    root: str = "data"
    seed: int = 7
    n_classes: int = Field(4, ge=2)
    n_per_class: int = Field(500, ge=1)
    resolution: Tuple[int, int] = (32, 32)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    test_fraction: float = Field(0.1, ge=0, lt=1)
    classifier_path: Optional[str] = None
    classifier_epochs: int = Field(8, ge=1)
    cache_dir: Optional[str] = None
    target_dataset: Optional[str] = None
    target_root: Optional[str] = None
    target_classifier_path: Optional[str] = None
    resolution_policy: ResolutionPolicy = ResolutionPolicy.TILE


class EvalConfig(_StrictModel):
    """Evaluation protocol"""
    n_runs: int = Field(5, ge=1)
    seeds: Optional[List[int]] = None
    # seeds only vary the result through the random start
    attack: AttackConfig = Field(default_factory=lambda: AttackConfig.linf_8_255(steps=20, random_start=True))
    split: str = "test"
    batch_size: int = Field(128, ge=1)
    max_batches: Optional[int] = Field(None, ge=1)
    ssim_window: int = Field(11, ge=1)
    psnr_cap: float = Field(100.0, gt=0)
    through_purifier: bool = True

    @model_validator(mode="after")
    def _check_seeds(self) -> "EvalConfig":
        if self.seeds is not None and len(self.seeds) != self.n_runs:
            raise ValueError("seeds must list exactly n_runs entries")
        return self

    def seed_list(self) -> List[int]:
        return list(self.seeds) if self.seeds is not None else list(range(self.n_runs))


class RunConfig(_StrictModel):
    """Single source of truth for one run directory"""
    model: PurifierConfig = Field(default_factory=PurifierConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    out_dir: str = "runs/desk"
    log_level: str = "INFO"
    device: str = "auto"

    def fingerprint(self) -> str:
        return fingerprint(self.model_dump(mode="json"), length=32)


def cifar10_preset() -> RunConfig:
    """Full-scale CIFAR-10 preset: ViT patch size 2, r = 0.5, five-seed PGD-20 evaluation"""
    return RunConfig(
        model=PurifierConfig(patch_size=2, input_hw=(32, 32)),
        train=TrainConfig(objective=Objective.MAEP, mask_ratio=0.5, epochs=300, batch_size=256),
        attack=AttackConfig(epsilon=8 / 255, steps=10, step_size=2 / 255),
        data=DataConfig(dataset="cifar10", n_classes=10),
        eval=EvalConfig(n_runs=5, attack=AttackConfig.linf_8_255(steps=20, random_start=True)),
        out_dir="runs/cifar10",
    )


def _parse_override(item: str) -> Tuple[List[str], Any]:
    if "=" not in item:
        raise ConfigValidationError(f"Override '{item}' must look like key.path=value", [item])
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def _apply_override(data: Dict[str, Any], path: List[str], value: Any) -> None:
    node = data
    for part in path[:-1]:
        child = node.get(part)
        if child is None:
            child = {}
            node[part] = child
        if not isinstance(child, dict):
            raise ConfigValidationError("Cannot descend into non-object key", [".".join(path)])
        node = child
    node[path[-1]] = value


class ConfigurationManager:
    """Load the run configuration from a JSON file, environment and dotted overrides"""

    def __init__(self, config_file: Optional[str] = None,
                 overrides: Optional[Sequence[str]] = None):
        """Initialize configuration manager"""
        self.config_file = config_file
        self.overrides = list(overrides or [])
        self.config: Optional[RunConfig] = None
        self.load_configuration()

    def load_configuration(self) -> None:
        """Load configuration from file, environment and overrides"""
        logger.info("Loading configuration...")
        config_data: Dict[str, Any] = {}

        if self.config_file:
            path = Path(self.config_file)
            if not path.exists():
                raise ConfigValidationError(f"Configuration file {path} does not exist", ["--config"])
            try:
                with open(path, 'r') as f:
                    config_data = json.load(f)
                logger.info(f"Loaded configuration from {path}")
            except json.JSONDecodeError as e:
                raise ConfigValidationError(f"Configuration file {path} is not valid JSON: {e}") from e

        if os.getenv("MAEP_OUT_DIR"):
            config_data["out_dir"] = os.environ["MAEP_OUT_DIR"]
        if os.getenv("MAEP_DEVICE"):
            config_data["device"] = os.environ["MAEP_DEVICE"]
        if os.getenv("LOG_LEVEL"):
            config_data["log_level"] = os.environ["LOG_LEVEL"]

        for item in self.overrides:
            path_parts, value = _parse_override(item)
            _apply_override(config_data, path_parts, value)

        self.config = self.validate(config_data)
        logger.info(f"Configuration loaded and validated (fingerprint {self.config.fingerprint()})")

    @staticmethod
    def validate(config_data: Dict[str, Any]) -> RunConfig:
        """Validate a raw mapping, translating pydantic errors into field paths"""
        try:
            return RunConfig.model_validate(config_data)
        except ValidationError as e:
            paths = [".".join(str(p) for p in err["loc"]) or "<root>" for err in e.errors()]
            messages = "; ".join(err["msg"] for err in e.errors())
            raise ConfigValidationError(f"Invalid configuration: {messages}", paths) from e

    def reload_configuration(self) -> None:
        """Reload configuration without restart"""
        logger.info("Reloading configuration...")
        self.load_configuration()

    def config_hash(self) -> str:
        """Fingerprint of the full run configuration"""
        if not self.config:
            raise RuntimeError("Configuration not loaded")
        return self.config.fingerprint()

    def get_out_dir(self) -> Path:
        if not self.config:
            raise RuntimeError("Configuration not loaded")
        return Path(self.config.out_dir)

    def echo(self, out_dir: Optional[str] = None) -> Path:
        """Write the effective configuration into the run directory"""
        if not self.config:
            raise RuntimeError("Configuration not loaded")
        target = Path(out_dir or self.config.out_dir) / "config.json"
        text = json.dumps(self.config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
        atomic_write_text(target, text)
        logger.debug(f"Configuration echoed to {target}")
        return target


def derive_config(config: RunConfig, updates: Dict[str, Any]) -> RunConfig:
    """Copy of config with dotted-key updates applied and re-validated"""
    data = config.model_dump(mode="json")
    for key, value in updates.items():
        _apply_override(data, key.split("."), value)
    return ConfigurationManager.validate(data)
