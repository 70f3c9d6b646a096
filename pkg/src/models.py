"""Data models for the Masked AutoEncoder Purifier"""
import math
import statistics
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, List, Optional

import torch


class DistanceKind(str, Enum):
    """Distance measure D used by every objective"""
    L1_MEAN = "l1"
    MSE = "mse"


class AttackNorm(str, Enum):
    """Threat-model norm"""
    LINF = "linf"
    L2 = "l2"


class AttackDirection(str, Enum):
    """ASCEND attacks; DESCEND produces anti-adversarial points"""
    ASCEND = "ascend"
    DESCEND = "descend"


class Objective(str, Enum):
    """Training objective roster"""
    MAEP = "maep"
    MLM_PRETRAIN = "mlm_pretrain"
    MLM_FINETUNE = "mlm_finetune"
    DISCO_STYLE = "disco_style"
    RECON_BASELINE = "recon_baseline"
    TRADES_PIXEL = "trades_pixel"
    TRADES_LATENT = "trades_latent"

    @property
    def uses_mask(self) -> bool:
        return self in (Objective.MAEP, Objective.MLM_PRETRAIN)


class FinetuneMode(str, Enum):
    """Decoder finetuning flavour"""
    LORA = "lora"
    DECODER = "decoder"


class ResolutionPolicy(str, Enum):
    """How a purifier trained at one resolution handles another"""
    NATIVE = "native"
    TILE = "tile"
    POS_INTERP = "pos_interp"


@dataclass
class LossBreakdown:
    """Area-weighted MAEP loss terms; total == purify_term + recon_term"""
    total: torch.Tensor
    purify_term: torch.Tensor
    recon_term: torch.Tensor
    visible_fraction: float
    masked_fraction: float

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.total).all())

    def to_dict(self) -> Dict[str, float]:
        """Convert to dictionary"""
        return {
            "total": float(self.total.detach()),
            "purify_term": float(self.purify_term.detach()),
            "recon_term": float(self.recon_term.detach()),
            "visible_fraction": self.visible_fraction,
            "masked_fraction": self.masked_fraction,
        }


@dataclass
class StepRecord:
    """One line of the training metrics stream"""
    step: int
    loss_total: float
    loss_purify: float
    loss_recon: float
    lr: float
    grad_norm: float
    wall_ms: float
    stage: str = "pretrain"

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary"""
        return asdict(self)


@dataclass
class SeedResult:
    """Accuracy of one evaluation seed"""
    seed: int
    clean_acc: float
    robust_acc: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EvalReport:
    """Clean/robust/average accuracy plus purification quality, averaged over seeds"""
    defense: str
    dataset: str
    clean_acc: float
    robust_acc: float
    avg_acc: float
    n_runs: int
    attack_fingerprint: str
    per_seed: List[SeedResult] = field(default_factory=list)
    clean_std: float = 0.0
    robust_std: float = 0.0
    psnr_clean: float = 0.0
    psnr_adv: float = 0.0
    ssim_clean: float = 0.0
    ssim_adv: float = 0.0
    attack_label: str = ""
    config_fingerprint: str = ""
    created_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    @classmethod
    def from_seeds(cls, defense: str, dataset: str, per_seed: List[SeedResult],
                   attack_fingerprint: str, **quality: Any) -> "EvalReport":
        """Aggregate per-seed results into means and sample std"""
        if not per_seed:
            raise ValueError("At least one seed result is required")
        clean = [s.clean_acc for s in per_seed]
        robust = [s.robust_acc for s in per_seed]
        clean_acc = statistics.fmean(clean)
        robust_acc = statistics.fmean(robust)
        return cls(
            defense=defense,
            dataset=dataset,
            clean_acc=clean_acc,
            robust_acc=robust_acc,
            avg_acc=(clean_acc + robust_acc) / 2,
            n_runs=len(per_seed),
            attack_fingerprint=attack_fingerprint,
            per_seed=list(per_seed),
            clean_std=statistics.stdev(clean) if len(clean) > 1 else 0.0,
            robust_std=statistics.stdev(robust) if len(robust) > 1 else 0.0,
            **quality,
        )

    def validate(self) -> None:
        """Check the accuracy identities"""
        for name in ("clean_acc", "robust_acc", "avg_acc"):
            value = getattr(self, name)
            if not (0.0 <= value <= 100.0):
                raise ValueError(f"{name}={value} outside [0, 100]")
        if not math.isclose(self.avg_acc, (self.clean_acc + self.robust_acc) / 2, abs_tol=1e-9):
            raise ValueError("avg_acc must be the mean of clean_acc and robust_acc")

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary"""
        data = asdict(self)
        data['per_seed'] = [s.to_dict() for s in self.per_seed]
        data['created_at'] = self.created_at.isoformat()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        """Inverse of to_dict"""
        payload = dict(data)
        payload['per_seed'] = [SeedResult(**s) for s in payload.get('per_seed', [])]
        if 'created_at' in payload and isinstance(payload['created_at'], str):
            payload['created_at'] = datetime.fromisoformat(payload['created_at'])
        return cls(**payload)


@dataclass
class ConjectureReport:
    """Accuracies of c(P(x_a)), c(P(x)) and c(x - delta_a)"""
    acc_c_Pxa: float
    acc_c_Px: float
    acc_c_x_minus_delta: float
    n_samples: int
    attack_fingerprint: str

    @property
    def gap(self) -> float:
        return abs(self.acc_c_Px - self.acc_c_x_minus_delta)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['gap'] = self.gap
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ConjectureReport":
        payload = {k: v for k, v in data.items() if k != 'gap'}
        return cls(**payload)


@dataclass
class TransferSpec:
    """Cross-dataset / cross-resolution evaluation setup"""
    train_tag: str
    test_tag: str
    policy: ResolutionPolicy = ResolutionPolicy.TILE

    def to_dict(self) -> Dict[str, Any]:
        return {"train_tag": self.train_tag, "test_tag": self.test_tag,
                "policy": self.policy.value}


@dataclass
class CheckpointRecord:
    """Registry entry for a written checkpoint"""
    path: str
    config_hash: str
    objective: str
    dataset: str
    step: int
    val_loss: Optional[float] = None
    created_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['created_at'] = self.created_at.isoformat()
        return data
