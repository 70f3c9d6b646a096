"""Two-stage purifier training and the baseline objective trainers"""
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn
from tqdm import tqdm

from src.attacks import ClassifierHandle
from src.checkpoint import (
    CheckpointMetadata, base_weight_hash, encoder_weight_hash, save_checkpoint
)
from src.config_manager import RunConfig
from src.data_pipeline import DatasetHandle, make_adv_pairs
from src.database import Database
from src.error_handler import NonFiniteError, TrainingDivergedError
from src.losses import masked_purify_loss, objective_loss
from src.metrics_tracker import MetricsTracker
from src.models import CheckpointRecord, DistanceKind, FinetuneMode, LossBreakdown, Objective, StepRecord
from src.patch_ops import full_mask, sample_mask
from src.purifier import MaskedAutoencoderPurifier, attach_lora, freeze_encoder, has_lora
from src.safety_gate import SafetyGate

logger = logging.getLogger(__name__)

Pair = Tuple[torch.Tensor, torch.Tensor, torch.Tensor]


def mask_seed(run_seed: int, step: int) -> int:
    """Per-step mask seed; a pure function of run seed and step"""
    return (int(run_seed) * 1_000_003 + int(step)) % (2 ** 63 - 1)


def cosine_with_warmup(warmup_steps: int, total_steps: int, min_lr_ratio: float = 0.0):
    """LR multiplier: linear warmup, then cosine decay to min_lr_ratio"""
    def schedule(step: int) -> float:
        if warmup_steps and step < warmup_steps:
            return (step + 1) / warmup_steps
        span = max(total_steps - warmup_steps, 1)
        progress = min((step - warmup_steps) / span, 1.0)
        return min_lr_ratio + (1 - min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * progress))
    return schedule


def set_determinism(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        if torch.backends.cudnn.is_available():
            torch.backends.cudnn.benchmark = False
            torch.backends.cudnn.deterministic = True


def resolve_device(name: str = "auto") -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


@dataclass
class TrainState:
    """Counters and running statistics that travel with the optimizer state"""
    step: int = 0
    epoch: int = 0
    stage: str = "pretrain"
    loss_ema: Optional[float] = None
    last_lr: float = 0.0
    last_grad_norm: float = 0.0

    def update_loss(self, value: float, decay: float = 0.98) -> None:
        self.loss_ema = value if self.loss_ema is None else decay * self.loss_ema + (1 - decay) * value

    def to_dict(self) -> Dict:
        return asdict(self)


@torch.no_grad()
def validation_loss(model: nn.Module, pairs: List[Pair], objective: Objective, ratio: float,
                    kind: DistanceKind = DistanceKind.L1_MEAN, lam: float = 1.0,
                    seed: int = 0) -> float:
    """Sample-weighted mean objective over fixed pairs with per-batch fixed masks"""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for index, (x, x_a, _) in enumerate(pairs):
        grid_n = (x_a.shape[-2] // model.patch_size) * (x_a.shape[-1] // model.patch_size)
        if ratio > 0:
            m = sample_mask(x_a.shape[0], grid_n, ratio, mask_seed(seed, index), device=x_a.device)
        else:
            m = full_mask(x_a.shape[0], grid_n, device=x_a.device)
        breakdown = objective_loss(objective, model, x_a, x, m, kind, lam)
        total += float(breakdown.total) * x.shape[0]
        count += x.shape[0]
    model.train(was_training)
    return total / max(count, 1)


class Trainer:
    """Drive purifier training for one run directory"""

    def __init__(self, config: RunConfig, model: MaskedAutoencoderPurifier,
                 classifier: ClassifierHandle, handle: DatasetHandle,
                 out_dir: Union[str, Path], database: Optional[Database] = None,
                 device: Optional[torch.device] = None):
        """Initialize trainer"""
        self.config = config
        self.train_cfg = config.train
        self.device = device or torch.device("cpu")
        self.model = model.to(self.device)
        self.classifier = classifier.to(self.device)
        self.handle = handle
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.database = database
        self.tracker = MetricsTracker(self.out_dir)
        self.state = TrainState()
        self.optimizer: Optional[torch.optim.Optimizer] = None
        self.scheduler: Optional[torch.optim.lr_scheduler.LambdaLR] = None
        self._val_pairs: Optional[List[Pair]] = None
        set_determinism(self.train_cfg.seed, self.train_cfg.deterministic)

    # -- data ---------------------------------------------------------------

    def steps_per_epoch(self) -> int:
        n = math.ceil(self.handle.num_samples("train") / self.train_cfg.batch_size)
        if self.train_cfg.max_steps_per_epoch is not None:
            n = min(n, self.train_cfg.max_steps_per_epoch)
        return n

    def pair_batches(self, epoch: int):
        """(x, x_a, y) batches for one epoch, attacked on the fly or replayed from the cache"""
        cache_dir = None
        if self.train_cfg.precompute_pairs:
            cache_dir = self.config.data.cache_dir or str(self.out_dir / "adv_cache")
        return make_adv_pairs(
            self.handle, self.classifier, self.config.attack, cache_dir=cache_dir, split="train",
            batch_size=self.train_cfg.batch_size, shuffle_seed=self.train_cfg.seed + epoch,
            max_batches=self.train_cfg.max_steps_per_epoch, device=self.device,
        )

    def val_pairs(self) -> List[Pair]:
        if self._val_pairs is None:
            split = "val" if "val" in self.handle.splits and self.handle.num_samples("val") else "train"
            self._val_pairs = list(make_adv_pairs(
                self.handle, self.classifier, self.config.attack, split=split,
                batch_size=self.train_cfg.batch_size, max_batches=4, device=self.device,
            ))
        return self._val_pairs

    # -- optimisation ---------------------------------------------------------

    def build_optimizer(self, lr: float, total_steps: int) -> None:
        params = [p for p in self.model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(params, lr=lr, weight_decay=self.train_cfg.weight_decay,
                                           betas=(0.9, 0.95))
        warmup = min(self.train_cfg.warmup_steps, max(total_steps // 10, 0))
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, cosine_with_warmup(warmup, total_steps, self.train_cfg.min_lr_ratio)
        )
        logger.debug(f"Optimizer over {sum(p.numel() for p in params)} parameters, "
                     f"{total_steps} steps, warmup {warmup}")

    def _optimize(self, breakdown: LossBreakdown, started: float) -> StepRecord:
        if not breakdown.is_finite():
            raise TrainingDivergedError(self.state.step, self.state.last_lr, self.state.last_grad_norm)
        if self.optimizer is None or self.scheduler is None:
            raise RuntimeError("Optimizer not built")

        self.optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        params = [p for p in self.model.parameters() if p.requires_grad]
        max_norm = self.train_cfg.grad_clip if self.train_cfg.grad_clip is not None else float("inf")
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, max_norm))
        lr = self.optimizer.param_groups[0]["lr"]
        if not math.isfinite(grad_norm):
            raise TrainingDivergedError(self.state.step, lr, grad_norm)
        self.optimizer.step()
        self.scheduler.step()

        losses = breakdown.to_dict()
        record = StepRecord(
            step=self.state.step,
            loss_total=losses["total"],
            loss_purify=losses["purify_term"],
            loss_recon=losses["recon_term"],
            lr=lr,
            grad_norm=grad_norm,
            wall_ms=(time.perf_counter() - started) * 1000.0,
            stage=self.state.stage,
        )
        self.tracker.record_step(record)
        self.state.step += 1
        self.state.last_lr = lr
        self.state.last_grad_norm = grad_norm
        self.state.update_loss(record.loss_total)
        return record

    @contextmanager
    def _divergence_context(self):
        """Report non-finite activations as a divergence at the current step"""
        try:
            yield
        except NonFiniteError as e:
            raise TrainingDivergedError(self.state.step, self.state.last_lr, self.state.last_grad_norm) from e

    def _mask_for(self, x: torch.Tensor, ratio: float):
        grid_n = (x.shape[-2] // self.model.patch_size) * (x.shape[-1] // self.model.patch_size)
        if ratio > 0:
            return sample_mask(x.shape[0], grid_n, ratio, mask_seed(self.train_cfg.seed, self.state.step),
                               device=x.device)
        return full_mask(x.shape[0], grid_n, device=x.device)

    def objective_step(self, x: torch.Tensor, x_a: torch.Tensor, objective: Objective,
                       ratio: float) -> LossBreakdown:
        """One optimizer update for any roster objective"""
        started = time.perf_counter()
        self.model.train()
        m = self._mask_for(x, ratio)
        with self._divergence_context():
            breakdown = objective_loss(objective, self.model, x_a, x, m, self.train_cfg.distance,
                                       self.train_cfg.trades_lambda)
        self._optimize(breakdown, started)
        return breakdown

    def pretrain_step(self, x: torch.Tensor, x_a: torch.Tensor) -> LossBreakdown:
        """One MAEP update with a fresh step-seeded mask at the configured ratio"""
        if self.train_cfg.objective != Objective.MAEP:
            raise ValueError(f"pretrain_step needs objective maep, got {self.train_cfg.objective.value}")
        return self.objective_step(x, x_a, Objective.MAEP, self.train_cfg.mask_ratio)

    def _finetune_step(self, x: torch.Tensor, x_a: torch.Tensor) -> torch.Tensor:
        started = time.perf_counter()
        self.model.train()
        m = self._mask_for(x, 0.0)
        with self._divergence_context():
            loss = masked_purify_loss(self.model, x_a, x, m, self.train_cfg.distance)
        breakdown = LossBreakdown(total=loss, purify_term=loss, recon_term=loss * 0,
                                  visible_fraction=1.0, masked_fraction=0.0)
        self._optimize(breakdown, started)
        return loss

    # -- stages ---------------------------------------------------------------

    def run_stage(self, stage: str, epochs: int, step_fn, lr: float,
                  resume_from: Optional[Path] = None) -> None:
        """Run epochs of step_fn(x, x_a), saving resumable state at every epoch boundary"""
        self.state.stage = stage
        self.tracker.stage = stage
        self.build_optimizer(lr, max(epochs * self.steps_per_epoch(), 1))
        start_epoch = 0
        if resume_from is not None and Path(resume_from).exists():
            start_epoch = self.load_state(resume_from, stage)

        for epoch in range(start_epoch, epochs):
            self.state.epoch = epoch
            bar = tqdm(self.pair_batches(epoch), total=self.steps_per_epoch(),
                       desc=f"{stage} epoch {epoch + 1}/{epochs}",
                       disable=not self.train_cfg.progress, leave=False)
            for x, x_a, _ in bar:
                step_fn(x, x_a)
                if self.state.loss_ema is not None:
                    bar.set_postfix(loss=f"{self.state.loss_ema:.4f}")
            self.state.epoch = epoch + 1
            logger.info(f"{stage} epoch {epoch + 1}/{epochs}: step={self.state.step} "
                        f"loss_ema={self.state.loss_ema:.5f} lr={self.state.last_lr:.2e}")
            self.save_state(self.out_dir / "train_state.pt")
        self.tracker.export()

    def pretrain(self, resume: bool = False) -> None:
        """Stage one: the configured objective at its mask ratio"""
        objective = self.train_cfg.objective
        ratio = self.train_cfg.mask_ratio

        def step_fn(x, x_a):
            return self.objective_step(x, x_a, objective, ratio)

        two_stage = objective == Objective.MLM_PRETRAIN and self.train_cfg.mlm_finetune_epochs > 0
        state_path = self.out_dir / "train_state.pt" if resume else None
        saved = self.saved_stage(state_path) if state_path is not None else None

        if two_stage and saved == "mlm_finetune":
            logger.info("Pretraining stage already finished; resuming the masked-LM second stage")
        else:
            logger.info(f"Pretraining {objective.value} at r={ratio} for {self.train_cfg.epochs} epochs")
            self.run_stage("pretrain", self.train_cfg.epochs, step_fn, self.train_cfg.lr,
                           resume_from=state_path)

        if two_stage:
            def finetune_fn(x, x_a):
                return self.objective_step(x, x_a, Objective.MLM_FINETUNE, 0.0)

            logger.info(f"Masked-LM second stage at r=0 for {self.train_cfg.mlm_finetune_epochs} epochs")
            self.run_stage("mlm_finetune", self.train_cfg.mlm_finetune_epochs, finetune_fn, self.train_cfg.lr,
                           resume_from=state_path if saved == "mlm_finetune" else None)

    def finetune_lora(self) -> Dict[str, str]:
        """Decoder-only finetuning at r = 0 through low-rank adapters; base weights stay bit-identical"""
        if not has_lora(self.model):
            attach_lora(self.model, self.train_cfg.lora_rank, self.train_cfg.lora_alpha)
        SafetyGate(FinetuneMode.LORA).enforce(self.model)

        before = base_weight_hash(self.model)
        self.run_stage("finetune", self.train_cfg.finetune_epochs, self._finetune_step,
                       self.train_cfg.finetune_lr)
        after = base_weight_hash(self.model)
        SafetyGate.verify_unchanged("Base weights", before, after)
        return {"base_hash": after}

    def finetune_decoder(self) -> Dict[str, str]:
        """Plain decoder finetuning at r = 0 with the encoder frozen"""
        freeze_encoder(self.model)
        SafetyGate(FinetuneMode.DECODER).enforce(self.model)

        before = encoder_weight_hash(self.model)
        self.run_stage("finetune", self.train_cfg.finetune_epochs, self._finetune_step,
                       self.train_cfg.finetune_lr)
        after = encoder_weight_hash(self.model)
        SafetyGate.verify_unchanged("Encoder weights", before, after)
        return {"encoder_hash": after}

    def finetune(self) -> Dict[str, str]:
        if self.train_cfg.finetune_mode == FinetuneMode.LORA:
            return self.finetune_lora()
        return self.finetune_decoder()

    # -- persistence ----------------------------------------------------------

    def save_state(self, path: Union[str, Path]) -> Path:
        """Resumable snapshot: model, optimizer, scheduler, counters and RNG"""
        path = Path(path)
        torch.save({
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict() if self.optimizer else None,
            "scheduler": self.scheduler.state_dict() if self.scheduler else None,
            "state": self.state.to_dict(),
            "rng": torch.get_rng_state(),
        }, path)
        return path

    @staticmethod
    def saved_stage(path: Union[str, Path]) -> Optional[str]:
        """Stage recorded in a resumable snapshot, or None when there is none"""
        if not Path(path).exists():
            return None
        return torch.load(path, map_location="cpu")["state"]["stage"]

    def load_state(self, path: Union[str, Path], stage: str) -> int:
        """Restore a snapshot taken in the same stage; returns the epoch to continue from"""
        snapshot = torch.load(path, map_location=self.device)
        state = TrainState(**snapshot["state"])
        if state.stage != stage:
            logger.warning(f"Ignoring {path}: saved in stage {state.stage}, running {stage}")
            return 0
        self.model.load_state_dict(snapshot["model"])
        if snapshot["optimizer"] is not None:
            self.optimizer.load_state_dict(snapshot["optimizer"])
        if snapshot["scheduler"] is not None:
            self.scheduler.load_state_dict(snapshot["scheduler"])
        torch.set_rng_state(snapshot["rng"])
        self.state = state
        logger.info(f"Resumed {stage} from {path} at epoch {state.epoch}, step {state.step}")
        return state.epoch

    def val_setup(self, finetuned: bool) -> Tuple[Objective, float]:
        if finetuned:
            return Objective.MLM_FINETUNE, 0.0
        if self.train_cfg.objective == Objective.MLM_PRETRAIN and self.train_cfg.mlm_finetune_epochs > 0:
            return Objective.MLM_FINETUNE, 0.0
        return self.train_cfg.objective, self.train_cfg.mask_ratio

    def save(self, name: str, finetuned: bool = False) -> Path:
        """Write a checkpoint with its validation loss and register it"""
        objective, ratio = self.val_setup(finetuned)
        val = validation_loss(self.model, self.val_pairs(), objective, ratio,
                              self.train_cfg.distance, self.train_cfg.trades_lambda, self.train_cfg.seed)
        lora_rank = lora_alpha = None
        if has_lora(self.model):
            lora_rank, lora_alpha = self.train_cfg.lora_rank, self.train_cfg.lora_alpha
        metadata = CheckpointMetadata(
            config=self.config.model,
            mask_ratio=ratio,
            dataset=self.handle.tag,
            seed=self.train_cfg.seed,
            step=self.state.step,
            objective=self.train_cfg.objective.value,
            loss_kind=self.train_cfg.distance.value,
            lora_rank=lora_rank,
            lora_alpha=lora_alpha,
            val_loss=val,
            extra={"val_objective": objective.value, "val_ratio": ratio,
                   "finetune_mode": self.train_cfg.finetune_mode.value if finetuned else None,
                   "run_fingerprint": self.config.fingerprint()},
        )
        path = save_checkpoint(self.model, self.out_dir / name, metadata)
        self.tracker.set_gauge("validation", val)
        self.tracker.export()
        if self.database is not None:
            self.database.register_checkpoint(CheckpointRecord(
                path=str(path), config_hash=metadata.config_hash, objective=metadata.objective,
                dataset=metadata.dataset, step=metadata.step, val_loss=val,
            ))
        logger.info(f"Checkpoint {path.name}: validation loss {val:.6f}")
        return path


def train_objective(config: RunConfig, model: MaskedAutoencoderPurifier, classifier: ClassifierHandle,
                    handle: DatasetHandle, out_dir: Union[str, Path],
                    database: Optional[Database] = None,
                    device: Optional[torch.device] = None, resume: bool = False) -> Path:
    """Train one roster objective end to end and return its checkpoint path"""
    trainer = Trainer(config, model, classifier, handle, out_dir, database, device)
    trainer.pretrain(resume=resume)
    return trainer.save(f"{config.train.objective.value}.safetensors")
