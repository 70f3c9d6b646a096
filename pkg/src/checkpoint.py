"""Checkpoint persistence: safetensors payload plus a string metadata record"""
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from src.config_manager import PurifierConfig
from src.error_handler import CheckpointMismatchError, ErrorHandler
from src.io_utils import temp_path_for
from src.purifier import MaskedAutoencoderPurifier, attach_lora, named_base_tensors

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "maep-purifier/1"


@dataclass
class CheckpointMetadata:
    """Provenance stored alongside the tensors"""
    config: PurifierConfig
    mask_ratio: float
    dataset: str
    seed: int
    step: int
    objective: str = "maep"
    loss_kind: str = "l1"
    lora_rank: Optional[int] = None
    lora_alpha: Optional[float] = None
    val_loss: Optional[float] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.fingerprint()

    def to_strings(self) -> Dict[str, str]:
        """safetensors metadata must be str -> str"""
        return {
            "format": CHECKPOINT_FORMAT,
            "config": json.dumps(self.config.model_dump(mode="json"), sort_keys=True),
            "config_hash": self.config_hash,
            "mask_ratio": repr(float(self.mask_ratio)),
            "dataset": self.dataset,
            "seed": str(self.seed),
            "step": str(self.step),
            "objective": self.objective,
            "loss_kind": self.loss_kind,
            "lora_rank": "" if self.lora_rank is None else str(self.lora_rank),
            "lora_alpha": "" if self.lora_alpha is None else repr(float(self.lora_alpha)),
            "val_loss": "" if self.val_loss is None else repr(float(self.val_loss)),
            "extra": json.dumps(self.extra, sort_keys=True, default=str),
        }

    @classmethod
    def from_strings(cls, data: Dict[str, str]) -> "CheckpointMetadata":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointMismatchError(f"Unknown checkpoint format {data.get('format')!r}")
        config = PurifierConfig.model_validate(json.loads(data["config"]))
        if config.fingerprint() != data.get("config_hash"):
            raise CheckpointMismatchError("Checkpoint metadata is inconsistent with its config hash")
        return cls(
            config=config,
            mask_ratio=float(data["mask_ratio"]),
            dataset=data["dataset"],
            seed=int(data["seed"]),
            step=int(data["step"]),
            objective=data.get("objective", "maep"),
            loss_kind=data.get("loss_kind", "l1"),
            lora_rank=int(data["lora_rank"]) if data.get("lora_rank") else None,
            lora_alpha=float(data["lora_alpha"]) if data.get("lora_alpha") else None,
            val_loss=float(data["val_loss"]) if data.get("val_loss") else None,
            extra=json.loads(data.get("extra") or "{}"),
        )


def save_checkpoint(model: MaskedAutoencoderPurifier, path: Union[str, Path],
                    metadata: CheckpointMetadata) -> Path:
    """Write every tensor of the model (adapters included) atomically"""
    path = Path(path)
    tensors = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    tmp = temp_path_for(path)

    def write() -> None:
        try:
            save_file(tensors, str(tmp), metadata=metadata.to_strings())
            os.replace(tmp, path)
        except BaseException:
            tmp.unlink(missing_ok=True)
            raise

    ErrorHandler("checkpoint").retry_with_backoff(write, max_retries=3, initial_backoff=0.5)
    logger.info(f"Saved checkpoint {path} (step {metadata.step}, {len(tensors)} tensors)")
    return path


def read_metadata(path: Union[str, Path]) -> CheckpointMetadata:
    with safe_open(str(path), framework="pt") as f:
        return CheckpointMetadata.from_strings(f.metadata() or {})


def load_checkpoint(path: Union[str, Path], expected_config: Optional[PurifierConfig] = None,
                    device: Optional[torch.device] = None
                    ) -> Tuple[MaskedAutoencoderPurifier, CheckpointMetadata]:
    """Rebuild the purifier recorded in a checkpoint, adapters re-attached when present"""
    path = Path(path)
    with safe_open(str(path), framework="pt") as f:
        metadata = CheckpointMetadata.from_strings(f.metadata() or {})
        tensors = {k: f.get_tensor(k) for k in f.keys()}

    if expected_config is not None and expected_config.fingerprint() != metadata.config_hash:
        raise CheckpointMismatchError(
            f"Checkpoint {path} was written for config {metadata.config_hash}, "
            f"expected {expected_config.fingerprint()}"
        )

    model = MaskedAutoencoderPurifier(metadata.config)
    dtype = next(iter(tensors.values())).dtype if tensors else torch.float32
    model = model.to(dtype=dtype)
    if metadata.lora_rank is not None:
        attach_lora(model, rank=metadata.lora_rank, alpha=metadata.lora_alpha or float(metadata.lora_rank))

    missing, unexpected = model.load_state_dict(tensors, strict=False)
    if missing or unexpected:
        raise CheckpointMismatchError(
            f"Checkpoint {path} does not match the model: missing={missing}, unexpected={unexpected}"
        )
    if device is not None:
        model = model.to(device)
    model.eval()
    logger.info(f"Loaded checkpoint {path} (objective {metadata.objective}, step {metadata.step})")
    return model, metadata


def tensor_hash(tensors: Dict[str, torch.Tensor]) -> str:
    """sha256 over names and raw bytes, order independent"""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous().reshape(-1)
        digest.update(name.encode("utf-8"))
        digest.update(str(t.dtype).encode("utf-8"))
        digest.update(t.view(torch.uint8).numpy().tobytes() if t.numel() else b"")
    return digest.hexdigest()


def base_weight_hash(model: torch.nn.Module) -> str:
    """Hash of every non-adapter tensor; unchanged by LoRA finetuning"""
    return tensor_hash(named_base_tensors(model))


def encoder_weight_hash(model: MaskedAutoencoderPurifier) -> str:
    """Hash of the encoder tensors; unchanged by decoder-only finetuning"""
    return tensor_hash({k: v for k, v in named_base_tensors(model).items()
                        if not k.startswith(("decoder_", "mask_token"))})
