"""Safety Gate component for validating finetuning freeze contracts"""
import logging
from typing import List, Tuple

import torch.nn as nn

from src.error_handler import FreezeViolationError
from src.models import FinetuneMode
from src.purifier import DECODER_PREFIXES, count_trainable, has_lora

logger = logging.getLogger(__name__)


class SafetyGate:
    """Validate that a finetuning run can only touch the tensors it is allowed to"""

    def __init__(self, mode: FinetuneMode = FinetuneMode.LORA):
        """Initialize safety gate"""
        self.mode = mode

    def validate_finetune(self, model: nn.Module) -> Tuple[bool, str]:
        """Run all freeze checks"""
        if self.mode == FinetuneMode.LORA:
            checks = [
                self._check_adapters_attached(model),
                self._check_base_frozen(model),
                self._check_has_trainable(model),
            ]
        else:
            checks = [
                self._check_encoder_frozen(model),
                self._check_has_trainable(model),
            ]

        for passed, reason in checks:
            if not passed:
                logger.warning(f"Safety gate BLOCKED: {reason}")
                return False, reason

        logger.info(f"Safety gate PASSED for {self.mode.value} finetune "
                    f"({count_trainable(model)} trainable parameters)")
        return True, "All freeze checks passed"

    def enforce(self, model: nn.Module) -> None:
        """Raise instead of returning a verdict"""
        passed, reason = self.validate_finetune(model)
        if not passed:
            raise FreezeViolationError(reason)

    @staticmethod
    def _trainable_names(model: nn.Module) -> List[str]:
        return [name for name, p in model.named_parameters() if p.requires_grad]

    def _check_adapters_attached(self, model: nn.Module) -> Tuple[bool, str]:
        if not has_lora(model):
            return False, "No LoRA adapters attached"
        return True, "LoRA adapters attached"

    def _check_base_frozen(self, model: nn.Module) -> Tuple[bool, str]:
        leaking = [n for n in self._trainable_names(model) if "lora_" not in n]
        if leaking:
            return False, f"Base tensors marked trainable: {', '.join(leaking[:5])}"
        return True, "Base tensors frozen"

    def _check_encoder_frozen(self, model: nn.Module) -> Tuple[bool, str]:
        leaking = [n for n in self._trainable_names(model) if not n.startswith(DECODER_PREFIXES)]
        if leaking:
            return False, f"Encoder tensors marked trainable: {', '.join(leaking[:5])}"
        return True, "Encoder frozen"

    def _check_has_trainable(self, model: nn.Module) -> Tuple[bool, str]:
        if not self._trainable_names(model):
            return False, "Nothing to finetune: no trainable tensors"
        return True, "Trainable tensors present"

    @staticmethod
    def verify_unchanged(label: str, before: str, after: str) -> None:
        """Compare tensor hashes taken before and after a finetuning run"""
        if before != after:
            raise FreezeViolationError(f"{label} changed during finetuning ({before[:12]} -> {after[:12]})")
        logger.debug(f"{label} unchanged ({before[:12]})")
