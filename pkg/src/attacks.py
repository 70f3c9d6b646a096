"""White-box FGSM/PGD attacks against a frozen classifier, optionally through the purifier"""
import logging
from typing import Callable, Dict, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config_manager import AttackConfig
from src.error_handler import NonFiniteError, ShapeMismatchError, UnknownAttackError
from src.models import AttackDirection, AttackNorm
from src.purifier import PurifierBase

logger = logging.getLogger(__name__)

AttackFn = Callable[[nn.Module, torch.Tensor, torch.Tensor, AttackConfig], torch.Tensor]

_L2_FLOOR = 1e-12


class ClassifierHandle(nn.Module):
    """Frozen classifier over raw [0, 1] pixels; normalization happens inside"""

    def __init__(self, model: nn.Module, mean: Sequence[float], std: Sequence[float],
                 num_classes: int, classifier_id: str = "classifier"):
        """Initialize classifier handle"""
        super().__init__()
        self.model = model
        self.num_classes = num_classes
        self.classifier_id = classifier_id
        self.register_buffer("mean", torch.tensor(list(mean)).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(list(std)).view(1, -1, 1, 1))
        self.freeze()

    def freeze(self) -> "ClassifierHandle":
        for param in self.model.parameters():
            param.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True) -> "ClassifierHandle":
        # stays in eval mode; batch-norm statistics must not drift under attack
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = self.mean.to(dtype=x.dtype)
        std = self.std.to(dtype=x.dtype)
        return self.model((x - mean) / std)


class DefendedClassifier(nn.Module):
    """c o P, differentiable end to end"""

    def __init__(self, classifier: nn.Module, purifier: PurifierBase):
        super().__init__()
        self.classifier = classifier
        self.purifier = purifier

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.purifier.purify(x))


def _check_batch(x: torch.Tensor, y: torch.Tensor) -> None:
    if y.dim() != 1 or y.shape[0] != x.shape[0]:
        raise ShapeMismatchError(f"Labels {tuple(y.shape)} do not match batch {tuple(x.shape)}")


def _input_gradient(c: nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(c(x), y, reduction="sum")
    grad, = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise NonFiniteError("Non-finite input gradient during attack")
    return grad


def _steepest_direction(grad: torch.Tensor, norm: AttackNorm) -> torch.Tensor:
    if norm == AttackNorm.LINF:
        return grad.sign()
    flat = grad.flatten(1).norm(p=2, dim=1).clamp_min(_L2_FLOOR)
    return grad / flat.view(-1, *([1] * (grad.dim() - 1)))


def project_ball(delta: torch.Tensor, norm: AttackNorm, epsilon: float) -> torch.Tensor:
    """Project a perturbation onto the epsilon-ball of the given norm, per image"""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if norm == AttackNorm.LINF:
        return delta.clamp(-epsilon, epsilon)
    norms = delta.flatten(1).norm(p=2, dim=1).view(-1, *([1] * (delta.dim() - 1)))
    scaled = delta * (epsilon / norms.clamp_min(_L2_FLOOR))
    return torch.where(norms > epsilon, scaled, delta)


def step_update(c: nn.Module, x_adv: torch.Tensor, y: torch.Tensor, step_size: float,
                cfg: AttackConfig) -> torch.Tensor:
    """Pre-projection move of one step; DESCEND is the exact negation of ASCEND"""
    signed_size = step_size if cfg.direction == AttackDirection.ASCEND else -step_size
    return signed_size * _steepest_direction(_input_gradient(c, x_adv, y), cfg.norm)


def _step(c: nn.Module, x: torch.Tensor, x_adv: torch.Tensor, y: torch.Tensor,
          step_size: float, cfg: AttackConfig) -> torch.Tensor:
    moved = x_adv + step_update(c, x_adv, y, step_size, cfg)
    delta = project_ball(moved - x, cfg.norm, cfg.epsilon)
    return (x + delta).clamp(0.0, 1.0).detach()


def _random_start(x: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    generator = torch.Generator().manual_seed(int(cfg.seed))
    if cfg.norm == AttackNorm.LINF:
        delta = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * cfg.epsilon
    else:
        direction = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        direction = _steepest_direction(direction, AttackNorm.L2)
        radius = torch.rand(x.shape[0], generator=generator, dtype=x.dtype) ** (1.0 / x[0].numel())
        delta = direction * (radius * cfg.epsilon).view(-1, *([1] * (x.dim() - 1)))
    return (x + delta.to(x.device)).clamp(0.0, 1.0)


def fgsm(c: nn.Module, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    """Single steepest step of size epsilon; cfg.steps and cfg.step_size are ignored"""
    _check_batch(x, y)
    x = x.detach()
    return _step(c, x, x, y, cfg.epsilon, cfg)


def pgd(c: nn.Module, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    """Projected gradient ascent (or descent) inside the epsilon-ball around x, clamped to [0, 1]"""
    _check_batch(x, y)
    x = x.detach()
    x_adv = _random_start(x, cfg) if cfg.random_start else x.clone()
    for _ in range(cfg.steps):
        x_adv = _step(c, x, x_adv, y, cfg.step_size, cfg)
    return x_adv


def attack_through_purifier(c: nn.Module, purifier: PurifierBase, x: torch.Tensor,
                            y: torch.Tensor, cfg: AttackConfig,
                            attack: Optional[AttackFn] = None) -> torch.Tensor:
    """Attack the defended system c o P with gradients flowing through purify"""
    attack = attack or pgd
    return attack(DefendedClassifier(c, purifier), x, y, cfg)


_ATTACKS: Dict[str, AttackFn] = {"fgsm": fgsm, "pgd": pgd}


def register_attack(name: str, fn: AttackFn) -> None:
    """Make an attack with the pgd signature available by name (e.g. an external AutoAttack)"""
    if name in _ATTACKS and _ATTACKS[name] is not fn:
        logger.warning(f"Replacing registered attack '{name}'")
    _ATTACKS[name] = fn


def get_attack(name: str) -> AttackFn:
    try:
        return _ATTACKS[name]
    except KeyError:
        raise UnknownAttackError(f"Unknown attack '{name}'; registered: {sorted(_ATTACKS)}") from None


def available_attacks() -> Sequence[str]:
    return sorted(_ATTACKS)
