"""Clean/robust accuracy, purification quality, the direction check and transfer evaluation"""
import logging
import math
from typing import Iterator, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from tqdm import tqdm

from src.attacks import attack_through_purifier, pgd
from src.config_manager import AttackConfig, EvalConfig
from src.data_pipeline import DatasetHandle
from src.error_handler import (
    ClassCountMismatchError, ResolutionUnsupportedError, ShapeMismatchError, TilingError,
    WindowTooLargeError
)
from src.models import AttackDirection, ConjectureReport, EvalReport, ResolutionPolicy, SeedResult, TransferSpec

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0


def psnr(a: torch.Tensor, b: torch.Tensor, cap: float = PSNR_CAP_DB) -> float:
    """Per-image PSNR in dB (peak 1.0) averaged over the batch; zero MSE maps to cap"""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"PSNR needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    diff = a.detach().double() - b.detach().double()
    mse = diff.pow(2).flatten(1).mean(dim=1)
    values = [cap if m == 0 else min(cap, -10.0 * math.log10(m)) for m in mse.tolist()]
    return sum(values) / len(values)


def _gaussian_window(window: int, sigma: float, channels: int, like: torch.Tensor) -> torch.Tensor:
    coords = torch.arange(window, dtype=like.dtype, device=like.device) - (window - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    kernel = torch.outer(g, g)
    return kernel.expand(channels, 1, window, window).contiguous()


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, k1: float = 0.01, k2: float = 0.03,
         sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean structural similarity with a Gaussian window, valid positions only"""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"SSIM needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    h, w = a.shape[-2:]
    if window % 2 == 0 or window > min(h, w):
        raise WindowTooLargeError(f"SSIM window {window} must be odd and <= {min(h, w)}")

    a, b = a.detach().double(), b.detach().double()
    channels = a.shape[1]
    kernel = _gaussian_window(window, sigma, channels, a)

    def filt(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, kernel, groups=channels)

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu1, mu2 = filt(a), filt(b)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    sigma1_sq = filt(a * a) - mu1_sq
    sigma2_sq = filt(b * b) - mu2_sq
    sigma12 = filt(a * b) - mu12

    ssim_map = ((2 * mu12 + c1) * (2 * sigma12 + c2)) / ((mu1_sq + mu2_sq + c1) * (sigma1_sq + sigma2_sq + c2))
    return float(ssim_map.mean())


class TiledPurifier(nn.Module):
    """Purify a large image as independent non-overlapping windows of the training resolution"""

    def __init__(self, purifier: nn.Module, window_hw: Tuple[int, int]):
        super().__init__()
        self.purifier = purifier
        self.window_hw = tuple(window_hw)
        self.patch_size = purifier.patch_size

    def tile(self, x: torch.Tensor) -> torch.Tensor:
        wh, ww = self.window_hw
        h, w = x.shape[-2:]
        if h % wh or w % ww:
            raise TilingError(f"Resolution {h}x{w} is not divisible by the {wh}x{ww} tiling window")
        return rearrange(x, "b c (nh h) (nw w) -> (b nh nw) c h w", h=wh, w=ww)

    def untile(self, tiles: torch.Tensor, batch: int, hw: Tuple[int, int]) -> torch.Tensor:
        wh, ww = self.window_hw
        return rearrange(tiles, "(b nh nw) c h w -> b c (nh h) (nw w)",
                         b=batch, nh=hw[0] // wh, nw=hw[1] // ww)

    def purify(self, x: torch.Tensor) -> torch.Tensor:
        return self.untile(self.purifier.purify(self.tile(x)), x.shape[0], tuple(x.shape[-2:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.purify(x)


def _batches(handle: DatasetHandle, split: str, batch_size: int, max_batches: Optional[int],
             device: torch.device) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    for index, (x, y) in enumerate(handle.loader(split, batch_size=batch_size, shuffle=False)):
        if max_batches is not None and index >= max_batches:
            break
        yield x.to(device), y.to(device)


def _correct(c: nn.Module, x: torch.Tensor, y: torch.Tensor) -> int:
    with torch.no_grad():
        return int((c(x).argmax(dim=1) == y).sum())


def _check_classes(classifier: nn.Module, handle: DatasetHandle) -> None:
    n = getattr(classifier, "num_classes", None)
    if n is not None and n != handle.num_classes:
        raise ClassCountMismatchError(
            f"Classifier predicts {n} classes but {handle.tag} has {handle.num_classes}"
        )


def eval_defense(classifier: nn.Module, purifier: Optional[nn.Module], handle: DatasetHandle,
                 attack_cfg: AttackConfig, eval_cfg: Optional[EvalConfig] = None,
                 defense: Optional[str] = None, device: Optional[torch.device] = None,
                 progress: bool = False) -> EvalReport:
    """Multi-seed clean/robust accuracy of c (or c o P) plus PSNR/SSIM of the purifier"""
    eval_cfg = eval_cfg or EvalConfig(n_runs=1, attack=attack_cfg)
    device = device or torch.device("cpu")
    _check_classes(classifier, handle)
    defense = defense or ("none" if purifier is None else type(purifier).__name__)
    if purifier is not None:
        purifier.eval()

    if len(eval_cfg.seed_list()) > 1 and not attack_cfg.random_start:
        logger.warning(f"{defense}: attack has no random start, so all {eval_cfg.n_runs} seeds will agree")

    per_seed: List[SeedResult] = []
    quality = {"psnr_clean": [], "psnr_adv": [], "ssim_clean": [], "ssim_adv": []}
    for seed in eval_cfg.seed_list():
        torch.manual_seed(seed)
        clean_hits = robust_hits = total = 0
        batches = _batches(handle, eval_cfg.split, eval_cfg.batch_size, eval_cfg.max_batches, device)
        bar = tqdm(batches, desc=f"eval {defense} seed {seed}", disable=not progress, leave=False)
        for index, (x, y) in enumerate(bar):
            batch_cfg = attack_cfg.model_copy(update={"seed": seed * 1_000_003 + index})
            if purifier is None:
                x_a = pgd(classifier, x, y, batch_cfg)
                clean_hits += _correct(classifier, x, y)
                robust_hits += _correct(classifier, x_a, y)
            else:
                if eval_cfg.through_purifier:
                    x_a = attack_through_purifier(classifier, purifier, x, y, batch_cfg)
                else:
                    x_a = pgd(classifier, x, y, batch_cfg)
                with torch.no_grad():
                    px, pxa = purifier.purify(x), purifier.purify(x_a)
                clean_hits += _correct(classifier, px, y)
                robust_hits += _correct(classifier, pxa, y)
                if seed == eval_cfg.seed_list()[0]:
                    window = min(eval_cfg.ssim_window, *x.shape[-2:])
                    if window % 2 == 0:
                        window -= 1
                    quality["psnr_clean"].append((psnr(px, x, eval_cfg.psnr_cap), x.shape[0]))
                    quality["psnr_adv"].append((psnr(pxa, x_a, eval_cfg.psnr_cap), x.shape[0]))
                    quality["ssim_clean"].append((ssim(px, x, window), x.shape[0]))
                    quality["ssim_adv"].append((ssim(pxa, x_a, window), x.shape[0]))
            total += x.shape[0]
        if total == 0:
            raise ValueError(f"Split '{eval_cfg.split}' of {handle.tag} is empty")
        result = SeedResult(seed=seed, clean_acc=100.0 * clean_hits / total,
                            robust_acc=100.0 * robust_hits / total)
        logger.info(f"{defense} seed {seed}: clean={result.clean_acc:.2f}% robust={result.robust_acc:.2f}%")
        per_seed.append(result)

    summary = {
        key: (sum(v * n for v, n in values) / sum(n for _, n in values)) if values else 0.0
        for key, values in quality.items()
    }
    report = EvalReport.from_seeds(defense, handle.tag, per_seed, attack_cfg.fingerprint(),
                                   attack_label=attack_cfg.label(), **summary)
    report.validate()
    return report


def verify_purification_direction(classifier: nn.Module, purifier: nn.Module, handle: DatasetHandle,
                                  attack_cfg: AttackConfig, split: str = "test", batch_size: int = 128,
                                  max_batches: Optional[int] = None,
                                  device: Optional[torch.device] = None) -> ConjectureReport:
    """Accuracies of c(P(x_a)), c(P(x)) and c(x - delta_a), with x - delta_a from descending PGD"""
    device = device or torch.device("cpu")
    _check_classes(classifier, handle)
    descend = attack_cfg.model_copy(update={"direction": AttackDirection.DESCEND})
    ascend = attack_cfg.model_copy(update={"direction": AttackDirection.ASCEND})

    hits_pxa = hits_px = hits_anti = total = 0
    for x, y in _batches(handle, split, batch_size, max_batches, device):
        x_a = pgd(classifier, x, y, ascend)
        x_anti = pgd(classifier, x, y, descend)
        with torch.no_grad():
            hits_pxa += _correct(classifier, purifier.purify(x_a), y)
            hits_px += _correct(classifier, purifier.purify(x), y)
        hits_anti += _correct(classifier, x_anti, y)
        total += x.shape[0]
    if total == 0:
        raise ValueError(f"Split '{split}' of {handle.tag} is empty")

    report = ConjectureReport(
        acc_c_Pxa=100.0 * hits_pxa / total,
        acc_c_Px=100.0 * hits_px / total,
        acc_c_x_minus_delta=100.0 * hits_anti / total,
        n_samples=total,
        attack_fingerprint=attack_cfg.fingerprint(),
    )
    logger.info(f"Direction check: c(P(x_a))={report.acc_c_Pxa:.2f} c(P(x))={report.acc_c_Px:.2f} "
                f"c(x-delta)={report.acc_c_x_minus_delta:.2f} gap={report.gap:.2f}")
    return report


def transfer_purifier(purifier: nn.Module, spec: TransferSpec, train_hw: Tuple[int, int],
                      test_hw: Tuple[int, int]) -> nn.Module:
    """Wrap the purifier according to the resolution policy"""
    if spec.policy == ResolutionPolicy.TILE:
        return TiledPurifier(purifier, train_hw)
    if spec.policy == ResolutionPolicy.NATIVE and tuple(test_hw) != tuple(train_hw):
        raise ResolutionUnsupportedError(
            f"NATIVE policy cannot run a {train_hw} purifier on {test_hw} images"
        )
    # POS_INTERP: sin-cos tables are regenerated for the test grid on every forward
    return purifier


def transfer_eval(purifier: nn.Module, spec: TransferSpec, classifier: nn.Module,
                  handle: DatasetHandle, attack_cfg: AttackConfig, train_hw: Tuple[int, int],
                  eval_cfg: Optional[EvalConfig] = None,
                  device: Optional[torch.device] = None) -> EvalReport:
    """Evaluate a purifier trained on spec.train_tag against spec.test_tag data"""
    wrapped = transfer_purifier(purifier, spec, train_hw, handle.shape[1:])
    defense = f"{type(purifier).__name__}[{spec.train_tag}->{spec.test_tag},{spec.policy.value}]"
    logger.info(f"Transfer evaluation {defense}")
    return eval_defense(classifier, wrapped, handle, attack_cfg, eval_cfg, defense=defense, device=device)
