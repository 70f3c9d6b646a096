"""Purification objectives: MAEP, the masked-LM stages and the baseline roster"""
import logging

import torch

from src.error_handler import EmptyRegionError, InvalidLambdaError, ShapeMismatchError
from src.models import DistanceKind, LossBreakdown, Objective
from src.patch_ops import MaskSpec, pixel_mask
from src.purifier import PurifierBase

logger = logging.getLogger(__name__)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def pointwise_distance(a: torch.Tensor, b: torch.Tensor, kind: DistanceKind) -> torch.Tensor:
    """Elementwise |a - b| or (a - b)^2"""
    _check_same_shape(a, b)
    diff = a - b
    if kind == DistanceKind.L1_MEAN:
        return diff.abs()
    if kind == DistanceKind.MSE:
        return diff * diff
    raise ValueError(f"Unknown distance kind {kind}")


def distance(a: torch.Tensor, b: torch.Tensor,
             kind: DistanceKind = DistanceKind.L1_MEAN) -> torch.Tensor:
    """Mean elementwise distance between two same-shaped tensors"""
    return pointwise_distance(a, b, kind).mean()


def _region_mask(x: torch.Tensor, m: MaskSpec, ps: int) -> torch.Tensor:
    _, c, h, w = x.shape
    return pixel_mask(m, h // ps, w // ps, ps, c, dtype=x.dtype).to(x.device)


def _region_mean(d: torch.Tensor, region: torch.Tensor) -> torch.Tensor:
    return (d * region).sum() / region.sum()


def mae_recon_loss(model: PurifierBase, x_in: torch.Tensor, x_target: torch.Tensor,
                   m: MaskSpec, kind: DistanceKind = DistanceKind.L1_MEAN) -> torch.Tensor:
    """D over the masked region of g(f(M (.) x_in)) against x_target, averaged over masked pixels.

    An empty masked region (r = 0) yields 0.
    """
    _check_same_shape(x_in, x_target)
    pred = model.reconstruct(x_in, m)
    region = 1 - _region_mask(x_target, m, model.patch_size)
    if region.sum() == 0:
        logger.warning("Reconstruction loss requested with no masked patches; returning 0")
        return pred.sum() * 0
    return _region_mean(pointwise_distance(pred, x_target, kind), region)


def masked_purify_loss(model: PurifierBase, x_a: torch.Tensor, x: torch.Tensor,
                       m: MaskSpec, kind: DistanceKind = DistanceKind.L1_MEAN) -> torch.Tensor:
    """D over the visible region of g(f(M (.) x_a)) against clean x, averaged over visible pixels"""
    _check_same_shape(x_a, x)
    region = _region_mask(x, m, model.patch_size)
    if region.sum() == 0:
        raise EmptyRegionError("Every patch is masked; there is no visible region to purify")
    pred = model.reconstruct(x_a, m)
    return _region_mean(pointwise_distance(pred, x, kind), region)


def maep_total_loss(model: PurifierBase, x_a: torch.Tensor, x: torch.Tensor,
                    m: MaskSpec, kind: DistanceKind = DistanceKind.L1_MEAN) -> LossBreakdown:
    """Visible-region purification plus masked-region reconstruction from one forward pass.

    Each term is its region mean scaled by the region's share of pixels, so for
    L1 the total equals the mean |x - g(f(M (.) x_a))| over the whole image.
    """
    _check_same_shape(x_a, x)
    region = _region_mask(x, m, model.patch_size)
    n_total = region.numel()
    n_visible = region.sum()
    if n_visible == 0:
        raise EmptyRegionError("Every patch is masked; there is no visible region to purify")

    pred = model.reconstruct(x_a, m)
    d = pointwise_distance(pred, x, kind)
    purify_term = (d * region).sum() / n_total
    recon_term = (d * (1 - region)).sum() / n_total
    visible_fraction = float(n_visible) / n_total
    return LossBreakdown(
        total=purify_term + recon_term,
        purify_term=purify_term,
        recon_term=recon_term,
        visible_fraction=visible_fraction,
        masked_fraction=1.0 - visible_fraction,
    )


def disco_purify_loss(model: PurifierBase, x_a: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Mean L1 between x and the unmasked reconstruction of x_a"""
    _check_same_shape(x_a, x)
    return distance(model.forward_full(x_a), x, DistanceKind.L1_MEAN)


def mlm_finetune_loss(model: PurifierBase, x_a: torch.Tensor, x: torch.Tensor,
                      kind: DistanceKind = DistanceKind.L1_MEAN) -> torch.Tensor:
    """D(P(x_a), x) at r = 0"""
    _check_same_shape(x_a, x)
    return distance(model.forward_full(x_a), x, kind)


def recon_baseline_loss(model: PurifierBase, x_a: torch.Tensor, x: torch.Tensor,
                        kind: DistanceKind = DistanceKind.L1_MEAN) -> torch.Tensor:
    """D(P(x_a), x) + D(P(x), x)"""
    _check_same_shape(x_a, x)
    return distance(model.forward_full(x_a), x, kind) + distance(model.forward_full(x), x, kind)


def _check_lambda(lam: float) -> None:
    if not lam > 0:
        raise InvalidLambdaError(f"TRADES weight must be > 0, got {lam}")


def trades_pixel_loss(model: PurifierBase, x_a: torch.Tensor, x: torch.Tensor,
                      lam: float = 1.0, kind: DistanceKind = DistanceKind.L1_MEAN) -> torch.Tensor:
    """D(P(x), x) + D(P(x), P(x_a)) / lambda"""
    _check_lambda(lam)
    _check_same_shape(x_a, x)
    px = model.forward_full(x)
    return distance(px, x, kind) + distance(px, model.forward_full(x_a), kind) / lam


def trades_latent_loss(model: PurifierBase, x_a: torch.Tensor, x: torch.Tensor,
                       lam: float = 1.0, kind: DistanceKind = DistanceKind.L1_MEAN) -> torch.Tensor:
    """D(P(x), x) + D(f(x), f(x_a)) / lambda with f the r = 0 encoder"""
    _check_lambda(lam)
    _check_same_shape(x_a, x)
    consistency = distance(model.encode_full(x), model.encode_full(x_a), kind)
    return distance(model.forward_full(x), x, kind) + consistency / lam


def objective_loss(objective: Objective, model: PurifierBase, x_a: torch.Tensor, x: torch.Tensor,
                   m: MaskSpec, kind: DistanceKind = DistanceKind.L1_MEAN,
                   lam: float = 1.0) -> LossBreakdown:
    """Dispatch one roster objective; unmasked objectives report everything as purify_term"""
    if objective == Objective.MAEP:
        return maep_total_loss(model, x_a, x, m, kind)
    if objective == Objective.MLM_PRETRAIN:
        recon = mae_recon_loss(model, x_a, x, m, kind)
        return LossBreakdown(total=recon, purify_term=recon * 0, recon_term=recon,
                             visible_fraction=1.0 - m.effective_ratio,
                             masked_fraction=m.effective_ratio)

    if objective == Objective.DISCO_STYLE:
        value = disco_purify_loss(model, x_a, x)
    elif objective == Objective.MLM_FINETUNE:
        value = mlm_finetune_loss(model, x_a, x, kind)
    elif objective == Objective.RECON_BASELINE:
        value = recon_baseline_loss(model, x_a, x, kind)
    elif objective == Objective.TRADES_PIXEL:
        value = trades_pixel_loss(model, x_a, x, lam, kind)
    elif objective == Objective.TRADES_LATENT:
        value = trades_latent_loss(model, x_a, x, lam, kind)
    else:
        raise ValueError(f"Unknown objective {objective}")
    return LossBreakdown(total=value, purify_term=value, recon_term=value * 0,
                         visible_fraction=1.0, masked_fraction=0.0)
