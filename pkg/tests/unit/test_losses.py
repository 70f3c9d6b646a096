"""Unit tests for the purification objectives"""
import logging

import pytest
import torch

from src.error_handler import EmptyRegionError, InvalidLambdaError, ShapeMismatchError
from src.losses import (
    disco_purify_loss, distance, mae_recon_loss, maep_total_loss, masked_purify_loss,
    mlm_finetune_loss, objective_loss, recon_baseline_loss, trades_latent_loss, trades_pixel_loss
)
from src.models import DistanceKind, Objective
from src.patch_ops import full_mask, mask_from_bitmap, pixel_mask, sample_mask

DELTA = 8 / 255


@pytest.fixture
def shifted(images64):
    """(x, x + DELTA) with x kept below 1 - DELTA"""
    x = images64 * (1 - DELTA)
    return x, x + DELTA


class TestDistance:
    """Test D"""

    def test_identical_inputs(self, images64):
        assert distance(images64, images64, DistanceKind.L1_MEAN).item() == 0.0

    def test_l1_closed_form(self):
        assert distance(torch.zeros(2, 3, 4, 4), torch.full((2, 3, 4, 4), 0.5)).item() == 0.5

    def test_mse_closed_form(self):
        value = distance(torch.zeros(2, 3, 4, 4), torch.full((2, 3, 4, 4), 0.5), DistanceKind.MSE)
        assert value.item() == 0.25

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            distance(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 2))


class TestMaskedLosses:
    """Test the reconstruction and masked purification terms"""

    def test_recon_loss_is_zero_without_masking(self, model64, images64, caplog):
        with caplog.at_level(logging.WARNING):
            loss = mae_recon_loss(model64, images64, images64, full_mask(2, 16))
        assert loss.item() == 0.0
        assert "no masked patches" in caplog.text

    def test_recon_loss_matches_slice_oracle(self, model64):
        zeros = torch.zeros(2, 3, 8, 8, dtype=torch.float64)
        m = sample_mask(2, 16, 0.5, seed=4)
        pred = model64.reconstruct(zeros, m)
        masked = 1 - pixel_mask(m, 4, 4, 2, 3, dtype=torch.float64)
        oracle = (pred.abs() * masked).sum() / masked.sum()
        loss = mae_recon_loss(model64, zeros, zeros, m)
        assert loss.item() == pytest.approx(oracle.item(), abs=1e-12)

    def test_purify_loss_zero_for_identity(self, identity_purifier, images64):
        m = sample_mask(2, 16, 0.5, seed=1)
        assert masked_purify_loss(identity_purifier, images64, images64, m).item() == 0.0

    def test_purify_loss_matches_slice_oracle(self, model64, images64):
        x_a = (images64 + 0.02).clamp(0, 1)
        m = sample_mask(2, 16, 0.75, seed=2)
        pred = model64.reconstruct(x_a, m)
        visible = pixel_mask(m, 4, 4, 2, 3, dtype=torch.float64)
        oracle = ((pred - images64).abs() * visible).sum() / visible.sum()
        loss = masked_purify_loss(model64, x_a, images64, m)
        assert loss.item() == pytest.approx(oracle.item(), abs=1e-12)

    def test_purify_loss_rejects_all_masked(self, model64, images64):
        m = mask_from_bitmap(torch.zeros(2, 16, dtype=torch.long))
        with pytest.raises(EmptyRegionError):
            masked_purify_loss(model64, images64, images64, m)

    def test_purify_loss_at_ratio_zero_is_disco(self, model64, images64):
        x_a = (images64 + 0.03).clamp(0, 1)
        masked = masked_purify_loss(model64, x_a, images64, full_mask(2, 16))
        assert masked.item() == pytest.approx(disco_purify_loss(model64, x_a, images64).item(), abs=1e-12)


class TestMaepTotal:
    """Test the combined MAEP objective"""

    def test_l1_total_is_full_image_l1(self, model64, images64):
        x_a = (images64 + 0.05).clamp(0, 1)
        m = sample_mask(2, 16, 0.5, seed=7)
        breakdown = maep_total_loss(model64, x_a, images64, m)
        full = (model64.reconstruct(x_a, m) - images64).abs().mean()
        assert breakdown.total.item() == pytest.approx(full.item(), abs=1e-12)

    def test_terms_weighted_by_area(self, model64, images64):
        x_a = (images64 + 0.05).clamp(0, 1)
        m = sample_mask(2, 16, 0.75, seed=7)
        b = maep_total_loss(model64, x_a, images64, m)
        assert b.visible_fraction == pytest.approx(0.25)
        assert b.masked_fraction == pytest.approx(0.75)
        purify = masked_purify_loss(model64, x_a, images64, m)
        recon = mae_recon_loss(model64, x_a, images64, m)
        assert b.purify_term.item() == pytest.approx(0.25 * purify.item(), abs=1e-12)
        assert b.recon_term.item() == pytest.approx(0.75 * recon.item(), abs=1e-12)

    def test_mse_total_is_sum_of_parts(self, model64, images64):
        m = sample_mask(2, 16, 0.5, seed=7)
        b = maep_total_loss(model64, images64, images64, m, DistanceKind.MSE)
        assert b.total.item() == pytest.approx((b.purify_term + b.recon_term).item(), abs=1e-15)

    def test_ratio_zero_has_no_recon_term(self, model64, images64):
        b = maep_total_loss(model64, images64, images64, full_mask(2, 16))
        assert b.recon_term.item() == 0.0
        assert b.total.item() == b.purify_term.item()

    def test_ratio_zero_equals_disco(self, model64, images64):
        x_a = (images64 + 0.04).clamp(0, 1)
        b = maep_total_loss(model64, x_a, images64, full_mask(2, 16))
        assert b.total.item() == pytest.approx(disco_purify_loss(model64, x_a, images64).item(), abs=1e-12)

    def test_positive_on_random_init(self, model64, images64):
        b = maep_total_loss(model64, images64, images64, sample_mask(2, 16, 0.5, seed=0))
        assert b.total.item() > 0
        assert b.is_finite()


class TestUnmaskedObjectives:
    """Test the r = 0 objectives with the identity purifier closed forms"""

    def test_disco_identity(self, identity_purifier, images64, shifted):
        x, x_a = shifted
        assert disco_purify_loss(identity_purifier, images64, images64).item() == 0.0
        assert disco_purify_loss(identity_purifier, x_a, x).item() == pytest.approx(DELTA, abs=1e-12)

    def test_mlm_finetune_l1_is_disco(self, model64, images64):
        x_a = (images64 + 0.04).clamp(0, 1)
        assert torch.equal(mlm_finetune_loss(model64, x_a, images64), disco_purify_loss(model64, x_a, images64))

    def test_mlm_finetune_mse_identity(self, identity_purifier, shifted):
        x, x_a = shifted
        value = mlm_finetune_loss(identity_purifier, x_a, x, DistanceKind.MSE)
        assert value.item() == pytest.approx(DELTA ** 2, abs=1e-12)

    def test_recon_baseline_identity(self, identity_purifier, images64, shifted):
        x, x_a = shifted
        assert recon_baseline_loss(identity_purifier, images64, images64).item() == 0.0
        assert recon_baseline_loss(identity_purifier, x_a, x).item() == pytest.approx(DELTA, abs=1e-12)

    def test_recon_baseline_is_two_disco_terms(self, model64, images64):
        x_a = (images64 + 0.04).clamp(0, 1)
        expected = disco_purify_loss(model64, x_a, images64) + disco_purify_loss(model64, images64, images64)
        assert recon_baseline_loss(model64, x_a, images64).item() == pytest.approx(expected.item(), abs=1e-12)

    def test_trades_pixel_identity(self, identity_purifier, shifted):
        x, x_a = shifted
        assert trades_pixel_loss(identity_purifier, x_a, x, lam=1.0).item() == pytest.approx(DELTA, abs=1e-12)

    def test_trades_pixel_without_attack(self, model64, images64):
        value = trades_pixel_loss(model64, images64, images64, lam=0.5)
        assert value.item() == pytest.approx(mlm_finetune_loss(model64, images64, images64).item(), abs=1e-12)

    def test_trades_pixel_large_lambda_limit(self, model64, images64):
        x_a = (images64 + 0.04).clamp(0, 1)
        value = trades_pixel_loss(model64, x_a, images64, lam=1e12)
        assert value.item() == pytest.approx(mlm_finetune_loss(model64, images64, images64).item(), abs=1e-9)

    @pytest.mark.parametrize("lam", [0.0, -1.0])
    def test_trades_reject_non_positive_lambda(self, model64, images64, lam):
        with pytest.raises(InvalidLambdaError):
            trades_pixel_loss(model64, images64, images64, lam=lam)
        with pytest.raises(InvalidLambdaError):
            trades_latent_loss(model64, images64, images64, lam=lam)

    def test_trades_latent_without_attack(self, model64, images64):
        value = trades_latent_loss(model64, images64, images64)
        assert value.item() == pytest.approx(mlm_finetune_loss(model64, images64, images64).item(), abs=1e-12)

    def test_trades_latent_identity(self, identity_purifier, shifted):
        # identity latents are the raw patch tokens, so the consistency term is DELTA
        x, x_a = shifted
        value = trades_latent_loss(identity_purifier, x_a, x, lam=2.0)
        assert value.item() == pytest.approx(DELTA / 2, abs=1e-12)

    def test_trades_latent_is_deterministic(self, model64, images64):
        x_a = (images64 + 0.04).clamp(0, 1)
        assert torch.equal(trades_latent_loss(model64, x_a, images64), trades_latent_loss(model64, x_a, images64))


class TestObjectiveDispatch:
    """Test objective_loss"""

    @pytest.mark.parametrize("objective", list(Objective))
    def test_every_objective_is_finite(self, model64, images64, objective):
        ratio = 0.5 if objective.uses_mask else 0.0
        m = sample_mask(2, 16, ratio, seed=0)
        b = objective_loss(objective, model64, (images64 + 0.02).clamp(0, 1), images64, m)
        assert b.is_finite()
        assert b.total.item() > 0

    def test_mlm_pretrain_reports_reconstruction(self, model64, images64):
        m = sample_mask(2, 16, 0.5, seed=0)
        b = objective_loss(Objective.MLM_PRETRAIN, model64, images64, images64, m)
        assert b.purify_term.item() == 0.0
        assert b.recon_term.item() == b.total.item()
        assert b.masked_fraction == pytest.approx(0.5)

    def test_unmasked_objectives_report_purification(self, model64, images64):
        b = objective_loss(Objective.DISCO_STYLE, model64, images64, images64, full_mask(2, 16))
        assert b.recon_term.item() == 0.0
        assert b.purify_term.item() == b.total.item()
