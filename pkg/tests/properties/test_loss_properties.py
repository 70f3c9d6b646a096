"""Property-based tests for the purification objectives"""
import torch
from hypothesis import given, settings, strategies as st

from src.losses import disco_purify_loss, maep_total_loss
from src.patch_ops import full_mask, sample_mask
from tests.conftest import tiny_model

SEEDS = st.integers(min_value=0, max_value=2 ** 31)
MODEL_SEEDS = st.integers(min_value=0, max_value=2 ** 16)
RATIOS = st.sampled_from([0.25, 0.5, 0.75])


def _pair(seed: int, dtype: torch.dtype = torch.float64):
    generator = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 8, 8, generator=generator, dtype=dtype)
    noise = torch.rand(2, 3, 8, 8, generator=generator, dtype=dtype) * 2 - 1
    return x, (x + 8 / 255 * noise).clamp(0, 1)


def _decomposition_gap(model_seed: int, seed: int, ratio: float, dtype: torch.dtype):
    model = tiny_model(seed=model_seed, dtype=dtype)
    x, x_a = _pair(seed, dtype)
    m = sample_mask(2, 16, ratio, seed=seed)
    with torch.no_grad():
        breakdown = maep_total_loss(model, x_a, x, m)
        whole = (model.reconstruct(x_a, m) - x).abs().mean()
    split = breakdown.purify_term + breakdown.recon_term
    return abs(breakdown.total.item() - whole.item()), abs(breakdown.total.item() - split.item())


class TestLossProperties:
    """Property-based tests for losses"""

    @given(model_seed=MODEL_SEEDS, seed=SEEDS, ratio=RATIOS)
    @settings(max_examples=100, deadline=None)
    def test_l1_total_is_whole_image_l1(self, model_seed, seed, ratio):
        """
        *For any* model, pair and mask, the L1 MAEP total equals the mean absolute error of the
        reconstruction over the whole image
        """
        to_whole, to_split = _decomposition_gap(model_seed, seed, ratio, torch.float64)
        assert to_whole < 1e-12
        assert to_split < 1e-12

    @given(model_seed=MODEL_SEEDS, seed=SEEDS, ratio=RATIOS)
    @settings(max_examples=100, deadline=None)
    def test_l1_total_is_whole_image_l1_float32(self, model_seed, seed, ratio):
        """
        *For any* model, pair and mask in single precision, the decomposition holds to 1e-6
        """
        to_whole, to_split = _decomposition_gap(model_seed, seed, ratio, torch.float32)
        assert to_whole < 1e-6
        assert to_split < 1e-6

    @given(model_seed=MODEL_SEEDS, seed=SEEDS)
    @settings(max_examples=100, deadline=None)
    def test_unmasked_total_is_disco(self, model_seed, seed):
        """
        *For any* model and pair, the MAEP objective without masking is the unmasked purification loss
        """
        model = tiny_model(seed=model_seed)
        x, x_a = _pair(seed)
        with torch.no_grad():
            total = maep_total_loss(model, x_a, x, full_mask(2, 16)).total
            disco = disco_purify_loss(model, x_a, x)
        assert abs(total.item() - disco.item()) < 1e-7

    @given(model_seed=MODEL_SEEDS, seed=SEEDS)
    @settings(max_examples=50, deadline=None)
    def test_losses_non_negative(self, model_seed, seed):
        """
        *For any* model, pair and mask, both region terms are non-negative
        """
        model = tiny_model(seed=model_seed)
        x, x_a = _pair(seed)
        with torch.no_grad():
            breakdown = maep_total_loss(model, x_a, x, sample_mask(2, 16, 0.5, seed=seed))
        assert breakdown.purify_term.item() >= 0
        assert breakdown.recon_term.item() >= 0
