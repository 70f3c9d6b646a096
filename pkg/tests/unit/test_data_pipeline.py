"""Unit tests for datasets, splits and adversarial pair generation"""
import json

import pytest
import torch

from src.config_manager import AttackConfig, DataConfig
from src.data_pipeline import (
    AdvPairCache, SyntheticSpec, generate_synthetic, load_dataset, load_from_config, make_adv_pairs,
    pair_fingerprint, split_indices
)
from src.error_handler import (
    CacheCoverageError, CacheFingerprintError, MissingDatasetError, UnknownDatasetError
)
from src.io_utils import atomic_write_json

ATTACK = AttackConfig(epsilon=8 / 255, steps=2, step_size=4 / 255)


class TestSynthetic:
    """Test the synthetic desk-scale dataset"""

    def test_deterministic(self):
        spec = SyntheticSpec(n_classes=3, n_per_class=5, resolution=(8, 8), seed=2)
        a, la = generate_synthetic(spec)
        b, lb = generate_synthetic(spec)
        assert torch.equal(a, b)
        assert torch.equal(la, lb)

    def test_seed_changes_images(self):
        a, _ = generate_synthetic(SyntheticSpec(n_per_class=2, resolution=(8, 8), seed=1))
        b, _ = generate_synthetic(SyntheticSpec(n_per_class=2, resolution=(8, 8), seed=2))
        assert not torch.equal(a, b)

    def test_shape_range_and_labels(self):
        images, labels = generate_synthetic(SyntheticSpec(n_classes=4, n_per_class=3, resolution=(8, 12)))
        assert images.shape == (12, 3, 8, 12)
        assert images.dtype == torch.float32
        assert images.min() >= 0 and images.max() <= 1
        assert torch.equal(torch.bincount(labels), torch.full((4,), 3))

    def test_handle_metadata(self, synthetic_handle):
        assert synthetic_handle.tag == "synthetic"
        assert synthetic_handle.shape == (3, 8, 8)
        assert synthetic_handle.num_classes == 4


class TestSplits:
    """Test deterministic train/val/test splits"""

    def test_disjoint_and_covering(self):
        idx = split_indices(100, 0.1, 0.2, seed=0)
        together = torch.cat([idx["train"], idx["val"], idx["test"]])
        assert torch.equal(together.sort().values, torch.arange(100))
        assert len(idx["val"]) == 10 and len(idx["test"]) == 20

    def test_same_seed_same_split(self):
        a = split_indices(50, 0.1, 0.1, seed=3)
        b = split_indices(50, 0.1, 0.1, seed=3)
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_handle_split_sizes(self, synthetic_handle):
        sizes = {s: synthetic_handle.num_samples(s) for s in ("train", "val", "test")}
        assert sizes == {"train": 52, "val": 6, "test": 6}

    def test_loader_order_is_reproducible(self, synthetic_handle):
        first = next(iter(synthetic_handle.loader("train", batch_size=8, shuffle=True, seed=5)))[1]
        second = next(iter(synthetic_handle.loader("train", batch_size=8, shuffle=True, seed=5)))[1]
        assert torch.equal(first, second)

    def test_unknown_split(self, synthetic_handle):
        with pytest.raises(KeyError):
            synthetic_handle.loader("holdout")


class TestLoadDataset:
    """Test dataset dispatch"""

    def test_unknown_tag(self):
        with pytest.raises(UnknownDatasetError):
            load_dataset("mnist")

    def test_missing_cifar_is_reported(self, tmp_path):
        with pytest.raises(MissingDatasetError):
            load_dataset("cifar10", root=tmp_path)

    def test_missing_imagenet_is_reported(self, tmp_path):
        with pytest.raises(MissingDatasetError):
            load_dataset("imagenet-val", root=tmp_path)

    def test_target_dataset_required(self):
        with pytest.raises(UnknownDatasetError):
            load_from_config(DataConfig(n_per_class=4), target=True)

    def test_target_dataset_loaded(self):
        handle = load_from_config(DataConfig(n_per_class=4, target_dataset="synthetic"), target=True)
        assert handle.tag == "synthetic"


class TestAdvPairs:
    """Test on-the-fly and cached adversarial pairs"""

    def test_zero_budget_pairs_are_clean(self, synthetic_handle, classifier):
        cfg = AttackConfig(epsilon=0.0, steps=1, step_size=1 / 255)
        for x, x_a, _ in make_adv_pairs(synthetic_handle, classifier, cfg, batch_size=16):
            assert torch.equal(x, x_a)

    def test_pairs_inside_ball(self, synthetic_handle, classifier):
        for x, x_a, y in make_adv_pairs(synthetic_handle, classifier, ATTACK, batch_size=16, max_batches=2):
            assert (x_a - x).abs().max().item() <= ATTACK.epsilon + 1e-6
            assert x_a.min() >= 0 and x_a.max() <= 1
            assert y.shape[0] == x.shape[0]

    def test_max_batches(self, synthetic_handle, classifier):
        pairs = list(make_adv_pairs(synthetic_handle, classifier, ATTACK, batch_size=8, max_batches=3))
        assert len(pairs) == 3

    def test_cached_pairs_match_on_the_fly(self, tmp_path, synthetic_handle, classifier):
        live = list(make_adv_pairs(synthetic_handle, classifier, ATTACK, batch_size=16))
        cached = list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path, batch_size=16))
        replay = list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path, batch_size=16))
        assert len(live) == len(cached) == len(replay)
        for (x, x_a, y), (cx, cx_a, cy), (rx, rx_a, ry) in zip(live, cached, replay):
            assert torch.equal(x_a, cx_a) and torch.equal(cx_a, rx_a)
            assert torch.equal(y, cy) and torch.equal(cy, ry)

    def test_shuffled_replay_is_a_permutation(self, tmp_path, synthetic_handle, classifier):
        ordered = list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path, batch_size=8))
        shuffled = list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path,
                                       batch_size=8, shuffle_seed=4))
        key = lambda batch: batch[2].tolist()  # noqa: E731
        assert sorted(map(key, ordered)) == sorted(map(key, shuffled))

    def test_replayed_batches_keep_their_images(self, tmp_path, synthetic_handle, classifier):
        built = list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path, batch_size=8))
        replay = list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path,
                                     batch_size=8, shuffle_seed=4))
        for x, x_a, y in replay:
            assert any(torch.equal(x, bx) and torch.equal(x_a, bx_a) for bx, bx_a, _ in built)

    def test_short_cache_rejected_for_full_run(self, tmp_path, synthetic_handle, classifier):
        short = list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path,
                                    batch_size=8, max_batches=2))
        assert len(short) == 2
        assert json.loads((tmp_path / "manifest.json").read_text())["max_batches"] == 2
        with pytest.raises(CacheCoverageError):
            list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path, batch_size=8))
        with pytest.raises(CacheCoverageError):
            list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path,
                                batch_size=8, max_batches=3))

    def test_short_cache_serves_smaller_requests(self, tmp_path, synthetic_handle, classifier):
        list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path,
                            batch_size=8, max_batches=2))
        again = list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path,
                                    batch_size=8, max_batches=2))
        fewer = list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path,
                                    batch_size=8, max_batches=1))
        assert len(again) == 2 and len(fewer) == 1

    def test_stale_cache_rejected(self, tmp_path, synthetic_handle, classifier):
        list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path, batch_size=16))
        stronger = ATTACK.model_copy(update={"epsilon": 16 / 255})
        with pytest.raises(CacheFingerprintError):
            list(make_adv_pairs(synthetic_handle, classifier, stronger, cache_dir=tmp_path, batch_size=16))

    def test_tampered_record_rejected(self, tmp_path, synthetic_handle, classifier):
        list(make_adv_pairs(synthetic_handle, classifier, ATTACK, cache_dir=tmp_path, batch_size=16))
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        cache = AdvPairCache(tmp_path, "f" * 32)
        atomic_write_json(tmp_path / "manifest.json", {**manifest, "fingerprint": "f" * 32})
        with pytest.raises(CacheFingerprintError):
            list(cache.read())

    def test_incomplete_cache_is_not_ready(self, tmp_path):
        atomic_write_json(tmp_path / "manifest.json", {"fingerprint": "abc", "complete": False})
        assert not AdvPairCache(tmp_path, "abc").is_ready()


class TestPairFingerprint:
    """Test the cache fingerprint inputs"""

    def test_changes_with_each_input(self):
        base = pair_fingerprint(ATTACK, "clf", "synthetic", 7)
        assert pair_fingerprint(ATTACK.model_copy(update={"steps": 3}), "clf", "synthetic", 7) != base
        assert pair_fingerprint(ATTACK, "other", "synthetic", 7) != base
        assert pair_fingerprint(ATTACK, "clf", "cifar10", 7) != base
        assert pair_fingerprint(ATTACK, "clf", "synthetic", 8) != base
        assert pair_fingerprint(ATTACK, "clf", "synthetic", 7, batch_size=32) != base

    def test_stable(self):
        assert pair_fingerprint(ATTACK, "clf", "synthetic", 7) == pair_fingerprint(ATTACK, "clf", "synthetic", 7)
