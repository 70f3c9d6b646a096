"""Unit tests for the reference classifiers"""
import pytest
import torch

from src.classifier import (
    SmallConvNet, accuracy, load_classifier, make_handle, save_classifier, train_classifier
)
from src.error_handler import ClassCountMismatchError


@pytest.fixture(scope="module")
def trained(synthetic_handle):
    return train_classifier(synthetic_handle, epochs=3, batch_size=16, progress=False)


class TestSmallConvNet:
    """Test SmallConvNet"""

    @pytest.mark.parametrize("size", [8, 32, 64])
    def test_any_resolution(self, size):
        assert SmallConvNet(10, width=4)(torch.rand(2, 3, size, size)).shape == (2, 10)


class TestTraining:
    """Test classifier training and storage"""

    def test_returns_frozen_handle(self, trained, synthetic_handle):
        x, y = synthetic_handle.tensors("train")
        assert 0.0 <= accuracy(trained, x, y) <= 100.0
        assert all(not p.requires_grad for p in trained.parameters())
        assert not trained.training

    def test_deterministic(self, trained, synthetic_handle):
        again = train_classifier(synthetic_handle, epochs=3, batch_size=16, progress=False)
        assert again.classifier_id == trained.classifier_id

    def test_save_load_roundtrip(self, trained, synthetic_handle, tmp_path):
        path = save_classifier(trained, tmp_path / "classifier.safetensors")
        loaded = load_classifier(path, expected_classes=4)
        x, _ = synthetic_handle.tensors("test")
        assert torch.equal(loaded(x), trained(x))
        assert loaded.classifier_id == trained.classifier_id

    def test_class_count_checked_on_load(self, trained, tmp_path):
        path = save_classifier(trained, tmp_path / "classifier.safetensors")
        with pytest.raises(ClassCountMismatchError):
            load_classifier(path, expected_classes=10)

    def test_only_conv_classifiers_saved(self, classifier, tmp_path):
        with pytest.raises(TypeError):
            save_classifier(classifier, tmp_path / "linear.safetensors")

    def test_handle_id_depends_on_weights(self):
        torch.manual_seed(0)
        a = make_handle(SmallConvNet(4, width=4), (0.5,) * 3, (0.25,) * 3, 4)
        torch.manual_seed(1)
        b = make_handle(SmallConvNet(4, width=4), (0.5,) * 3, (0.25,) * 3, 4)
        assert a.classifier_id != b.classifier_id
