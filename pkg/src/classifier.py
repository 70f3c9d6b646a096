"""Small reference classifiers and their safetensors container"""
import json
import logging
import os
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import save_file
from tqdm import tqdm

from src.attacks import ClassifierHandle
from src.error_handler import ClassCountMismatchError
from src.io_utils import fingerprint, temp_path_for

if TYPE_CHECKING:
    from src.data_pipeline import DatasetHandle

logger = logging.getLogger(__name__)


class SmallConvNet(nn.Module):
    """Three conv stages and a linear head; resolution agnostic"""

    def __init__(self, num_classes: int, in_chans: int = 3, width: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.in_chans = in_chans
        self.width = width
        self.features = nn.Sequential(
            nn.Conv2d(in_chans, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(width, width * 2, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(width * 2, width * 4, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(width * 4, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(torch.flatten(self.features(x), 1))


class LinearClassifier(nn.Module):
    """Logits = W vec(x) + b"""

    def __init__(self, num_classes: int, in_features: int):
        super().__init__()
        self.num_classes = num_classes
        self.linear = nn.Linear(in_features, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(torch.flatten(x, 1))


def make_handle(model: nn.Module, mean: Sequence[float], std: Sequence[float],
                num_classes: int, classifier_id: Optional[str] = None) -> ClassifierHandle:
    if classifier_id is None:
        classifier_id = fingerprint({
            "arch": type(model).__name__,
            "num_classes": num_classes,
            "weights": [float(p.detach().double().sum()) for p in model.parameters()],
        })
    return ClassifierHandle(model, mean, std, num_classes, classifier_id)


def accuracy(c: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    """Top-1 accuracy in percent"""
    with torch.no_grad():
        return 100.0 * (c(x).argmax(dim=1) == y).float().mean().item()


def train_classifier(handle: "DatasetHandle", epochs: int = 8, lr: float = 2e-3, batch_size: int = 128,
                     seed: int = 0, width: int = 32, device: Optional[torch.device] = None,
                     progress: bool = True) -> ClassifierHandle:
    """Train a SmallConvNet on the handle's train split; returns the frozen classifier"""
    torch.manual_seed(seed)
    device = device or torch.device("cpu")
    c, _, _ = handle.shape
    model = SmallConvNet(handle.num_classes, in_chans=c, width=width).to(device)
    mean = torch.tensor(handle.mean, device=device).view(1, -1, 1, 1)
    std = torch.tensor(handle.std, device=device).view(1, -1, 1, 1)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)

    model.train()
    for epoch in range(epochs):
        loader = handle.loader("train", batch_size=batch_size, shuffle=True, seed=seed + epoch)
        running, seen = 0.0, 0
        for x, y in tqdm(loader, desc=f"classifier epoch {epoch + 1}/{epochs}",
                         disable=not progress, leave=False):
            x, y = x.to(device), y.to(device)
            loss = F.cross_entropy(model((x - mean) / std), y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += loss.item() * x.shape[0]
            seen += x.shape[0]
        logger.info(f"Classifier epoch {epoch + 1}/{epochs}: loss={running / max(seen, 1):.4f}")

    model.eval()
    classifier = make_handle(model, handle.mean, handle.std, handle.num_classes)
    logger.info(f"Trained classifier {classifier.classifier_id} on {handle.tag}")
    return classifier


def save_classifier(classifier: ClassifierHandle, path: Union[str, Path]) -> Path:
    """Store a SmallConvNet handle with its normalization constants and class count"""
    model = classifier.model
    if not isinstance(model, SmallConvNet):
        raise TypeError(f"Only SmallConvNet classifiers can be saved, got {type(model).__name__}")
    path = Path(path)
    tensors = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    metadata = {
        "arch": "SmallConvNet",
        "num_classes": str(classifier.num_classes),
        "in_chans": str(model.in_chans),
        "width": str(model.width),
        "mean": json.dumps(classifier.mean.flatten().tolist()),
        "std": json.dumps(classifier.std.flatten().tolist()),
        "classifier_id": classifier.classifier_id,
    }
    tmp = temp_path_for(path)
    try:
        save_file(tensors, str(tmp), metadata=metadata)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    logger.info(f"Saved classifier {classifier.classifier_id} to {path}")
    return path


def load_classifier(path: Union[str, Path], expected_classes: Optional[int] = None,
                    device: Optional[torch.device] = None) -> ClassifierHandle:
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
        tensors = {k: f.get_tensor(k) for k in f.keys()}
    num_classes = int(meta["num_classes"])
    if expected_classes is not None and num_classes != expected_classes:
        raise ClassCountMismatchError(
            f"Classifier {path} predicts {num_classes} classes, dataset has {expected_classes}"
        )
    model = SmallConvNet(num_classes, in_chans=int(meta["in_chans"]), width=int(meta["width"]))
    model.load_state_dict(tensors)
    classifier = ClassifierHandle(model, json.loads(meta["mean"]), json.loads(meta["std"]),
                                  num_classes, meta["classifier_id"])
    if device is not None:
        classifier = classifier.to(device)
    logger.info(f"Loaded classifier {classifier.classifier_id} from {path}")
    return classifier

