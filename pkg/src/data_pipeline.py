"""Dataset adapters, deterministic splits, the synthetic desk-scale set and adversarial pair caching"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple, Union

import torch
import torch.nn as nn
from safetensors import safe_open
from safetensors.torch import save_file
from torch.utils.data import DataLoader, Dataset, Subset, TensorDataset

from src.attacks import ClassifierHandle, pgd
from src.config_manager import AttackConfig, DataConfig
from src.error_handler import (
    CacheCoverageError, CacheFingerprintError, MissingDatasetError, UnknownDatasetError
)
from src.io_utils import atomic_write_json, fingerprint

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

_NORMALIZATION = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "imagenet-val": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
    "synthetic": ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
}

KNOWN_DATASETS = tuple(_NORMALIZATION)


@dataclass
class SyntheticSpec:
    """Class-conditioned oriented gratings with a class colour tint plus pixel noise"""
    n_classes: int = 4
    n_per_class: int = 500
    resolution: Tuple[int, int] = (32, 32)
    noise_std: float = 0.05
    seed: int = 7


@dataclass
class DatasetHandle:
    """A dataset with deterministic splits; images are float tensors in [0, 1]"""
    tag: str
    shape: Tuple[int, int, int]
    num_classes: int
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    splits: Dict[str, Dataset] = field(default_factory=dict)
    seed: int = 0

    def num_samples(self, split: str) -> int:
        return len(self._split(split))

    def _split(self, split: str) -> Dataset:
        if split not in self.splits:
            raise KeyError(f"Dataset {self.tag} has no '{split}' split (has {sorted(self.splits)})")
        return self.splits[split]

    def loader(self, split: str, batch_size: int = 64, shuffle: bool = False,
               seed: Optional[int] = None) -> DataLoader:
        """Single-process loader; shuffling is driven by an explicit generator"""
        generator = torch.Generator().manual_seed(self.seed if seed is None else seed)
        return DataLoader(self._split(split), batch_size=batch_size, shuffle=shuffle,
                          generator=generator, num_workers=0)

    def tensors(self, split: str, limit: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Materialize a split (or its first `limit` items) as stacked tensors"""
        dataset = self._split(split)
        n = len(dataset) if limit is None else min(limit, len(dataset))
        xs, ys = zip(*(dataset[i] for i in range(n)))
        return torch.stack(xs), torch.as_tensor([int(v) for v in ys], dtype=torch.long)


def split_indices(n: int, val_fraction: float, test_fraction: float,
                  seed: int) -> Dict[str, torch.Tensor]:
    """Disjoint train/val/test index sets covering range(n)"""
    generator = torch.Generator().manual_seed(seed)
    perm = torch.randperm(n, generator=generator)
    n_test = int(math.floor(n * test_fraction))
    n_val = int(math.floor(n * val_fraction))
    return {
        "test": perm[:n_test].sort().values,
        "val": perm[n_test:n_test + n_val].sort().values,
        "train": perm[n_test + n_val:].sort().values,
    }


def _class_palette(n_classes: int) -> torch.Tensor:
    # evenly spaced hues, mapped to RGB weights in [0.35, 1]
    hues = torch.arange(n_classes, dtype=torch.float64) / n_classes
    phases = torch.tensor([0.0, 1.0 / 3, 2.0 / 3], dtype=torch.float64)
    return 0.675 + 0.325 * torch.cos(2 * math.pi * (hues.unsqueeze(1) - phases))


def generate_synthetic(spec: SyntheticSpec) -> Tuple[torch.Tensor, torch.Tensor]:
    """Images [K*n, 3, H, W] in [0, 1] and labels, fully determined by spec.seed"""
    generator = torch.Generator().manual_seed(spec.seed)
    h, w = spec.resolution
    n = spec.n_classes * spec.n_per_class
    labels = torch.arange(spec.n_classes).repeat_interleave(spec.n_per_class)

    theta = math.pi * labels.double() / spec.n_classes
    theta = theta + (torch.rand(n, generator=generator, dtype=torch.float64) - 0.5) * (0.3 * math.pi / spec.n_classes)
    freq = 3.0 + 2.0 * torch.rand(n, generator=generator, dtype=torch.float64)
    phase = 2 * math.pi * torch.rand(n, generator=generator, dtype=torch.float64)

    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64) / h,
                            torch.arange(w, dtype=torch.float64) / w, indexing="ij")
    proj = (xs.unsqueeze(0) * torch.cos(theta).view(-1, 1, 1)
            + ys.unsqueeze(0) * torch.sin(theta).view(-1, 1, 1))
    grating = torch.sin(2 * math.pi * freq.view(-1, 1, 1) * proj + phase.view(-1, 1, 1))

    tint = _class_palette(spec.n_classes)[labels].view(n, 3, 1, 1)
    images = 0.5 + 0.4 * tint * grating.unsqueeze(1) - 0.1 * (1 - tint)
    images = images + spec.noise_std * torch.randn(images.shape, generator=generator, dtype=torch.float64)
    return images.clamp(0.0, 1.0).float(), labels


def _synthetic_handle(config: DataConfig) -> DatasetHandle:
    spec = SyntheticSpec(n_classes=config.n_classes, n_per_class=config.n_per_class,
                         resolution=tuple(config.resolution), seed=config.seed)
    images, labels = generate_synthetic(spec)
    dataset = TensorDataset(images, labels)
    idx = split_indices(len(dataset), config.val_fraction, config.test_fraction, config.seed)
    mean, std = _NORMALIZATION["synthetic"]
    return DatasetHandle(
        tag="synthetic",
        shape=(3, *spec.resolution),
        num_classes=spec.n_classes,
        mean=mean,
        std=std,
        splits={name: Subset(dataset, idx[name].tolist()) for name in SPLITS},
        seed=config.seed,
    )


def _missing(tag: str, root: Path, error: Exception) -> MissingDatasetError:
    return MissingDatasetError(
        f"Dataset '{tag}' not found under {root} ({error}). Download it once with torchvision "
        f"(download=True) into that directory or point data.root at an existing copy; "
        f"this pipeline never downloads on its own"
    )


def _cifar_handle(tag: str, config: DataConfig, root: Path) -> DatasetHandle:
    from torchvision import datasets, transforms

    cls = datasets.CIFAR10 if tag == "cifar10" else datasets.CIFAR100
    to_tensor = transforms.ToTensor()
    try:
        train_full = cls(root=str(root), train=True, download=False, transform=to_tensor)
        test = cls(root=str(root), train=False, download=False, transform=to_tensor)
    except RuntimeError as e:
        raise _missing(tag, root, e) from e

    idx = split_indices(len(train_full), config.val_fraction, 0.0, config.seed)
    mean, std = _NORMALIZATION[tag]
    return DatasetHandle(
        tag=tag,
        shape=(3, 32, 32),
        num_classes=10 if tag == "cifar10" else 100,
        mean=mean,
        std=std,
        splits={
            "train": Subset(train_full, idx["train"].tolist()),
            "val": Subset(train_full, idx["val"].tolist()),
            "test": test,
        },
        seed=config.seed,
    )


def _imagenet_val_handle(config: DataConfig, root: Path) -> DatasetHandle:
    from torchvision import datasets, transforms

    val_dir = root / "val"
    if not val_dir.is_dir():
        raise _missing("imagenet-val", root, FileNotFoundError(str(val_dir)))
    transform = transforms.Compose([
        transforms.Resize(256),
        transforms.CenterCrop(224),
        transforms.ToTensor(),
    ])
    test = datasets.ImageFolder(str(val_dir), transform=transform)
    mean, std = _NORMALIZATION["imagenet-val"]
    return DatasetHandle(tag="imagenet-val", shape=(3, 224, 224), num_classes=len(test.classes),
                         mean=mean, std=std, splits={"test": test}, seed=config.seed)


def load_dataset(tag: str, root: Union[str, Path] = "data", seed: int = 7,
                 config: Optional[DataConfig] = None) -> DatasetHandle:
    """Build a deterministic DatasetHandle for one of KNOWN_DATASETS"""
    if tag not in KNOWN_DATASETS:
        raise UnknownDatasetError(f"Unknown dataset '{tag}'; expected one of {KNOWN_DATASETS}")
    config = config or DataConfig(dataset=tag, root=str(root), seed=seed)
    if config.dataset != tag or config.seed != seed or config.root != str(root):
        config = DataConfig.model_validate({**config.model_dump(), "dataset": tag,
                                            "root": str(root), "seed": seed})

    if tag == "synthetic":
        handle = _synthetic_handle(config)
    elif tag in ("cifar10", "cifar100"):
        handle = _cifar_handle(tag, config, Path(root))
    else:
        handle = _imagenet_val_handle(config, Path(root))

    sizes = ", ".join(f"{s}={handle.num_samples(s)}" for s in handle.splits)
    logger.info(f"Loaded dataset {tag} {handle.shape} with {handle.num_classes} classes ({sizes})")
    return handle


def load_from_config(config: DataConfig, target: bool = False) -> DatasetHandle:
    if target:
        if not config.target_dataset:
            raise UnknownDatasetError("data.target_dataset is not set")
        return load_dataset(config.target_dataset, config.target_root or config.root,
                            config.seed, config)
    return load_dataset(config.dataset, config.root, config.seed, config)


def pair_fingerprint(attack_cfg: AttackConfig, classifier_id: str, tag: str, seed: int,
                     split: str = "train", batch_size: int = 64) -> str:
    return fingerprint({
        "attack": attack_cfg.model_dump(mode="json"),
        "classifier": classifier_id,
        "dataset": tag,
        "seed": seed,
        "split": split,
        "batch_size": batch_size,
    }, length=32)


def _batch_attack_cfg(attack_cfg: AttackConfig, batch_index: int) -> AttackConfig:
    return attack_cfg.model_copy(update={"seed": attack_cfg.seed + batch_index})


def _generate_pairs(handle: DatasetHandle, classifier: nn.Module, attack_cfg: AttackConfig,
                    split: str, batch_size: int, shuffle_seed: Optional[int],
                    max_batches: Optional[int], device: torch.device
                    ) -> Iterator[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    loader = handle.loader(split, batch_size=batch_size, shuffle=shuffle_seed is not None,
                           seed=shuffle_seed)
    for batch_index, (x, y) in enumerate(loader):
        if max_batches is not None and batch_index >= max_batches:
            break
        x, y = x.to(device), y.to(device)
        x_a = pgd(classifier, x, y, _batch_attack_cfg(attack_cfg, batch_index))
        yield x, x_a, y


class AdvPairCache:
    """Directory of safetensors records plus a manifest holding the attack fingerprint"""

    def __init__(self, cache_dir: Union[str, Path], expected_fingerprint: str):
        """Initialize pair cache"""
        self.cache_dir = Path(cache_dir)
        self.expected_fingerprint = expected_fingerprint
        self.manifest_path = self.cache_dir / "manifest.json"

    def _read_manifest(self) -> Optional[dict]:
        if not self.manifest_path.exists():
            return None
        with open(self.manifest_path, "r", encoding="utf-8") as f:
            return json.load(f)

    def is_ready(self) -> bool:
        """True when a complete cache for this fingerprint exists; raises on a stale cache"""
        manifest = self._read_manifest()
        if manifest is None:
            return False
        if manifest.get("fingerprint") != self.expected_fingerprint:
            raise CacheFingerprintError(
                f"Cache {self.cache_dir} was built for {manifest.get('fingerprint')}, "
                f"current attack setup is {self.expected_fingerprint}; delete it or change cache_dir"
            )
        return bool(manifest.get("complete"))

    def record_path(self, index: int) -> Path:
        return self.cache_dir / f"pairs_{index:05d}.safetensors"

    def write(self, pairs: Iterator[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
              info: Dict[str, object]) -> int:
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        count = 0
        for index, (x, x_a, y) in enumerate(pairs):
            save_file(
                {
                    "index": torch.tensor([index]),
                    "x": x.detach().cpu().contiguous(),
                    "x_adv": x_a.detach().cpu().contiguous(),
                    "y": y.detach().cpu().contiguous(),
                },
                str(self.record_path(index)),
                metadata={"fingerprint": self.expected_fingerprint},
            )
            count += 1
        atomic_write_json(self.manifest_path, {
            **info, "fingerprint": self.expected_fingerprint, "n_records": count, "complete": True,
        })
        logger.info(f"Cached {count} adversarial batches in {self.cache_dir}")
        return count

    def read(self, order: Optional[torch.Tensor] = None, device: Optional[torch.device] = None
             ) -> Iterator[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        manifest = self._read_manifest() or {}
        n_records = int(manifest.get("n_records", 0))
        indices = order.tolist() if order is not None else range(n_records)
        for index in indices:
            with safe_open(str(self.record_path(index)), framework="pt") as f:
                if (f.metadata() or {}).get("fingerprint") != self.expected_fingerprint:
                    raise CacheFingerprintError(f"Record {index} in {self.cache_dir} has a stale fingerprint")
                x, x_a, y = f.get_tensor("x"), f.get_tensor("x_adv"), f.get_tensor("y")
            if device is not None:
                x, x_a, y = x.to(device), x_a.to(device), y.to(device)
            yield x, x_a, y

    def n_records(self) -> int:
        return int((self._read_manifest() or {}).get("n_records", 0))


def make_adv_pairs(handle: DatasetHandle, classifier: ClassifierHandle, attack_cfg: AttackConfig,
                   cache_dir: Optional[Union[str, Path]] = None, split: str = "train",
                   batch_size: int = 64, shuffle_seed: Optional[int] = None,
                   max_batches: Optional[int] = None, device: Optional[torch.device] = None
                   ) -> Iterator[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Yield (x, x_a, y) batches, attacking on the fly or through a fingerprinted cache.

    With a cache, batches are built once in loader order and shuffle_seed only
    permutes the order in which records are replayed: every replayed batch keeps
    the images it was built with, whereas on-the-fly batches are redrawn from the
    shuffled loader each epoch. A cache built under a smaller max_batches than
    requested raises CacheCoverageError.
    """
    device = device or torch.device("cpu")
    if cache_dir is None:
        yield from _generate_pairs(handle, classifier, attack_cfg, split, batch_size,
                                   shuffle_seed, max_batches, device)
        return

    fp = pair_fingerprint(attack_cfg, classifier.classifier_id, handle.tag, handle.seed,
                          split, batch_size)
    cache = AdvPairCache(cache_dir, fp)
    if not cache.is_ready():
        logger.info(f"Building adversarial pair cache {fp} in {cache_dir}")
        cache.write(
            _generate_pairs(handle, classifier, attack_cfg, split, batch_size, None, max_batches, device),
            {"attack": attack_cfg.model_dump(mode="json"), "classifier_id": classifier.classifier_id,
             "dataset": handle.tag, "seed": handle.seed, "split": split, "batch_size": batch_size,
             "max_batches": max_batches},
        )

    n = cache.n_records()
    wanted = math.ceil(handle.num_samples(split) / batch_size)
    if max_batches is not None:
        wanted = min(wanted, max_batches)
    if n < wanted:
        raise CacheCoverageError(
            f"Cache {cache_dir} holds {n} batches but {wanted} were requested; "
            f"rebuild it with a larger max_batches (or none) or change cache_dir"
        )
    if max_batches is not None:
        n = min(n, max_batches)
    order = None
    if shuffle_seed is not None:
        order = torch.randperm(n, generator=torch.Generator().manual_seed(shuffle_seed))
    elif n < cache.n_records():
        order = torch.arange(n)
    yield from cache.read(order, device)
