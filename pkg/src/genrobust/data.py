"""Datasets, per-class partitions, paired in/out batch sampling and augmentation.

All images are float tensors of shape ``(N, C, H, W)`` with values in ``[0, 1]``.
Supported dataset ids:

``cifar10``
    Reads the python pickle batches from ``<root>/cifar-10-batches-py``.
``digits28``
    The scikit-learn 8x8 handwritten digits (bundled with scikit-learn, no
    download) bilinearly upsampled to 28x28 grayscale.
``toy-gaussians-2d``
    Synthetic isotropic Gaussian blobs in ``[0, 1]^2``, stored as ``(N, 1, 1, 2)``.

Validation data is carved out of the train split by a fixed seed, so train,
val and test never share a sample. ``val_from_test=True`` reproduces the
protocol of selecting models on the test set.
"""
from __future__ import annotations

import hashlib
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DatasetLoadError

SPLITS = ("train", "val", "test")
DATASETS = ("cifar10", "mnist5k", "digits28", "toy-gaussians-2d")
AUGMENT_POLICIES = ("none", "pad-crop-flip", "autoaugment")


class ImageBatch(NamedTuple):
    images: torch.Tensor
    labels: torch.Tensor


@dataclass
class LabelledDataset:
    images: torch.Tensor
    labels: torch.Tensor
    split: str
    num_classes: int
    record: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}")
        if self.images.ndim != 4:
            raise ValueError(f"images must be rank 4, got shape {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("pixels must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabelledDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        return LabelledDataset(self.images[index], self.labels[index], self.split,
                               self.num_classes, dict(self.record))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.cpu().numpy(), minlength=self.num_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.split.encode())
        h.update(np.ascontiguousarray(self.images.cpu().numpy(), dtype=np.float32).tobytes())
        h.update(self.labels.cpu().numpy().astype(np.int64).tobytes())
        return h.hexdigest()[:16]


@dataclass
class ClassPartition:
    in_dist: LabelledDataset
    out_dist: LabelledDataset
    k: int


@dataclass
class AugmentPolicy:
    policy: str = "none"
    pad: int = 4
    flip_p: float = 0.5
    autoaugment_policy: str = "cifar10"

    def __post_init__(self):
        if self.policy not in AUGMENT_POLICIES:
            raise ConfigurationError(f"unknown augment policy {self.policy!r}; expected one of {AUGMENT_POLICIES}")


# ---------------------------------------------------------------- loading

def load_dataset(name: str, root=None, split: str = "train", *, classes=None, val_size=None,
                 val_seed: int = 0, val_from_test: bool = False, limit_per_class=None,
                 **options) -> LabelledDataset:
    """Load one split of a dataset.

    ``classes`` keeps only the listed original labels and relabels them to
    ``0..len(classes)-1`` in the given order. ``val_size`` is a sample count
    (int) or a fraction of the train split (float < 1). ``limit_per_class``
    keeps the first n samples of each class after the split is formed.
    """
    if split not in SPLITS:
        raise ConfigurationError(f"unknown split {split!r}")
    if name == "cifar10":
        if options:
            raise ConfigurationError(f"unexpected options for cifar10: {sorted(options)}")
        images, labels, test_images, test_labels = _read_cifar10(root)
        num_classes = 10
        default_val = 5000
    elif name in ("mnist5k", "digits28"):
        if options:
            raise ConfigurationError(f"unexpected options for {name}: {sorted(options)}")
        images, labels, test_images, test_labels = _mnist5k() if name == "mnist5k" else _digits28()
        num_classes = 10
        default_val = 0.15
    elif name == "toy-gaussians-2d":
        return _toy_gaussians(split, classes=classes, **options)
    else:
        raise ConfigurationError(f"unknown dataset id {name!r}; expected one of {DATASETS}")

    val_size = default_val if val_size is None else val_size
    record = {"dataset": name, "split": split, "val_seed": val_seed, "val_from_test": val_from_test}
    if val_from_test:
        if split == "train":
            x, y = images, labels
        else:
            x, y = test_images, test_labels
    elif split == "test":
        x, y = test_images, test_labels
    else:
        n_val = int(round(val_size * len(labels))) if isinstance(val_size, float) and val_size < 1 else int(val_size)
        perm = np.random.default_rng(val_seed).permutation(len(labels))
        idx = np.sort(perm[:n_val] if split == "val" else perm[n_val:])
        record["val_size"] = n_val
        x, y = images[idx], labels[idx]

    if classes is not None:
        classes = [int(c) for c in classes]
        if len(set(classes)) != len(classes) or any(not 0 <= c < num_classes for c in classes):
            raise ConfigurationError(f"bad class subset {classes}")
        keep = np.isin(y, classes)
        remap = {c: i for i, c in enumerate(classes)}
        x, y = x[keep], np.array([remap[int(c)] for c in y[keep]], dtype=np.int64)
        num_classes = len(classes)
        record["classes"] = classes
    if limit_per_class is not None:
        keep = np.concatenate([np.flatnonzero(y == c)[:limit_per_class] for c in range(num_classes)])
        keep.sort()
        x, y = x[keep], y[keep]
        record["limit_per_class"] = int(limit_per_class)
    return LabelledDataset(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)),
                           torch.from_numpy(np.asarray(y, dtype=np.int64)), split, num_classes, record)


def _read_cifar10(root):
    if root is None:
        raise DatasetLoadError("cifar10 needs a root directory")
    base = Path(root) / "cifar-10-batches-py"
    names = [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]
    missing = [n for n in names if not (base / n).is_file()]
    if missing:
        raise DatasetLoadError(f"cifar10 files missing under {base}: {missing}")
    xs, ys = [], []
    for n in names:
        with open(base / n, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        xs.append(np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(batch[b"labels"], dtype=np.int64))
    x = np.concatenate(xs[:5]).astype(np.float32) / 255.0
    y = np.concatenate(ys[:5])
    return x, y, xs[5].astype(np.float32) / 255.0, ys[5]


def _mnist5k():
    """The 5000-image MNIST subset (500 per class) shipped inside mlxtend."""
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = (x.reshape(-1, 1, 28, 28) / 255.0).astype(np.float32)
    return _test_carve(x, y.astype(np.int64))


def _digits28():
    """sklearn's 8x8 digits, bilinearly upsampled to 28x28."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    x = torch.from_numpy(digits.images.astype(np.float32) / 16.0).unsqueeze(1)
    x = F.interpolate(x, size=(28, 28), mode="bilinear", align_corners=False).clamp(0, 1).numpy()
    return _test_carve(x, digits.target.astype(np.int64))


def _test_carve(x, y, test_fraction=0.3, split_seed=0):
    """Fixed per-class test split for datasets that ship as one pool."""
    rng = np.random.default_rng(split_seed)
    test_idx = []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        test_idx.append(rng.permutation(idx)[: int(round(test_fraction * len(idx)))])
    test_mask = np.zeros(len(y), dtype=bool)
    test_mask[np.concatenate(test_idx)] = True
    return x[~test_mask], y[~test_mask], x[test_mask], y[test_mask]


def _toy_gaussians(split, classes=None, num_classes=2, n_per_class=500, std=0.08, radius=0.25, seed=0):
    if classes is not None:
        raise ConfigurationError("toy-gaussians-2d does not support class subsets")
    rng = np.random.default_rng([seed, SPLITS.index(split)])
    angles = np.pi / 4 + np.pi + 2 * np.pi * np.arange(num_classes) / num_classes
    means = 0.5 + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    y = np.repeat(np.arange(num_classes), n_per_class)
    x = np.clip(means[y] + std * rng.standard_normal((len(y), 2)), 0.0, 1.0)
    record = {"dataset": "toy-gaussians-2d", "split": split, "seed": seed, "std": std,
              "n_per_class": n_per_class, "num_classes": num_classes}
    return LabelledDataset(torch.from_numpy(x.astype(np.float32)).view(-1, 1, 1, 2),
                           torch.from_numpy(y), split, num_classes, record)


# ---------------------------------------------------------------- partitions and batches

def class_partition(ds: LabelledDataset, k: int) -> ClassPartition:
    if not 0 <= k < ds.num_classes:
        raise ValueError(f"class index {k} out of range for K={ds.num_classes}")
    is_k = ds.labels == k
    return ClassPartition(ds.subset(torch.nonzero(is_k).flatten()),
                          ds.subset(torch.nonzero(~is_k).flatten()), k)


def sample_training_pair(part: ClassPartition, batch: int, rng: np.random.Generator):
    """Draw one paired step: ``batch`` class-k images and ``batch`` images from the other classes.

    The out batch picks a class uniformly among the non-k classes present and
    then a sample uniformly inside it, so every other class carries weight
    1/(K-1) regardless of how many samples it has.
    """
    n_in, n_out = len(part.in_dist), len(part.out_dist)
    if batch < 1 or batch > min(n_in, n_out):
        raise ValueError(f"batch {batch} must be in [1, {min(n_in, n_out)}]")
    in_idx = rng.choice(n_in, size=batch, replace=False)
    out_labels = part.out_dist.labels.cpu().numpy()
    groups = [np.flatnonzero(out_labels == c) for c in np.unique(out_labels)]
    which = rng.integers(len(groups), size=batch)
    out_idx = np.array([groups[g][rng.integers(len(groups[g]))] for g in which])
    return (ImageBatch(part.in_dist.images[in_idx], part.in_dist.labels[in_idx]),
            ImageBatch(part.out_dist.images[out_idx], part.out_dist.labels[out_idx]))


# ---------------------------------------------------------------- augmentation

def augment(batch: torch.Tensor, policy: AugmentPolicy, rng: np.random.Generator) -> torch.Tensor:
    if not isinstance(policy, AugmentPolicy):
        policy = AugmentPolicy(policy)
    if policy.policy == "none":
        return batch
    if policy.policy == "pad-crop-flip":
        return _pad_crop_flip(batch, policy.pad, policy.flip_p, rng)
    return _autoaugment(batch, policy.autoaugment_policy, rng)


def _pad_crop_flip(batch, pad, flip_p, rng):
    n, _, h, w = batch.shape
    padded = F.pad(batch, (pad, pad, pad, pad))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < flip_p
    out = torch.empty_like(batch)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out


def _autoaugment(batch, policy_name, rng):
    from torchvision.transforms import AutoAugment, AutoAugmentPolicy

    policies = {"cifar10": AutoAugmentPolicy.CIFAR10, "imagenet": AutoAugmentPolicy.IMAGENET,
                "svhn": AutoAugmentPolicy.SVHN}
    if policy_name not in policies:
        raise ConfigurationError(f"unknown autoaugment policy {policy_name!r}")
    op = AutoAugment(policies[policy_name])
    as_uint8 = (batch * 255).round().to(torch.uint8)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(rng.integers(2**31)))
        out = torch.stack([op(img) for img in as_uint8])
    return out.to(batch.dtype) / 255.0
