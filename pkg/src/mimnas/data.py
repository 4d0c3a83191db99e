"""Datasets, deterministic splits and batch schedules.

Two sources: CIFAR-10 (read from a local torchvision root, never downloaded
implicitly) and a fully procedural synthetic set that needs no files on
disk.  Synthetic images are amplitude-modulated oriented gratings with
per-image random color mixing, smooth background and pixel noise; the label
is the orientation class.  Orientation must be read out from noisy spatial
structure, which makes classification accuracy sensitive to how much
spatial processing an architecture can do.

All images are standardized per channel; models predict and are scored in
the standardized pixel space.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


class DataError(ValueError):
    pass


CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616])


@dataclass
class ImageDataset:
    name: str
    images: torch.Tensor            # (N, 3, H, W) float32, standardized
    labels: torch.Tensor | None     # (N,) int64, None for label-free use
    mean: np.ndarray
    std: np.ndarray
    num_classes: int | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_hw(self) -> tuple[int, int]:
        return tuple(self.images.shape[-2:])

    def subset(self, indices) -> "ImageDataset":
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return ImageDataset(
            name=self.name,
            images=self.images[idx],
            labels=None if self.labels is None else self.labels[idx],
            mean=self.mean, std=self.std, num_classes=self.num_classes)

    def without_labels(self) -> "ImageDataset":
        return ImageDataset(name=self.name, images=self.images, labels=None,
                            mean=self.mean, std=self.std, num_classes=None)

    def split(self, fraction: float, seed: int) -> tuple["ImageDataset", "ImageDataset"]:
        """Disjoint (first, second) split covering the dataset; seeded shuffle."""
        if not 0.0 < fraction < 1.0:
            raise DataError(f"split fraction must be in (0, 1), got {fraction}")
        n = len(self)
        k = int(round(fraction * n))
        if k == 0 or k == n:
            raise DataError(f"split fraction {fraction} leaves an empty side for n={n}")
        perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED])).permutation(n)
        return self.subset(perm[:k]), self.subset(perm[k:])


def batch_indices(n: int, batch_size: int, epoch: int, seed: int) -> list[np.ndarray]:
    """Per-epoch batch schedule; order is a pure function of (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def make_synthetic_dataset(n: int, size: int = 32, seed: int = 0,
                           num_classes: int = 10, noise: float = 0.08,
                           labeled: bool = True) -> ImageDataset:
    """Procedural CIFAR-shaped dataset; deterministic given (n, size, seed)."""
    if n <= 0:
        raise DataError("need a positive number of images")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    labels = rng.integers(0, num_classes, size=n)

    yy, xx = np.meshgrid(np.arange(size, dtype=np.float32),
                         np.arange(size, dtype=np.float32), indexing="ij")
    xx = xx[None] / size
    yy = yy[None] / size

    base_angle = labels * (np.pi / num_classes)
    theta = (base_angle + rng.uniform(-0.09, 0.09, size=n)).astype(np.float32)[:, None, None]
    freq = rng.uniform(2.0, 4.0, size=n).astype(np.float32)[:, None, None]
    phase = rng.uniform(0, 2 * np.pi, size=n).astype(np.float32)[:, None, None]
    grating = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)

    # Slow amplitude modulation so local contrast varies across the image.
    psi = rng.uniform(0, np.pi, size=n).astype(np.float32)[:, None, None]
    f2 = rng.uniform(0.5, 1.2, size=n).astype(np.float32)[:, None, None]
    ph2 = rng.uniform(0, 2 * np.pi, size=n).astype(np.float32)[:, None, None]
    envelope = 0.55 + 0.45 * np.sin(
        2 * np.pi * f2 * (xx * np.cos(psi) + yy * np.sin(psi)) + ph2)
    texture = grating * envelope

    # Random color mixing and a smooth per-channel gradient; neither carries
    # label information, so color alone cannot solve the task.
    mix = rng.uniform(0.3, 1.0, size=(n, 3, 1, 1)).astype(np.float32)
    gx = rng.uniform(-0.15, 0.15, size=(n, 3, 1, 1)).astype(np.float32)
    gy = rng.uniform(-0.15, 0.15, size=(n, 3, 1, 1)).astype(np.float32)
    images = 0.5 + 0.4 * mix * texture[:, None] + gx * xx[None] + gy * yy[None]
    images += rng.normal(0, noise, size=images.shape).astype(np.float32)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)

    mean = images.mean(axis=(0, 2, 3)).astype(np.float64)
    std = images.std(axis=(0, 2, 3)).astype(np.float64) + 1e-8
    standardized = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return ImageDataset(
        name=f"synthetic-{n}x{size}-s{seed}",
        images=torch.from_numpy(standardized.astype(np.float32)),
        labels=torch.from_numpy(labels.astype(np.int64)) if labeled else None,
        mean=mean, std=std,
        num_classes=num_classes if labeled else None)


def load_cifar10(root: str | Path, n: int | None = None, seed: int = 0,
                 train: bool = True, labeled: bool = True) -> ImageDataset:
    """CIFAR-10 from a local torchvision root (no implicit download)."""
    import torchvision

    root = Path(root)
    if not root.exists():
        raise DataError(
            f"dataset root {root} does not exist; set data.root (or MIMNAS_DATA_ROOT) "
            f"to a directory containing cifar-10-batches-py")
    try:
        ds = torchvision.datasets.CIFAR10(str(root), train=train, download=False)
    except RuntimeError as exc:
        raise DataError(f"CIFAR-10 not found under {root}: {exc}") from None
    images = ds.data.astype(np.float32) / 255.0           # (N, 32, 32, 3)
    labels = np.asarray(ds.targets, dtype=np.int64)
    if n is not None and n < len(images):
        idx = np.random.default_rng(np.random.SeedSequence([seed, 0xC1FA])) \
            .choice(len(images), size=n, replace=False)
        idx.sort()
        images, labels = images[idx], labels[idx]
    images = images.transpose(0, 3, 1, 2)
    standardized = (images - CIFAR10_MEAN[None, :, None, None]) / \
        CIFAR10_STD[None, :, None, None]
    return ImageDataset(
        name=f"cifar10-{'train' if train else 'test'}-{len(images)}",
        images=torch.from_numpy(standardized.astype(np.float32)),
        labels=torch.from_numpy(labels) if labeled else None,
        mean=CIFAR10_MEAN.copy(), std=CIFAR10_STD.copy(),
        num_classes=10 if labeled else None)


def load_dataset(cfg: dict) -> ImageDataset:
    """Build a dataset from the `data` config section."""
    kind = cfg.get("dataset", "synthetic")
    if kind == "synthetic":
        return make_synthetic_dataset(
            n=cfg.get("n_images", 2000),
            size=cfg.get("image_size", 32),
            seed=cfg.get("seed", 0),
            noise=cfg.get("noise", 0.08),
            labeled=True)
    if kind == "cifar10":
        root = cfg.get("root")
        if not root:
            raise DataError("data.root is required for dataset 'cifar10'")
        return load_cifar10(root, n=cfg.get("n_images"), seed=cfg.get("seed", 0),
                            train=cfg.get("train", True))
    raise DataError(f"unknown dataset {kind!r} (expected 'synthetic' or 'cifar10')")
