"""Patch-aligned random masking of image batches.

A mask lives on the patch grid: an ``(H/p, W/p)`` boolean matrix where true
means the whole ``p x p`` patch is hidden.  Exactly ``round(ratio * n_patches)``
patches are masked, sampled uniformly without replacement; the draw is fully
determined by the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch


class MaskingError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    image_h: int
    image_w: int
    patch_size: int
    mask_ratio: float

    def __post_init__(self):
        if self.patch_size <= 0:
            raise MaskingError(f"patch_size must be positive, got {self.patch_size}")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise MaskingError(
                f"image {self.image_h}x{self.image_w} not divisible by "
                f"patch_size {self.patch_size}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise MaskingError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid_shape
        return gh * gw


@dataclass(frozen=True)
class PatchMask:
    """Boolean patch grid (true = masked) plus the patch edge length."""

    grid: np.ndarray
    patch_size: int

    def pixel_mask(self) -> np.ndarray:
        """Expand the patch grid to pixel resolution (constant within a patch)."""
        return np.kron(self.grid, np.ones((self.patch_size, self.patch_size), dtype=bool))

    @property
    def masked_count(self) -> int:
        return int(self.grid.sum())

    def masked_patch_indices(self) -> list[int]:
        return np.flatnonzero(self.grid.ravel()).tolist()


@dataclass
class MaskedBatch:
    """Image batch with masked regions substituted; originals kept for the loss."""

    images: torch.Tensor        # (B, 3, H, W), masked pixels replaced
    pixel_mask: torch.Tensor    # (B, H, W) bool, true = masked
    originals: torch.Tensor     # (B, 3, H, W), untouched input


def generate_mask(spec: MaskSpec, rng_seed: int | np.random.SeedSequence) -> PatchMask:
    """Draw a patch mask: exactly round(ratio * n_patches) patches, seeded."""
    n = spec.n_patches
    n_masked = int(round(spec.mask_ratio * n))
    rng = np.random.default_rng(rng_seed)
    grid = np.zeros(n, dtype=bool)
    if n_masked:
        grid[rng.choice(n, size=n_masked, replace=False)] = True
    return PatchMask(grid=grid.reshape(spec.grid_shape), patch_size=spec.patch_size)


def step_mask_seed(global_seed: int, step: int, stream: int, sample: int) -> np.random.SeedSequence:
    """Per-sample mask seed for search step `step`; replayable from the run seed."""
    return np.random.SeedSequence([global_seed, step, stream, sample])


def scoring_mask_seed(mask_seed: int, image_index: int) -> np.random.SeedSequence:
    """Per-image mask seed for model scoring, shared across all evaluated models."""
    return np.random.SeedSequence([mask_seed, image_index])


def apply_mask(batch: torch.Tensor,
               mask: PatchMask | Sequence[PatchMask],
               mask_embedding: torch.Tensor | None) -> MaskedBatch:
    """Substitute masked pixels with the per-channel embedding (or zeros).

    Unmasked pixels stay bit-identical to the input.  A single mask is
    broadcast over the batch; a sequence supplies one mask per sample.
    """
    if batch.ndim != 4:
        raise MaskingError(f"expected (B, C, H, W) batch, got shape {tuple(batch.shape)}")
    b, c, h, w = batch.shape
    masks = [mask] * b if isinstance(mask, PatchMask) else list(mask)
    if len(masks) != b:
        raise MaskingError(f"{len(masks)} masks for a batch of {b}")
    pixel = np.stack([m.pixel_mask() for m in masks])
    if pixel.shape[1:] != (h, w):
        raise MaskingError(
            f"mask covers {pixel.shape[1:]}, batch is {(h, w)}")
    pixel_t = torch.from_numpy(pixel).to(batch.device)
    if mask_embedding is None:
        fill = torch.zeros(c, dtype=batch.dtype, device=batch.device)
    else:
        if mask_embedding.shape != (c,):
            raise MaskingError(
                f"mask embedding shape {tuple(mask_embedding.shape)}, expected ({c},)")
        fill = mask_embedding.to(batch.dtype)
    filled = fill.view(1, c, 1, 1).expand(b, c, h, w)
    images = torch.where(pixel_t.unsqueeze(1), filled, batch)
    return MaskedBatch(images=images, pixel_mask=pixel_t, originals=batch)


def mask_statistics(mask: PatchMask) -> dict:
    total = mask.grid.size
    count = mask.masked_count
    return {"masked_count": count, "ratio_realized": count / total}


def save_mask_debug(spec: MaskSpec, seed: int, mask: PatchMask, out_dir: str | Path) -> None:
    """Dump a pixel-mask PNG plus a JSON sidecar for inspection."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    px = mask.pixel_mask().astype(np.uint8) * 255
    Image.fromarray(px, mode="L").save(out / "mask.png")
    doc = {
        "patch_size": spec.patch_size,
        "ratio": spec.mask_ratio,
        "seed": seed,
        "masked_patches": mask.masked_patch_indices(),
    }
    (out / "mask.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
