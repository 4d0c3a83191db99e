"""Masked-pixel l1 loss and the per-model reconstruction score.

The loss is the mean absolute error over masked pixel-channel elements
only; unmasked elements contribute nothing.  A model's reconstruction
score is -1 times its mean masked loss over an evaluation set under a
fixed mask seed, so higher is better and a perfect reconstructor scores 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .decoder import decode
from .masking import MaskSpec, apply_mask, generate_mask, scoring_mask_seed


class ObjectiveError(ValueError):
    pass


@dataclass
class MaskedLoss:
    value: torch.Tensor   # scalar, differentiable
    masked_elements: int  # masked pixels x channels


def masked_l1_loss(pred: torch.Tensor, target: torch.Tensor,
                   pixel_mask: torch.Tensor) -> MaskedLoss:
    """Mean |pred - target| over masked elements; mask is (B, H, W) bool."""
    if pred.shape != target.shape:
        raise ObjectiveError(
            f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pixel_mask.shape != (pred.shape[0], *pred.shape[2:]):
        raise ObjectiveError(
            f"mask shape {tuple(pixel_mask.shape)} does not match batch "
            f"{tuple(pred.shape)}")
    sel = pixel_mask.unsqueeze(1).expand_as(pred)
    count = int(sel.sum().item())
    if count == 0:
        raise ObjectiveError("no masked elements: masked mean is undefined")
    value = (pred[sel] - target[sel]).abs().mean()
    return MaskedLoss(value=value, masked_elements=count)


def reconstruction_loss(supernet, decoder, images: torch.Tensor,
                        masks, weights_override=None) -> MaskedLoss:
    """Mask -> encode -> decode -> masked l1 against the originals."""
    batch = apply_mask(images, masks, supernet.mask_embedding)
    pyramid = supernet(batch.images, weights_override=weights_override)
    pred = decode(pyramid, decoder)
    return masked_l1_loss(pred, batch.originals, batch.pixel_mask)


def reconstruction_score(supernet, decoder, eval_images: torch.Tensor,
                         mask_spec: MaskSpec, mask_seed: int,
                         weights_override=None, batch_size: int = 64) -> float:
    """-1 x mean masked l1 over the evaluation set under a fixed mask seed.

    Masks are keyed by (mask_seed, image index), so every model scored with
    the same seed sees identical masks per image.  The running mean is
    accumulated in double precision, making the score independent of
    batching.
    """
    n = eval_images.shape[0]
    if n == 0:
        raise ObjectiveError("evaluation set is empty")
    was_training = supernet.training
    supernet.eval()
    decoder.eval()
    total_abs = 0.0
    total_count = 0
    with torch.no_grad():
        for start in range(0, n, batch_size):
            images = eval_images[start:start + batch_size]
            masks = [generate_mask(mask_spec, scoring_mask_seed(mask_seed, start + i))
                     for i in range(images.shape[0])]
            batch = apply_mask(images, masks, supernet.mask_embedding)
            pyramid = supernet(batch.images, weights_override=weights_override)
            pred = decode(pyramid, decoder)
            diff = (pred - batch.originals).abs()
            sel = batch.pixel_mask.unsqueeze(1).expand_as(diff)
            # Per-image sums keep the accumulation independent of batch size.
            for i in range(images.shape[0]):
                total_abs += float(diff[i][sel[i]].double().sum().item())
                total_count += int(sel[i].sum().item())
    supernet.train(was_training)
    decoder.train(was_training)
    if total_count == 0:
        raise ObjectiveError("no masked elements across the evaluation set")
    return -(total_abs / total_count)


def write_score_report(path: str | Path, entries: Iterable[dict]) -> None:
    """JSON-lines score report: {model_id, score, n_images, mask_seed} per row."""
    with open(path, "w") as fh:
        for entry in entries:
            for key in ("model_id", "score", "n_images", "mask_seed"):
                if key not in entry:
                    raise ObjectiveError(f"score report entry missing {key!r}")
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
