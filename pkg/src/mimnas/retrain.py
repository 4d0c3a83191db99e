"""Discrete-network construction from a genotype and desk-scale retraining.

The discrete network stacks cells in which each intermediate node sums the
outputs of its chosen operations; cell outputs concatenate the node values.
Genotypes without a searched reduction cell get fixed stride-2 downsample
blocks at the reduction positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DataError, ImageDataset, batch_indices
from .ops import (DownsampleBlock, FactorizedReduce, Identity, ReLUConvBN,
                  build_op, count_parameters, estimate_macs)
from .search_space import CellSpec, Genotype, GenotypeError, validate_genotype


class RetrainError(RuntimeError):
    pass


@dataclass
class RetrainConfig:
    layers: int = 5
    init_channels: int = 16
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    eval_fraction: float = 0.2
    augment: bool = False
    cutout: bool = False
    cutout_length: int = 8
    drop_path: float = 0.0
    auxiliary: bool = False
    auxiliary_weight: float = 0.4
    stem_multiplier: int = 3
    reduction_positions: tuple[int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.layers < 3 or self.init_channels < 1 or self.epochs < 0:
            raise ValueError("layers >= 3, init_channels >= 1 and epochs >= 0 required")
        if self.reduction_positions is None:
            self.reduction_positions = (self.layers // 3, (2 * self.layers) // 3)


def drop_path(x: torch.Tensor, p: float) -> torch.Tensor:
    if p <= 0.0:
        return x
    keep = 1.0 - p
    mask = torch.bernoulli(torch.full((x.shape[0], 1, 1, 1), keep, device=x.device))
    return x * mask / keep


class DiscreteCell(nn.Module):

    def __init__(self, nodes, spec: CellSpec, in_channels: tuple[int, ...],
                 channels: int, reduction: bool, reduction_prev: bool):
        super().__init__()
        self.num_inputs = spec.num_inputs
        pre = []
        for slot, c_in in enumerate(in_channels):
            if reduction_prev and spec.num_inputs == 2 and slot == 0:
                pre.append(FactorizedReduce(c_in, channels, affine=True))
            else:
                pre.append(ReLUConvBN(c_in, channels, 1, 1, 0, affine=True))
        self.preprocess = nn.ModuleList(pre)
        self.node_pairs = []  # (op module index, predecessor) per node
        ops = []
        for pos, pairs in enumerate(nodes):
            entries = []
            for op_name, pred in pairs:
                stride = 2 if reduction and pred < spec.num_inputs else 1
                ops.append(build_op(op_name, channels, stride, affine=True))
                entries.append((len(ops) - 1, pred))
            self.node_pairs.append(entries)
        self._ops = nn.ModuleList(ops)
        self.out_channels = len(nodes) * channels

    def forward(self, inputs, drop_prob: float = 0.0):
        states = [p(x) for p, x in zip(self.preprocess, inputs)]
        for entries in self.node_pairs:
            total = None
            for op_idx, pred in entries:
                op = self._ops[op_idx]
                h = op(states[pred])
                if self.training and drop_prob > 0.0 and not isinstance(op, Identity):
                    h = drop_path(h, drop_prob)
                total = h if total is None else total + h
            states.append(total)
        return torch.cat(states[self.num_inputs:], dim=1)


class AuxiliaryHead(nn.Module):
    """Small classifier branch; pools adaptively so any input size works."""

    def __init__(self, C, num_classes):
        super().__init__()
        self.features = nn.Sequential(
            nn.ReLU(inplace=False),
            nn.AdaptiveAvgPool2d(2),
            nn.Conv2d(C, 128, 1, bias=False),
            nn.BatchNorm2d(128),
            nn.ReLU(inplace=False),
            nn.Conv2d(128, 256, 2, bias=False),
            nn.BatchNorm2d(256),
            nn.ReLU(inplace=False),
        )
        self.classifier = nn.Linear(256, num_classes)

    def forward(self, x):
        x = self.features(x)
        return self.classifier(x.flatten(1))


class DiscreteNetwork(nn.Module):

    def __init__(self, genotype: Genotype, cfg: RetrainConfig,
                 specs: Mapping[str, CellSpec], num_classes: int):
        super().__init__()
        problems = validate_genotype(genotype, specs)
        if problems:
            raise GenotypeError("invalid genotype: " + "; ".join(problems))
        self.cfg = cfg
        self.drop_path_prob = cfg.drop_path
        c_stem = cfg.stem_multiplier * cfg.init_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c_stem, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_stem),
        )
        searched_reduction = "reduction" in specs
        num_inputs = specs["normal"].num_inputs
        self.num_inputs = num_inputs

        blocks, kinds = [], []
        c_curr = cfg.init_channels
        prev_channels = [c_stem] * num_inputs
        reduction_prev = False
        aux_pos = cfg.reduction_positions[1]
        self.aux_position = aux_pos if cfg.auxiliary else None
        for i in range(cfg.layers):
            if i in cfg.reduction_positions:
                c_curr *= 2
                if not searched_reduction:
                    block = DownsampleBlock(prev_channels[-1], affine=True)
                    blocks.append(block)
                    kinds.append("downsample")
                    prev_channels = prev_channels[1:] + [2 * prev_channels[-1]]
                    reduction_prev = True
                    continue
                spec, nodes = specs["reduction"], genotype.cells["reduction"]
                reduction = True
            else:
                spec, nodes = specs["normal"], genotype.cells["normal"]
                reduction = False
            cell = DiscreteCell(nodes, spec, tuple(prev_channels), c_curr,
                                reduction, reduction_prev)
            blocks.append(cell)
            kinds.append("cell")
            prev_channels = prev_channels[1:] + [cell.out_channels]
            reduction_prev = reduction
        self.blocks = nn.ModuleList(blocks)
        self.block_kinds = kinds
        c_final = prev_channels[-1]
        self.global_pooling = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(c_final, num_classes)
        self.auxiliary_head = AuxiliaryHead(
            self._channels_at(aux_pos), num_classes) if cfg.auxiliary else None

    def _channels_at(self, pos: int) -> int:
        c_stem = self.cfg.stem_multiplier * self.cfg.init_channels
        prev = [c_stem] * self.num_inputs
        for i, block in enumerate(self.blocks[:pos + 1]):
            out = block.out_channels if hasattr(block, "out_channels") \
                else block.op.op[1].out_channels
            prev = prev[1:] + [out]
        return prev[-1]

    def forward(self, x):
        s = self.stem(x)
        states = [s] * self.num_inputs
        aux_logits = None
        for i, (block, kind) in enumerate(zip(self.blocks, self.block_kinds)):
            if kind == "downsample":
                out = block(states[-1])
            else:
                out = block(states, drop_prob=self.drop_path_prob if self.training else 0.0)
            states = states[1:] + [out]
            if self.training and self.aux_position is not None and i == self.aux_position:
                aux_logits = self.auxiliary_head(out)
        pooled = self.global_pooling(out).flatten(1)
        logits = self.classifier(pooled)
        if self.training and self.auxiliary_head is not None:
            return logits, aux_logits
        return logits

    def parameter_report(self) -> dict:
        groups = {
            "stem": count_parameters(self.stem),
            "classifier": count_parameters(self.classifier),
            "preprocess": 0,
            "ops": 0,
            "downsample": 0,
            "auxiliary": count_parameters(self.auxiliary_head)
            if self.auxiliary_head is not None else 0,
        }
        for block, kind in zip(self.blocks, self.block_kinds):
            if kind == "downsample":
                groups["downsample"] += count_parameters(block)
            else:
                groups["preprocess"] += count_parameters(block.preprocess)
                groups["ops"] += count_parameters(block._ops)
        groups["total"] = count_parameters(self)
        return groups


def build_discrete_network(genotype: Genotype, cfg: RetrainConfig,
                           specs: Mapping[str, CellSpec] | CellSpec | None = None,
                           num_classes: int = 10) -> DiscreteNetwork:
    if specs is None:
        from .search_space import darts_cell
        specs = {"normal": darts_cell(),
                 "reduction": darts_cell(cell_kind="reduction")}
    elif isinstance(specs, CellSpec):
        specs = {specs.cell_kind: specs}
    # Drop spec kinds the genotype does not realize (fixed-reduction spaces).
    specs = {k: v for k, v in specs.items()
             if k in genotype.cells and genotype.cells[k]}
    torch.manual_seed(cfg.seed)  # weight init is part of the replayable recipe
    return DiscreteNetwork(genotype, cfg, specs, num_classes)


def network_complexity(net: DiscreteNetwork, image_hw: tuple[int, int]) -> dict:
    return {
        "params": net.parameter_report(),
        "macs": estimate_macs(net, (3, *image_hw)),
    }


def _augment_batch(images: torch.Tensor, gen: torch.Generator,
                   cfg: RetrainConfig) -> torch.Tensor:
    b, c, h, w = images.shape
    out = images
    flip = torch.rand(b, generator=gen) < 0.5
    out = torch.where(flip.view(b, 1, 1, 1), out.flip(-1), out)
    pad = 4
    padded = F.pad(out, (pad, pad, pad, pad))
    dx = torch.randint(0, 2 * pad + 1, (b,), generator=gen)
    dy = torch.randint(0, 2 * pad + 1, (b,), generator=gen)
    crops = torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
                         for i in range(b)])
    if cfg.cutout:
        cy = torch.randint(0, h, (b,), generator=gen)
        cx = torch.randint(0, w, (b,), generator=gen)
        half = cfg.cutout_length // 2
        for i in range(b):
            y0, y1 = max(0, int(cy[i]) - half), min(h, int(cy[i]) + half)
            x0, x1 = max(0, int(cx[i]) - half), min(w, int(cx[i]) + half)
            crops[i, :, y0:y1, x0:x1] = 0.0
    return crops


@dataclass
class RetrainResult:
    final_accuracy: float
    best_accuracy: float
    curve: list[dict] = field(default_factory=list)


def evaluate_accuracy(net: nn.Module, images: torch.Tensor, labels: torch.Tensor,
                      batch_size: int = 256, device: str = "cpu") -> float:
    was_training = net.training
    net.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = net(images[start:start + batch_size].to(device))
            correct += int((logits.argmax(dim=1).cpu() ==
                            labels[start:start + batch_size]).sum().item())
    net.train(was_training)
    return correct / images.shape[0]


def train_from_scratch(net: DiscreteNetwork, dataset: ImageDataset,
                       cfg: RetrainConfig, device: str = "cpu") -> RetrainResult:
    """Supervised training at desk scale; reproducible given cfg.seed."""
    if dataset.labels is None:
        raise DataError("retraining needs a labeled dataset")
    torch.manual_seed(cfg.seed)
    net.to(device)
    eval_ds, train_ds = dataset.split(cfg.eval_fraction, cfg.seed)
    optimizer = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    criterion = nn.CrossEntropyLoss()
    curve: list[dict] = []
    best = evaluate_accuracy(net, eval_ds.images, eval_ds.labels)
    final = best
    for epoch in range(cfg.epochs):
        lr = 0.5 * cfg.lr * (1 + np.cos(np.pi * epoch / max(1, cfg.epochs)))
        for group in optimizer.param_groups:
            group["lr"] = lr
        if cfg.drop_path > 0:
            net.drop_path_prob = cfg.drop_path * epoch / max(1, cfg.epochs)
        gen = torch.Generator().manual_seed(cfg.seed * 1009 + epoch)
        net.train()
        epoch_loss, seen = 0.0, 0
        for idx in batch_indices(len(train_ds), cfg.batch_size, epoch, cfg.seed):
            images = train_ds.images[torch.from_numpy(idx)]
            labels = train_ds.labels[torch.from_numpy(idx)]
            if cfg.augment:
                images = _augment_batch(images, gen, cfg)
            optimizer.zero_grad(set_to_none=True)
            out = net(images)
            if isinstance(out, tuple):
                logits, aux_logits = out
                loss = criterion(logits, labels) + \
                    cfg.auxiliary_weight * criterion(aux_logits, labels)
            else:
                loss = criterion(out, labels)
            if not torch.isfinite(loss):
                raise RetrainError(
                    f"training diverged at epoch {epoch} (loss={float(loss)}); "
                    f"curve so far: {curve}")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            optimizer.step()
            epoch_loss += float(loss.item()) * len(idx)
            seen += len(idx)
        acc = evaluate_accuracy(net, eval_ds.images, eval_ds.labels)
        best = max(best, acc)
        final = acc
        curve.append({"epoch": epoch, "train_loss": epoch_loss / max(1, seen),
                      "eval_accuracy": acc, "lr": float(lr)})
    return RetrainResult(final_accuracy=final, best_accuracy=best, curve=curve)
