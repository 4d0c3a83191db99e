"""Weight-sharing encoder: stacked relaxed cells producing a feature pyramid.

The supernet carries every candidate op on every edge.  Its forward pass
returns three feature maps F1/F2/F3 at full, half and quarter input
resolution; F1 taps the last cell before the first reduction, F2 the last
cell before the second reduction, F3 the final cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .ops import DownsampleBlock, FactorizedReduce, ReLUConvBN, build_op
from .search_space import ArchParams, CellSpec, darts_cell


class SupernetError(RuntimeError):
    pass


@dataclass
class SupernetConfig:
    num_cells: int = 5
    init_channels: int = 16
    stem_multiplier: int = 3
    reduction_positions: tuple[int, int] | None = None  # default: 1/3 and 2/3 depth
    cell_spec_normal: CellSpec = field(default_factory=darts_cell)
    cell_spec_reduction: CellSpec | None = field(
        default_factory=lambda: darts_cell(cell_kind="reduction"))
    fixed_reduction: bool = False  # plain downsample blocks instead of searched cells

    def __post_init__(self):
        if self.num_cells < 3:
            raise ValueError("need at least 3 cells for a three-level pyramid")
        if self.reduction_positions is None:
            self.reduction_positions = (self.num_cells // 3, (2 * self.num_cells) // 3)
        r0, r1 = self.reduction_positions
        if not (0 < r0 < r1 < self.num_cells):
            raise ValueError(
                f"reduction positions {self.reduction_positions} must satisfy "
                f"0 < first < second < num_cells={self.num_cells}")
        if not self.fixed_reduction and self.cell_spec_reduction is None:
            raise ValueError("searched reductions need a reduction cell spec")

    def specs(self) -> dict[str, CellSpec]:
        out = {"normal": self.cell_spec_normal}
        if not self.fixed_reduction:
            out["reduction"] = self.cell_spec_reduction
        return out


@dataclass
class FeaturePyramid:
    """Encoder features at full (f1), half (f2) and quarter (f3) resolution."""

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor

    def check(self, input_hw: tuple[int, int]) -> None:
        h, w = input_hw
        want = [(h, w), (h // 2, w // 2), (h // 4, w // 4)]
        for name, f, (wh, ww) in zip(("f1", "f2", "f3"), (self.f1, self.f2, self.f3), want):
            if tuple(f.shape[-2:]) != (wh, ww):
                raise SupernetError(
                    f"{name} has resolution {tuple(f.shape[-2:])}, expected {(wh, ww)}")
            if not torch.isfinite(f).all():
                raise SupernetError(f"{name} contains non-finite values")

    @property
    def channels(self) -> tuple[int, int, int]:
        return self.f1.shape[1], self.f2.shape[1], self.f3.shape[1]


class MixedOp(nn.Module):
    """Weighted sum of every candidate op on one edge."""

    def __init__(self, op_set, C, stride, affine=False):
        super().__init__()
        self.op_names = tuple(op_set)
        self._ops = nn.ModuleList(build_op(name, C, stride, affine) for name in op_set)

    def forward(self, x, weights):
        out = sum(w * op(x) for w, op in zip(weights, self._ops))
        if torch.isnan(out).any():
            for name, op in zip(self.op_names, self._ops):
                if torch.isnan(op(x)).any():
                    raise SupernetError(f"NaN in output of op {name!r}")
            raise SupernetError("NaN in mixed op output")
        return out


class SearchCell(nn.Module):
    """One relaxed cell: each intermediate node sums the mixed-op outputs of
    all its incoming edges; the cell output concatenates the node values."""

    def __init__(self, spec: CellSpec, in_channels: tuple[int, ...], channels: int,
                 reduction: bool, reduction_prev: bool):
        super().__init__()
        if len(in_channels) != spec.num_inputs:
            raise SupernetError(
                f"cell wants {spec.num_inputs} inputs, got {len(in_channels)} channel counts")
        self.spec = spec
        self.reduction = reduction
        pre = []
        for slot, c_in in enumerate(in_channels):
            # Only the prev-prev input of a 2-input cell can lag a resolution.
            if reduction_prev and spec.num_inputs == 2 and slot == 0:
                pre.append(FactorizedReduce(c_in, channels, affine=False))
            else:
                pre.append(ReLUConvBN(c_in, channels, 1, 1, 0, affine=False))
        self.preprocess = nn.ModuleList(pre)
        ops = []
        for i, j in spec.edges:
            stride = 2 if reduction and i < spec.num_inputs else 1
            ops.append(MixedOp(spec.op_set, channels, stride))
        self._ops = nn.ModuleList(ops)
        self.out_channels = spec.num_nodes * channels

    def forward(self, inputs, edge_weights):
        if len(inputs) != self.spec.num_inputs:
            raise SupernetError(
                f"cell wants {self.spec.num_inputs} inputs, got {len(inputs)}")
        states = [p(x) for p, x in zip(self.preprocess, inputs)]
        for node in self.spec.intermediate_nodes():
            total = None
            for edge in self.spec.incoming_edges(node):
                e = self.spec.edge_index(edge)
                contrib = self._ops[e](states[edge[0]], edge_weights[e])
                if total is None:
                    total = contrib
                elif contrib.shape[-2:] != total.shape[-2:]:
                    raise SupernetError(
                        f"spatial mismatch at node {node}: edge {edge} gives "
                        f"{tuple(contrib.shape[-2:])}, expected {tuple(total.shape[-2:])}")
                else:
                    total = total + contrib
            states.append(total)
        return torch.cat(states[self.spec.num_inputs:], dim=1)


class Supernet(nn.Module):
    """The full weight-sharing encoder with architecture parameters attached."""

    def __init__(self, cfg: SupernetConfig):
        super().__init__()
        self.cfg = cfg
        c_stem = cfg.stem_multiplier * cfg.init_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c_stem, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_stem),
        )
        # Learnable substitution value for masked input pixels.
        self.mask_embedding = nn.Parameter(torch.zeros(3))

        num_inputs = cfg.cell_spec_normal.num_inputs
        self.num_inputs = num_inputs
        blocks = []
        kinds = []
        c_curr = cfg.init_channels
        prev_channels = [c_stem] * num_inputs
        reduction_prev = False
        for i in range(cfg.num_cells):
            if i in cfg.reduction_positions:
                c_curr *= 2
                if cfg.fixed_reduction:
                    blocks.append(DownsampleBlock(prev_channels[-1], affine=False))
                    kinds.append("downsample")
                    prev_channels = (prev_channels[1:] + [2 * prev_channels[-1]])
                    reduction_prev = True
                    continue
                spec = cfg.cell_spec_reduction
                reduction = True
            else:
                spec = cfg.cell_spec_normal
                reduction = False
            cell = SearchCell(spec, tuple(prev_channels), c_curr, reduction, reduction_prev)
            blocks.append(cell)
            kinds.append(spec.cell_kind)
            prev_channels = (prev_channels[1:] + [cell.out_channels])
            reduction_prev = reduction
        self.blocks = nn.ModuleList(blocks)
        self.block_kinds = kinds

        self.alphas = nn.ParameterDict()
        for kind, spec in cfg.specs().items():
            self.alphas[kind] = nn.Parameter(
                1e-3 * torch.randn(spec.num_edges, spec.num_ops))

    def arch_parameters(self) -> list[nn.Parameter]:
        return list(self.alphas.values())

    def weight_parameters(self) -> list[nn.Parameter]:
        arch = {id(p) for p in self.arch_parameters()}
        return [p for p in self.parameters() if id(p) not in arch]

    def edge_weight_tensors(self) -> dict[str, torch.Tensor]:
        return {kind: torch.softmax(a, dim=-1) for kind, a in self.alphas.items()}

    def arch_params(self) -> ArchParams:
        """Read-only numpy snapshot of the architecture parameters."""
        return ArchParams({
            kind: a.detach().cpu().double().numpy().copy()
            for kind, a in self.alphas.items()
        })

    def set_arch_params(self, arch: ArchParams) -> None:
        with torch.no_grad():
            for kind, mat in arch.values.items():
                self.alphas[kind].copy_(torch.from_numpy(mat).to(self.alphas[kind].dtype))

    def forward(self, x, weights_override: dict[str, torch.Tensor] | None = None
                ) -> FeaturePyramid:
        weights = weights_override if weights_override is not None \
            else self.edge_weight_tensors()
        s = self.stem(x)
        states = [s] * self.num_inputs
        taps = {}
        r0, r1 = self.cfg.reduction_positions
        pos = 0  # position in the cfg's cell indexing (downsample blocks count)
        for block, kind in zip(self.blocks, self.block_kinds):
            if kind == "downsample":
                out = block(states[-1])
                states = states[1:] + [out]
            else:
                out = block(states, weights[kind])
                states = states[1:] + [out]
            if pos == r0 - 1:
                taps["f1"] = out
            if pos == r1 - 1:
                taps["f2"] = out
            pos += 1
        taps["f3"] = out
        pyr = FeaturePyramid(**taps)
        pyr.check(tuple(x.shape[-2:]))
        return pyr

    def pyramid_channels(self) -> tuple[int, int, int]:
        """Channel counts of F1/F2/F3 without running a forward pass."""
        outs = []
        for block, kind in zip(self.blocks, self.block_kinds):
            if kind == "downsample":
                outs.append(block.op.op[1].out_channels)
            else:
                outs.append(block.out_channels)
        r0, r1 = self.cfg.reduction_positions
        return outs[r0 - 1], outs[r1 - 1], outs[-1]


def child_weights(supernet: Supernet, genotype) -> dict[str, torch.Tensor]:
    """One-hot edge weights realizing a genotype inside the supernet.

    Non-selected op paths get weight zero, so a forward pass with this
    override evaluates the child model with inherited weights.
    """
    from .search_space import validate_genotype

    specs = supernet.cfg.specs()
    problems = validate_genotype(genotype, specs)
    if problems:
        raise SupernetError(
            "genotype not expressible in this supernet: " + "; ".join(problems))
    out = {}
    for kind, spec in specs.items():
        w = torch.zeros(spec.num_edges, spec.num_ops)
        for pos, pairs in enumerate(genotype.cells[kind]):
            node = spec.num_inputs + pos
            for op, pred in pairs:
                e = spec.edge_index((pred, node))
                w[e, spec.op_set.index(op)] = 1.0
        out[kind] = w
    return out
