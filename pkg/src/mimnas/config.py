"""Experiment configuration: one JSON file, flat sections per module.

Unknown keys are rejected and every validation problem is reported at
once.  The only environment variables honored are MIMNAS_DATA_ROOT
(dataset root fallback) and MIMNAS_OUTPUT_ROOT (base for relative output
directories).
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .data import DataError
from .decoder import DecoderConfig
from .retrain import RetrainConfig
from .search import SearchConfig
from .search_space import DARTS_OPS, NB201_OPS, darts_cell, nb201_cell
from .supernet import SupernetConfig


class ConfigError(ValueError):
    """Carries the full list of validation problems."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))


DEFAULTS: dict = {
    "seed": 0,
    "output_dir": None,
    "device": "cpu",
    "search": {
        "epochs": 25,
        "batch_size": 64,
        "w_lr": 0.025,
        "w_lr_min": 0.001,
        "w_momentum": 0.9,
        "w_weight_decay": 3e-4,
        "alpha_lr": 3e-4,
        "alpha_weight_decay": 1e-3,
        "grad_clip": 5.0,
        "mask_ratio": 0.5,
        "patch_size": 4,
        "split_fraction": 0.5,
        "order": "first",
    },
    "supernet": {
        "space": "darts",          # darts | nb201
        "num_cells": 5,
        "init_channels": 16,
        "stem_multiplier": 3,
        "num_nodes": None,         # default: 4 for darts, 3 for nb201
        "op_set": None,            # default set of the chosen space
        "reduction_positions": None,
    },
    "decoder": {
        "embed_width": 64,
        "upsample_mode": "nearest",
        "output_channels": 3,
        "use_hierarchical": True,
    },
    "retrain": {
        "layers": 5,
        "init_channels": 16,
        "epochs": 20,
        "batch_size": 64,
        "lr": 0.05,
        "momentum": 0.9,
        "weight_decay": 3e-4,
        "grad_clip": 5.0,
        "eval_fraction": 0.2,
        "augment": False,
        "cutout": False,
        "cutout_length": 8,
        "drop_path": 0.0,
        "auxiliary": False,
        "auxiliary_weight": 0.4,
        "stem_multiplier": 3,
    },
    "data": {
        "dataset": "synthetic",    # synthetic | cifar10
        "root": None,
        "n_images": 2000,
        "image_size": 32,
        "noise": 0.08,
        "train": True,
    },
    "analysis": {
        "sample_n": 30,
        "bench_layers": 3,
        "bench_channels": 8,
        "bench_epochs": 10,
        "op_subset": ["skip_connect", "conv_3x3", "avg_pool_3x3"],
        "mask_seed": 0,
        "n_permutations": 2000,
    },
    "sweep": {
        "mask_ratios": [0.1, 0.3, 0.5, 0.7],
        "patch_sizes": [2, 4, 8, 16],
        "retrain": True,
    },
}

_TYPES = {bool: "boolean", int: "integer", float: "number", str: "string"}


def _check_keys(user: dict, template: dict, prefix: str, problems: list[str]) -> None:
    for key, value in user.items():
        if key not in template:
            problems.append(f"unknown key {prefix}{key}")
            continue
        ref = template[key]
        if isinstance(ref, dict):
            if not isinstance(value, dict):
                problems.append(f"{prefix}{key} must be a section (object)")
            else:
                _check_keys(value, ref, f"{prefix}{key}.", problems)
        elif isinstance(ref, bool):
            if value is not None and not isinstance(value, bool):
                problems.append(f"{prefix}{key} must be a boolean")
        elif isinstance(ref, (int, float)) and ref is not None:
            if value is not None and (isinstance(value, bool)
                                      or not isinstance(value, (int, float))):
                problems.append(f"{prefix}{key} must be a number")


def merge_config(user: dict) -> dict:
    problems: list[str] = []
    if not isinstance(user, dict):
        raise ConfigError(["top-level config must be a JSON object"])
    _check_keys(user, DEFAULTS, "", problems)
    if problems:
        raise ConfigError(problems)
    merged = copy.deepcopy(DEFAULTS)
    for key, value in user.items():
        if isinstance(value, dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


def config_hash(merged: dict) -> str:
    blob = json.dumps(merged, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    raw: dict
    seed: int
    device: str
    output_dir: Path | None
    search: SearchConfig
    supernet: SupernetConfig
    decoder: DecoderConfig
    retrain: RetrainConfig
    data: dict
    analysis: dict
    sweep: dict

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.raw, sort_keys=True, indent=2) + "\n")


def _build_supernet_config(section: dict, problems: list[str]) -> SupernetConfig | None:
    space = section["space"]
    if space not in ("darts", "nb201"):
        problems.append(f"supernet.space must be 'darts' or 'nb201', got {space!r}")
        return None
    op_set = section["op_set"]
    try:
        if space == "darts":
            nodes = section["num_nodes"] or 4
            ops = tuple(op_set) if op_set else DARTS_OPS
            normal = darts_cell(num_nodes=nodes, op_set=ops)
            reduction = darts_cell(num_nodes=nodes, op_set=ops, cell_kind="reduction")
            fixed = False
        else:
            nodes = section["num_nodes"] or 3
            ops = tuple(op_set) if op_set else NB201_OPS
            normal = nb201_cell(num_nodes=nodes, op_set=ops)
            reduction = None
            fixed = True
        positions = section["reduction_positions"]
        return SupernetConfig(
            num_cells=section["num_cells"],
            init_channels=section["init_channels"],
            stem_multiplier=section["stem_multiplier"],
            reduction_positions=tuple(positions) if positions else None,
            cell_spec_normal=normal,
            cell_spec_reduction=reduction,
            fixed_reduction=fixed)
    except (ValueError, TypeError) as exc:
        problems.append(f"supernet: {exc}")
        return None


def load_experiment_config(path: str | Path | None = None,
                           overrides: dict | None = None) -> ExperimentConfig:
    """Read, merge, validate and instantiate all module configs.

    `overrides` maps dotted keys (e.g. "search.mask_ratio") to values and is
    applied after the file, mirroring the CLI flags.
    """
    user: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"config file {p} does not exist"])
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {p} is not valid JSON: {exc}"])
    merged = merge_config(user)
    for dotted, value in (overrides or {}).items():
        section = merged
        parts = dotted.split(".")
        for part in parts[:-1]:
            section = section[part]
        section[parts[-1]] = value

    problems: list[str] = []
    seed = merged["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append("seed must be an integer")
        seed = 0
    device = merged["device"]
    if device not in ("cpu", "cuda"):
        problems.append(f"device must be 'cpu' or 'cuda', got {device!r}")
    elif device == "cuda":
        import torch

        if not torch.cuda.is_available():
            problems.append("device 'cuda' requested but CUDA is not available")

    try:
        search = SearchConfig(seed=seed, **merged["search"])
    except (TypeError, ValueError) as exc:
        problems.append(f"search: {exc}")
        search = SearchConfig()
    supernet = _build_supernet_config(merged["supernet"], problems)
    try:
        decoder = DecoderConfig(**merged["decoder"])
    except (TypeError, ValueError) as exc:
        problems.append(f"decoder: {exc}")
        decoder = DecoderConfig()
    try:
        retrain = RetrainConfig(seed=seed, **merged["retrain"])
    except (TypeError, ValueError) as exc:
        problems.append(f"retrain: {exc}")
        retrain = RetrainConfig()

    data = dict(merged["data"])
    data["seed"] = seed
    if data["dataset"] not in ("synthetic", "cifar10"):
        problems.append(f"data.dataset must be 'synthetic' or 'cifar10', "
                        f"got {data['dataset']!r}")
    if data["dataset"] == "cifar10":
        root = data.get("root") or os.environ.get("MIMNAS_DATA_ROOT")
        if not root:
            problems.append(
                "data.root is required for dataset 'cifar10' "
                "(or set MIMNAS_DATA_ROOT)")
        else:
            data["root"] = root
            if not Path(root).exists():
                problems.append(f"data.root {root} does not exist")

    analysis = dict(merged["analysis"])
    for op in analysis["op_subset"]:
        if op == "none":
            problems.append("analysis.op_subset must not contain 'none'")

    output_dir = merged["output_dir"]
    if output_dir is not None:
        out = Path(output_dir)
        root = os.environ.get("MIMNAS_OUTPUT_ROOT")
        if root and not out.is_absolute():
            out = Path(root) / out
        output_dir = out

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        raw=merged, seed=seed, device=device, output_dir=output_dir,
        search=search, supernet=supernet, decoder=decoder, retrain=retrain,
        data=data, analysis=analysis, sweep=dict(merged["sweep"]))


def load_dataset_from(cfg: ExperimentConfig):
    from .data import load_dataset

    try:
        return load_dataset(cfg.data)
    except DataError as exc:
        raise ConfigError([str(exc)])
