"""Alternating bilevel optimization of supernet weights and architecture
parameters, both minimizing the masked reconstruction loss.

Each iteration takes one architecture step on a validation batch and one
weight step on a training batch.  Weight steps use momentum SGD with a
cosine learning-rate schedule; architecture steps use Adam.  Masks are
keyed by (run seed, step), batch order by (run seed, epoch), so a run is
fully reproducible from its config and can be resumed mid-flight from a
checkpoint without changing the trajectory.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import ImageDataset, batch_indices
from .decoder import DecoderConfig, build_decoder
from .masking import MaskSpec, generate_mask, step_mask_seed
from .objective import reconstruction_loss
from .search_space import Genotype, derive_genotype
from .supernet import Supernet, SupernetConfig

CHECKPOINT_SCHEMA_VERSION = 1

TRAIN_STREAM, VAL_STREAM = 0, 1


class DivergenceError(RuntimeError):
    """Non-finite loss or state; carries diagnostics for the log."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    epochs: int = 25
    batch_size: int = 64
    w_lr: float = 0.025
    w_lr_min: float = 0.001
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    alpha_lr: float = 3e-4
    alpha_weight_decay: float = 1e-3
    grad_clip: float = 5.0
    mask_ratio: float = 0.5
    patch_size: int = 4
    split_fraction: float = 0.5
    order: str = "first"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {self.order!r}")


@dataclass
class SearchState:
    cfg: SearchConfig
    supernet: Supernet
    decoder: torch.nn.Module
    w_optimizer: torch.optim.Optimizer
    alpha_optimizer: torch.optim.Optimizer
    mask_spec: MaskSpec
    step: int = 0
    epoch: int = 0

    def genotype(self) -> Genotype:
        return derive_genotype(self.supernet.arch_params(), self.supernet.cfg.specs())


def build_search_state(cfg: SearchConfig, image_hw: tuple[int, int],
                       supernet_cfg: SupernetConfig | None = None,
                       decoder_cfg: DecoderConfig | None = None,
                       device: str = "cpu") -> SearchState:
    supernet_cfg = supernet_cfg or SupernetConfig()
    decoder_cfg = decoder_cfg or DecoderConfig()
    torch.manual_seed(cfg.seed)
    supernet = Supernet(supernet_cfg).to(device)
    decoder = build_decoder(supernet.pyramid_channels(), decoder_cfg).to(device)
    w_params = supernet.weight_parameters() + list(decoder.parameters())
    w_opt = torch.optim.SGD(w_params, lr=cfg.w_lr, momentum=cfg.w_momentum,
                            weight_decay=cfg.w_weight_decay)
    a_opt = torch.optim.Adam(supernet.arch_parameters(), lr=cfg.alpha_lr,
                             betas=(0.5, 0.999), weight_decay=cfg.alpha_weight_decay)
    mask_spec = MaskSpec(image_h=image_hw[0], image_w=image_hw[1],
                         patch_size=cfg.patch_size, mask_ratio=cfg.mask_ratio)
    return SearchState(cfg=cfg, supernet=supernet, decoder=decoder,
                       w_optimizer=w_opt, alpha_optimizer=a_opt, mask_spec=mask_spec)


def cosine_lr(cfg: SearchConfig, epoch: int) -> float:
    if cfg.epochs <= 1:
        return cfg.w_lr
    t = min(epoch, cfg.epochs - 1) / (cfg.epochs - 1)
    return cfg.w_lr_min + 0.5 * (cfg.w_lr - cfg.w_lr_min) * (1 + math.cos(math.pi * t))


def set_w_lr(state: SearchState, lr: float) -> None:
    for group in state.w_optimizer.param_groups:
        group["lr"] = lr


def _step_masks(state: SearchState, stream: int, count: int):
    return [generate_mask(state.mask_spec,
                          step_mask_seed(state.cfg.seed, state.step, stream, i))
            for i in range(count)]


def _check_finite(loss: torch.Tensor, state: SearchState, context: str) -> None:
    if not torch.isfinite(loss).all():
        raise DivergenceError(
            f"non-finite {context} loss at step {state.step}",
            diagnostics={"step": state.step, "epoch": state.epoch,
                         "context": context, "loss": float(loss.item())})


def weight_step(state: SearchState, train_batch: torch.Tensor) -> float:
    """One SGD step on the supernet weights; architecture params untouched."""
    masks = _step_masks(state, TRAIN_STREAM, train_batch.shape[0])
    loss = reconstruction_loss(state.supernet, state.decoder, train_batch, masks)
    _check_finite(loss.value, state, "train")
    state.w_optimizer.zero_grad(set_to_none=True)
    for p in state.supernet.arch_parameters():
        p.grad = None
    loss.value.backward()
    torch.nn.utils.clip_grad_norm_(
        [p for g in state.w_optimizer.param_groups for p in g["params"]],
        state.cfg.grad_clip)
    state.w_optimizer.step()
    # Weight steps must not leave gradients behind on alpha.
    for p in state.supernet.arch_parameters():
        p.grad = None
    return float(loss.value.item())


def alpha_step(state: SearchState, val_batch: torch.Tensor,
               train_batch: torch.Tensor | None = None) -> float:
    """One Adam step on the architecture parameters.

    First-order mode holds the weights fixed.  Second-order mode uses the
    unrolled approximation: gradients are taken at virtual weights advanced
    by one inner SGD step, with a finite-difference correction term; it
    needs a training batch for the unroll.
    """
    if state.cfg.order == "second":
        if train_batch is None:
            raise ValueError("second-order alpha step needs a training batch")
        return _alpha_step_second(state, val_batch, train_batch)
    masks = _step_masks(state, VAL_STREAM, val_batch.shape[0])
    loss = reconstruction_loss(state.supernet, state.decoder, val_batch, masks)
    _check_finite(loss.value, state, "val")
    state.alpha_optimizer.zero_grad(set_to_none=True)
    loss.value.backward()
    state.alpha_optimizer.step()
    # First-order alpha steps must not leave gradients behind on weights.
    for p in state.supernet.weight_parameters():
        p.grad = None
    for p in state.decoder.parameters():
        p.grad = None
    return float(loss.value.item())


def _w_params(state: SearchState) -> list[torch.nn.Parameter]:
    return [p for g in state.w_optimizer.param_groups for p in g["params"]]


def _alpha_step_second(state: SearchState, val_batch: torch.Tensor,
                       train_batch: torch.Tensor) -> float:
    cfg = state.cfg
    xi = state.w_optimizer.param_groups[0]["lr"]
    params = _w_params(state)
    backup = [p.detach().clone() for p in params]

    train_masks = _step_masks(state, TRAIN_STREAM, train_batch.shape[0])
    val_masks = _step_masks(state, VAL_STREAM, val_batch.shape[0])

    # Virtual step: w' = w - xi * dL_train/dw.
    t_loss = reconstruction_loss(state.supernet, state.decoder, train_batch, train_masks)
    _check_finite(t_loss.value, state, "train(unrolled)")
    grads = torch.autograd.grad(t_loss.value, params, allow_unused=True)
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is not None:
                p.sub_(xi * g)

    # Validation gradients at w' w.r.t. both alpha and w'.
    v_loss = reconstruction_loss(state.supernet, state.decoder, val_batch, val_masks)
    _check_finite(v_loss.value, state, "val(unrolled)")
    alphas = state.supernet.arch_parameters()
    v_grads = torch.autograd.grad(v_loss.value, alphas + params, allow_unused=True)
    alpha_grads = list(v_grads[:len(alphas)])
    w_grads = [g if g is not None else torch.zeros_like(p)
               for g, p in zip(v_grads[len(alphas):], params)]

    # Finite-difference Hessian-vector product around the original weights.
    norm = math.sqrt(sum(float((g * g).sum()) for g in w_grads)) + 1e-12
    eps = 0.01 / norm
    with torch.no_grad():
        for p, w0, g in zip(params, backup, w_grads):
            p.copy_(w0 + eps * g)
    plus = torch.autograd.grad(
        reconstruction_loss(state.supernet, state.decoder, train_batch,
                            train_masks).value, alphas, allow_unused=True)
    with torch.no_grad():
        for p, w0, g in zip(params, backup, w_grads):
            p.copy_(w0 - eps * g)
    minus = torch.autograd.grad(
        reconstruction_loss(state.supernet, state.decoder, train_batch,
                            train_masks).value, alphas, allow_unused=True)
    with torch.no_grad():
        for p, w0 in zip(params, backup):
            p.copy_(w0)

    state.alpha_optimizer.zero_grad(set_to_none=True)
    for a, g, gp, gm in zip(alphas, alpha_grads, plus, minus):
        correction = ((gp if gp is not None else 0) - (gm if gm is not None else 0)) \
            / (2 * eps)
        total = (g if g is not None else 0) - xi * correction
        a.grad = total if isinstance(total, torch.Tensor) else torch.zeros_like(a)
    state.alpha_optimizer.step()
    for p in params:
        p.grad = None
    return float(v_loss.value.item())


@dataclass
class SearchResult:
    state: SearchState
    genotype: Genotype
    metrics: list[dict] = field(default_factory=list)


def run_search(cfg: SearchConfig, dataset: ImageDataset,
               supernet_cfg: SupernetConfig | None = None,
               decoder_cfg: DecoderConfig | None = None,
               out_dir: str | Path | None = None,
               config_hash: str = "",
               resume_from: str | Path | None = None,
               max_epochs_this_run: int | None = None,
               device: str = "cpu",
               on_step: Callable[[SearchState], None] | None = None) -> SearchResult:
    """Run the full alternating search; label-free (labels are ignored).

    Emits one metric record per step.  With `out_dir`, metrics stream to
    metrics.jsonl, a checkpoint is written per epoch, and the final genotype
    to genotype.json.  On a non-finite loss the run aborts with
    DivergenceError; checkpoints written so far are retained.

    `max_epochs_this_run` bounds how many epochs this invocation executes;
    a later call with `resume_from` continues the identical trajectory.
    """
    if resume_from is not None:
        state = load_checkpoint(resume_from, image_hw=dataset.image_hw,
                                supernet_cfg=supernet_cfg, decoder_cfg=decoder_cfg,
                                expect_config_hash=config_hash or None, device=device)
        cfg = state.cfg
    else:
        state = build_search_state(cfg, dataset.image_hw, supernet_cfg, decoder_cfg,
                                   device=device)
    train_ds, val_ds = dataset.split(cfg.split_fraction, cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a" if resume_from else "w")

    from .collapse import count_skip_connections

    last_epoch = cfg.epochs
    if max_epochs_this_run is not None:
        last_epoch = min(last_epoch, state.epoch + max_epochs_this_run)

    metrics: list[dict] = []
    train_images, val_images = train_ds.images, val_ds.images
    try:
        for epoch in range(state.epoch, last_epoch):
            lr = cosine_lr(cfg, epoch)
            set_w_lr(state, lr)
            train_sched = batch_indices(len(train_ds), cfg.batch_size, epoch, cfg.seed)
            val_sched = batch_indices(len(val_ds), cfg.batch_size, epoch, cfg.seed + 1)
            for it, tidx in enumerate(train_sched):
                vidx = val_sched[it % len(val_sched)]
                train_batch = train_images[torch.from_numpy(tidx)].to(device)
                val_batch = val_images[torch.from_numpy(vidx)].to(device)
                val_loss = alpha_step(state, val_batch, train_batch)
                train_loss = weight_step(state, train_batch)
                record = {
                    "step": state.step,
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "val_loss": val_loss,
                    "skip_count_snapshot": count_skip_connections(state.genotype()),
                    "lr": lr,
                }
                metrics.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                    metrics_fh.flush()
                if on_step is not None:
                    on_step(state)
                state.step += 1
            state.epoch = epoch + 1
            if out is not None:
                save_checkpoint(state, out / "checkpoints" / "latest",
                                config_hash=config_hash)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    genotype = state.genotype()
    if out is not None:
        save_checkpoint(state, out / "checkpoints" / "final", config_hash=config_hash)
        genotype.save(out / "genotype.json")
    return SearchResult(state=state, genotype=genotype, metrics=metrics)


def save_checkpoint(state: SearchState, path_prefix: str | Path,
                    config_hash: str = "") -> Path:
    """Weight blob + JSON metadata; the metadata pins schema, step and hash."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    blob_path = prefix.with_suffix(".pt")
    meta_path = prefix.with_suffix(".json")
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "search_config": asdict(state.cfg),
        "supernet_state": state.supernet.state_dict(),
        "decoder_state": state.decoder.state_dict(),
        "w_optimizer_state": state.w_optimizer.state_dict(),
        "alpha_optimizer_state": state.alpha_optimizer.state_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "torch_rng_state": torch.get_rng_state(),
    }
    tmp = blob_path.with_suffix(".pt.tmp")
    torch.save(payload, tmp)
    digest = hashlib.sha256(tmp.read_bytes()).hexdigest()
    tmp.replace(blob_path)
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "step": state.step,
        "epoch": state.epoch,
        "config_hash": config_hash,
        "blob_sha256": digest,
    }
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return blob_path


def load_checkpoint(path_prefix: str | Path, image_hw: tuple[int, int],
                    supernet_cfg: SupernetConfig | None = None,
                    decoder_cfg: DecoderConfig | None = None,
                    expect_config_hash: str | None = None,
                    device: str = "cpu") -> SearchState:
    prefix = Path(path_prefix)
    blob_path = prefix.with_suffix(".pt")
    meta_path = prefix.with_suffix(".json")
    if not blob_path.exists() or not meta_path.exists():
        raise CheckpointError(f"checkpoint {prefix} is missing its .pt or .json half")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema_version {meta.get('schema_version')} unsupported, "
            f"expected {CHECKPOINT_SCHEMA_VERSION}")
    digest = hashlib.sha256(blob_path.read_bytes()).hexdigest()
    if digest != meta.get("blob_sha256"):
        raise CheckpointError(
            f"checkpoint blob hash mismatch for {blob_path}: "
            f"file has {digest}, metadata says {meta.get('blob_sha256')}")
    if expect_config_hash is not None and meta.get("config_hash") \
            and meta["config_hash"] != expect_config_hash:
        raise CheckpointError(
            f"checkpoint was produced by config {meta['config_hash']}, "
            f"current config is {expect_config_hash}")
    payload = torch.load(blob_path, weights_only=False, map_location=device)
    cfg = SearchConfig(**payload["search_config"])
    state = build_search_state(cfg, image_hw, supernet_cfg, decoder_cfg, device=device)
    state.supernet.load_state_dict(payload["supernet_state"])
    state.decoder.load_state_dict(payload["decoder_state"])
    state.w_optimizer.load_state_dict(payload["w_optimizer_state"])
    state.alpha_optimizer.load_state_dict(payload["alpha_optimizer_state"])
    state.step = payload["step"]
    state.epoch = payload["epoch"]
    torch.set_rng_state(payload["torch_rng_state"].cpu().to(torch.uint8))
    return state
