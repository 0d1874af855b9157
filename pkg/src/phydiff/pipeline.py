"""Glue between :class:`RunConfig` and the modules: build, train, sample."""

from __future__ import annotations

import numpy as np
import torch

from .adapter import TractAdapter
from .config import RunConfig
from .dataset import DiffusionData
from .denoiser import HDiTConfig, PhyDiffModel
from .engine import (
    SampleRequest,
    TrainConfig,
    Trainer,
    build_shell_schedules,
    make_checkpoint,
    model_eps_fn,
    restore_generator,
    restore_module,
    sample,
)
from .errors import ConfigError
from .physics import scaled_beta_range
from .phantom import PhantomSpec, make_phantom, simulate_dwi
from .volume_io import center_crop


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def phantom_spec(cfg: RunConfig) -> PhantomSpec:
    p = cfg.section("phantom")
    return PhantomSpec(
        slices=p["slices"],
        height=p["height"],
        width=p["width"],
        n_tracts=p["tracts"],
        shells=tuple(p["shells"]),
        dirs_per_shell=p["dirs"],
        n_b0=p["b0"],
        noise_sigma=p["noise"],
        seed=p["seed"],
    )


def build_phantom(cfg: RunConfig):
    phantom = make_phantom(phantom_spec(cfg))
    return phantom, simulate_dwi(phantom)


def build_data(cfg: RunConfig, stack, atlas=None) -> DiffusionData:
    multiple = cfg["model.patch_size"] * 4
    return DiffusionData(
        stack, atlas, ratio=cfg["data.split"], split_seed=cfg["data.split_seed"], multiple=multiple, xi=cfg["adapter.xi"]
    )


def model_config(cfg: RunConfig, image_size) -> HDiTConfig:
    return HDiTConfig(
        image_size=tuple(image_size),
        patch_size=cfg["model.patch_size"],
        level_widths=cfg["model.widths"],
        blocks_per_level=cfg["model.blocks"],
        mid_blocks=cfg["model.mid_blocks"],
        na_window=cfg["model.na_window"],
        head_dim=cfg["model.head_dim"],
        cond_width=cfg["cond.width"],
        cond_ffn_blocks=cfg["cond.ffn_blocks"],
        max_slices=cfg["cond.max_slices"],
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    s, t = cfg.section("schedule"), cfg.section("train")
    beta1, betaT = s["beta1"], s["betaT"]
    if s["scale_betas"]:
        beta1, betaT = scaled_beta_range(s["T"], beta1, betaT)
    return TrainConfig(
        T=s["T"],
        beta1=beta1,
        betaT=betaT,
        kappa=s["kappa"],
        delta=s["delta"],
        adc_mean=s["adc_mean"],
        lr=t["lr"],
        lr_schedule=t["lr_schedule"],
        weight_decay=t["weight_decay"],
        betas=(t["beta1"], t["beta2"]),
        eps=t["eps"],
        batch_size=t["batch_size"],
        max_epochs=t["max_epochs"],
        max_steps=t["max_steps"],
        early_stop_patience=t["patience"],
        val_items=t["val_items"],
        seed=cfg["run.seed"],
        stage=t["stage"],
    )


def build_models(cfg: RunConfig, data: DiffusionData, seed: int):
    if data.slice_count > cfg["cond.max_slices"]:
        raise ConfigError(f"{data.slice_count} slices exceed cond.max_slices={cfg['cond.max_slices']}")
    seed_everything(seed)
    mcfg = model_config(cfg, data.image_size)
    model = PhyDiffModel(mcfg)
    adapter = TractAdapter(mcfg)
    return model, adapter


def train(cfg: RunConfig, data: DiffusionData, init_checkpoint=None, callback=None):
    """Run one training stage; returns (model, adapter, result, checkpoint)."""
    tcfg = train_config(cfg)
    model, adapter = build_models(cfg, data, tcfg.seed)
    generator = None
    if tcfg.stage == "adapter":
        if init_checkpoint is None:
            raise ConfigError("adapter stage requires a stage-1 (denoiser) checkpoint")
        if init_checkpoint.stage not in ("denoiser", "adapter"):
            raise ConfigError(f"unknown checkpoint stage {init_checkpoint.stage!r}")
        restore_module(model, init_checkpoint, "model")
        if data.atlas is None:
            raise ConfigError("adapter stage requires a tract atlas")
    elif init_checkpoint is not None:
        restore_module(model, init_checkpoint, "model")
        generator = restore_generator(init_checkpoint)
    schedules = build_shell_schedules(data, tcfg)
    trainer = Trainer(model, data, schedules, tcfg, adapter=adapter, generator=generator)
    result = trainer.fit(callback)
    keep_adapter = adapter if tcfg.stage == "adapter" else None
    ckpt = make_checkpoint(model, cfg.to_text(), tcfg.stage, keep_adapter, trainer.generator)
    return model, keep_adapter, result, ckpt


def load_models(ckpt, data: DiffusionData):
    """Rebuild model (and adapter for stage-2 checkpoints) from a checkpoint."""
    cfg = RunConfig.from_text(ckpt.config_text)
    model, adapter = build_models(cfg, data, cfg["run.seed"])
    restore_module(model, ckpt, "model")
    if ckpt.stage == "adapter" and cfg["adapter.enabled"]:
        restore_module(adapter, ckpt, "adapter")
    else:
        adapter = None
    model.eval()
    return cfg, model, adapter


def requests_for(data: DiffusionData, split: str = "test"):
    vols = data.splits[split]
    reqs = []
    for v in vols:
        for z in range(data.slice_count):
            reqs.append(
                SampleRequest(tuple(data.raw.bvecs[v]), float(data.raw.bvals[v]), z, int(data.vol_shell[v]))
            )
    return vols, reqs


def synthesize(cfg: RunConfig, model, data: DiffusionData, split="test", seed=0, adapter=None):
    """Sample every slice of every direction in ``split``.

    Returns (volume indices, samples (V, Z, H, W) in the original grid).
    """
    tcfg = train_config(cfg)
    schedules = build_shell_schedules(data, tcfg)
    vols, reqs = requests_for(data, split)
    eps_model = model_eps_fn(model, data.context, adapter, data.atlas if adapter is not None else None)
    shape = (1, *data.image_size)
    imgs = sample(eps_model, reqs, schedules, shape, seed=seed, batch_size=cfg["sample.batch_size"])
    imgs = imgs[:, 0].numpy().reshape(len(vols), data.slice_count, *data.image_size)
    return vols, crop_to(imgs, data.orig_size)


def crop_to(imgs, size):
    return np.ascontiguousarray(center_crop(imgs, *size))
