"""Training, ancestral sampling and checkpointing."""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .adapter import TractAdapter
from .denoiser import PhyDiffModel
from .errors import ConfigError, DivergenceError, FormatError, VersionError
from .physics import (
    NoiseScheduleBase,
    ScheduleMap,
    build_base_schedule,
    build_schedule_map,
    estimate_adc_atlas,
    forward_noise,
)
from .volume_io import pad_center

log = logging.getLogger(__name__)

STAGES = ("denoiser", "adapter")
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    T: int = 1000
    beta1: float = 1e-4
    betaT: float = 0.02
    kappa: float = 0.5
    delta: float = 1e-8
    adc_mean: bool = False
    lr: float = 5e-4
    lr_schedule: str = "constant"
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 80
    max_steps: int = 0
    early_stop_patience: int = 10
    val_items: int = 64
    seed: int = 0
    stage: str = "denoiser"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        for name in ("lr", "eps", "batch_size", "T"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


# -- schedules --------------------------------------------------------------


class ShellSchedules:
    """Per-shell schedule maps as tensors, indexed by (t, shell, slice)."""

    def __init__(self, maps: list[ScheduleMap], image_size=None):
        self.maps = maps
        ab = maps[0].alpha_bars
        if any(not np.array_equal(m.alpha_bars, ab) for m in maps):
            raise ConfigError("all shells must share one base schedule")
        exps = [m.exponent for m in maps]
        if image_size is not None:
            exps = [pad_center(e, *image_size, value=1.0) for e in exps]
        self.alpha_bars = torch.as_tensor(ab, dtype=torch.float64)
        self.exponent = torch.as_tensor(np.stack(exps), dtype=torch.float64)
        self.shell_bvals = [m.shell_bval for m in maps]

    @property
    def T(self) -> int:
        return len(self.alpha_bars)

    def phi(self, t, shell, slice_index) -> torch.Tensor:
        """(B, H, W) cumulative retention; t = 0 gives ones."""
        w = self.exponent[shell, slice_index]
        ab = torch.where(t > 0, self.alpha_bars[(t - 1).clamp(min=0)], torch.ones((), dtype=torch.float64))
        ab = ab[:, None, None].expand_as(w)
        return torch.where(w == 1.0, ab, ab**w)


def build_shell_schedules(data, cfg: TrainConfig) -> ShellSchedules:
    """ADC atlases from the training directions, one schedule map per shell."""
    base = build_base_schedule(cfg.T, cfg.beta1, cfg.betaT)
    maps = []
    for shell in data.shells:
        atlas = estimate_adc_atlas(data.raw, shell, mean=cfg.adc_mean, directions=data.splits["train"])
        maps.append(build_schedule_map(atlas, base, cfg.kappa, cfg.delta))
    return ShellSchedules(maps, data.image_size)


# -- training ---------------------------------------------------------------


class EarlyStopping:
    """Signals a stop once the metric fails to improve for ``patience`` updates."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.patience > 0 and self.bad_epochs >= self.patience


def noise_loss(model, batch, schedules: ShellSchedules, generator, adapter=None):
    x0 = batch["x0"]
    n = x0.shape[0]
    t = torch.randint(1, schedules.T + 1, (n,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    phi = schedules.phi(t, batch["shell"], batch["slice"]).to(x0.dtype)[:, None]
    x_t = forward_noise(x0, phi, eps)
    feats = adapter(batch["atlas"]) if adapter is not None else None
    pred = model(x_t, batch["context"], t, batch["bvec"], batch["bval"], batch["slice"], feats)
    return F.mse_loss(pred, eps)


def training_step(model, optimizer, batch, schedules, generator, adapter=None) -> float:
    """One simplified-loss step: sample t and noise, regress the noise, update."""
    loss = noise_loss(model, batch, schedules, generator, adapter)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def set_stage(model: PhyDiffModel, adapter: TractAdapter | None, stage: str):
    """Toggle trainable parameters; returns the list handed to the optimizer."""
    if stage == "denoiser":
        model.requires_grad_(True)
        if adapter is not None:
            adapter.requires_grad_(False)
        return list(model.parameters())
    if adapter is None:
        raise ConfigError("adapter stage needs an adapter")
    model.requires_grad_(False)
    adapter.requires_grad_(True)
    return list(adapter.parameters())


def make_optimizer(params, cfg: TrainConfig):
    return torch.optim.AdamW(
        params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay
    )


def make_lr_scheduler(optimizer, cfg: TrainConfig, total_steps: int):
    """Per-step LR multiplier; ``cosine`` reaches zero after ``total_steps``."""
    if cfg.lr_schedule == "constant":
        return None

    def factor(step):
        return 0.5 * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)  # per step
    val_losses: list = field(default_factory=list)  # per epoch
    steps: int = 0
    epochs: int = 0
    stopped_early: bool = False


class Trainer:
    def __init__(self, model, data, schedules, cfg: TrainConfig, adapter=None, generator=None):
        self.model = model
        self.adapter = adapter
        self.data = data
        self.schedules = schedules
        self.cfg = cfg
        if generator is None:
            generator = torch.Generator().manual_seed(cfg.seed)
        self.generator = generator
        self.params = set_stage(model, adapter, cfg.stage)
        self.optimizer = make_optimizer(self.params, cfg)
        if cfg.stage == "adapter" and data.atlas is None:
            raise ConfigError("adapter stage needs a tract atlas")

    def _active_adapter(self):
        return self.adapter if self.cfg.stage == "adapter" else None

    @torch.no_grad()
    def validation_loss(self) -> float:
        items = self.data.items("val")
        if not items:
            return math.nan
        g = torch.Generator().manual_seed(self.cfg.seed + 7919)
        order = torch.randperm(len(items), generator=g)[: self.cfg.val_items].tolist()
        sel = [items[i] for i in order]
        total = 0.0
        for start in range(0, len(sel), self.cfg.batch_size):
            batch = self.data.batch(sel[start : start + self.cfg.batch_size])
            loss = noise_loss(self.model, batch, self.schedules, g, self._active_adapter())
            total += float(loss) * batch["x0"].shape[0]
        return total / len(sel)

    def fit(self, callback=None) -> TrainResult:
        cfg = self.cfg
        items = self.data.items("train")
        stopper = EarlyStopping(cfg.early_stop_patience)
        result = TrainResult()
        adapter = self._active_adapter()
        per_epoch = -(-len(items) // cfg.batch_size)
        total = min(cfg.max_steps or math.inf, cfg.max_epochs * per_epoch)
        scheduler = make_lr_scheduler(self.optimizer, cfg, max(int(total), 1))
        self.model.train()
        for epoch in range(cfg.max_epochs):
            order = torch.randperm(len(items), generator=self.generator).tolist()
            for start in range(0, len(order), cfg.batch_size):
                batch = self.data.batch([items[i] for i in order[start : start + cfg.batch_size]])
                loss = training_step(self.model, self.optimizer, batch, self.schedules, self.generator, adapter)
                if scheduler is not None:
                    scheduler.step()
                result.losses.append(loss)
                result.steps += 1
                if callback is not None:
                    callback(result)
                if cfg.max_steps and result.steps >= cfg.max_steps:
                    break
            result.epochs = epoch + 1
            val = self.validation_loss()
            result.val_losses.append(val)
            log.info("epoch %d step %d train %.4f val %.4f", epoch + 1, result.steps, loss, val)
            if cfg.max_steps and result.steps >= cfg.max_steps:
                break
            if not math.isnan(val) and stopper.update(val):
                result.stopped_early = True
                break
        self.model.eval()
        return result


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


# -- reverse process --------------------------------------------------------


def _sqrt(x):
    return torch.sqrt(x) if isinstance(x, torch.Tensor) else np.sqrt(x)


def posterior_step(x_t, eps_hat, phi_t, phi_prev, z):
    """Elementwise DDPM posterior step with per-voxel cumulative schedules."""
    alpha = phi_t / phi_prev
    coef = (1 - alpha) / _sqrt(1 - phi_t)
    mean = (x_t - coef * eps_hat) / _sqrt(alpha)
    var = ((1 - phi_prev) / (1 - phi_t)) * (1 - alpha)
    return mean + _sqrt(var) * z


def reverse_step(x_t, eps_hat, t: int, schedule: ScheduleMap, z, slice_index=None):
    """One reverse step using ``schedule.phi_at``; ``slice_index`` selects a slice."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    sel = slice(None) if slice_index is None else slice_index
    return posterior_step(x_t, eps_hat, schedule.phi_at(t, sel), schedule.phi_at(t - 1, sel), z)


def ddpm_reverse_step(x_t, eps_hat, t: int, base: NoiseScheduleBase, z):
    """Scalar-schedule DDPM step (reference for the per-voxel version)."""
    if not 1 <= t <= base.T:
        raise ValueError(f"t={t} outside [1, {base.T}]")
    ab_t, ab_prev = base.alpha_bar(t), base.alpha_bar(t - 1)
    alpha = ab_t / ab_prev
    coef = (1 - alpha) / math.sqrt(1 - ab_t)
    mean = (x_t - coef * eps_hat) / math.sqrt(alpha)
    var = ((1 - ab_prev) / (1 - ab_t)) * (1 - alpha)
    return mean + math.sqrt(var) * z


def image_generator(seed: int, index: int) -> torch.Generator:
    """Independent RNG stream for image ``index`` of a run seeded by ``seed``."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


@dataclass
class SampleRequest:
    bvec: tuple
    bval: float
    slice_index: int
    shell: int


@torch.no_grad()
def sample(
    eps_model,
    requests: list[SampleRequest],
    schedules: ShellSchedules,
    shape,
    seed: int = 0,
    deterministic: bool = False,
    batch_size: int = 16,
    start_index: int = 0,
):
    """Ancestral sampling from pure noise for every request.

    ``eps_model(x_t, t, items)`` returns the noise prediction for the batch
    ``items`` (a list of requests).  Each image draws from its own RNG
    stream, so results do not depend on ``batch_size``.  ``deterministic``
    zeroes the per-step noise.  Returns float64 images clamped to [-1, 1].
    """
    out = []
    for start in range(0, len(requests), batch_size):
        chunk = requests[start : start + batch_size]
        gens = [image_generator(seed, start_index + start + i) for i in range(len(chunk))]
        x = torch.stack([torch.randn(shape, generator=g, dtype=torch.float64) for g in gens])
        shell = torch.tensor([r.shell for r in chunk])
        slices = torch.tensor([r.slice_index for r in chunk])
        for t in range(schedules.T, 0, -1):
            tt = torch.full((len(chunk),), t, dtype=torch.long)
            phi_t = schedules.phi(tt, shell, slices)[:, None]
            phi_prev = schedules.phi(tt - 1, shell, slices)[:, None]
            eps_hat = eps_model(x, tt, chunk).to(torch.float64)
            if t > 1 and not deterministic:
                z = torch.stack([torch.randn(shape, generator=g, dtype=torch.float64) for g in gens])
            else:
                z = torch.zeros_like(x)
            x = posterior_step(x, eps_hat, phi_t, phi_prev, z)
        out.append(x.clamp(-1.0, 1.0))
    return torch.cat(out)


def model_eps_fn(model: PhyDiffModel, context, adapter=None, atlas=None):
    """Wrap a trained model as ``eps_model(x_t, t, requests)`` for :func:`sample`.

    ``context`` is (Z, H, W) and ``atlas`` is (42, Z, H, W), both normalized.
    """
    dtype = model.backbone.pos.dtype
    ctx = torch.as_tensor(context, dtype=dtype)
    atl = None if atlas is None else torch.as_tensor(atlas, dtype=dtype)

    def eps_model(x_t, t, requests):
        slices = torch.tensor([r.slice_index for r in requests])
        bvec = torch.tensor([list(r.bvec) for r in requests], dtype=dtype)
        bval = torch.tensor([r.bval for r in requests], dtype=dtype)
        feats = None
        if adapter is not None and atl is not None:
            feats = adapter(atl[:, slices].transpose(0, 1))
        return model(x_t.to(dtype), ctx[slices][:, None], t, bvec, bval, slices, feats)

    return eps_model


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"PDCKPT\n"
CKPT_VERSION = 1
_DTYPE_NAMES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8"), "u8": np.dtype("u1")}
_DTYPE_TAGS = {"f4": "f32", "f8": "f64", "i8": "i64", "u1": "u8"}


def _dtype_tag(arr) -> str:
    code = np.dtype(arr.dtype).str[1:]
    if code not in _DTYPE_TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return _DTYPE_TAGS[code]


@dataclass
class Checkpoint:
    tensors: dict  # name -> numpy array
    config_text: str
    stage: str
    rng_state: bytes = b""

    def manifest(self) -> str:
        lines = []
        for name, arr in self.tensors.items():
            tag = _dtype_tag(arr)
            dims = ",".join(str(d) for d in arr.shape) or "-"
            lines.append(f"{name} {tag} {dims}\n")
        return "".join(lines)


def _pack_bytes(buf: io.BytesIO, data: bytes):
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    for name, arr in ckpt.tensors.items():
        if any(c.isspace() for c in name):
            raise FormatError(f"tensor name {name!r} contains whitespace")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    _pack_bytes(buf, ckpt.manifest().encode())
    _pack_bytes(buf, ckpt.config_text.encode())
    _pack_bytes(buf, ckpt.stage.encode())
    _pack_bytes(buf, bytes(ckpt.rng_state))
    for arr in ckpt.tensors.values():
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPE_NAMES[_dtype_tag(arr)]).tobytes())
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def _unpack_bytes(buf: bytes, offset: int):
    if offset + 4 > len(buf):
        raise FormatError("checkpoint header truncated")
    (n,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if offset + n > len(buf):
        raise FormatError("checkpoint header truncated")
    return buf[offset : offset + n], offset + n


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if not buf.startswith(CKPT_MAGIC):
        raise FormatError("missing checkpoint magic")
    offset = len(CKPT_MAGIC)
    if offset + 4 > len(buf):
        raise FormatError("checkpoint header truncated")
    (version,) = struct.unpack_from("<I", buf, offset)
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    offset += 4
    manifest, offset = _unpack_bytes(buf, offset)
    config_text, offset = _unpack_bytes(buf, offset)
    stage, offset = _unpack_bytes(buf, offset)
    rng_state, offset = _unpack_bytes(buf, offset)
    tensors = {}
    for line in manifest.decode().splitlines():
        try:
            name, tag, dims = line.split()
            dtype = _DTYPE_NAMES[tag]
            shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
        except (ValueError, KeyError):
            raise FormatError(f"bad manifest line {line!r}") from None
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(buf):
            raise FormatError(f"payload for {name} truncated")
        tensors[name] = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} bytes not described by the manifest")
    return Checkpoint(tensors, config_text.decode(), stage.decode(), rng_state)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def module_tensors(prefix: str, module) -> dict:
    return {
        f"{prefix}.{name}": t.detach().cpu().numpy().copy() for name, t in module.state_dict().items()
    }


def generator_state(generator: torch.Generator | None) -> bytes:
    return b"" if generator is None else generator.get_state().numpy().tobytes()


def make_checkpoint(model, config_text: str, stage: str, adapter=None, generator=None) -> Checkpoint:
    tensors = module_tensors("model", model)
    if adapter is not None:
        tensors.update(module_tensors("adapter", adapter))
    return Checkpoint(tensors, config_text, stage, generator_state(generator))


def restore_module(module, ckpt: Checkpoint, prefix: str) -> None:
    """Copy ``prefix.*`` tensors into ``module``; shape mismatches raise ConfigError."""
    state = module.state_dict()
    names = {k[len(prefix) + 1 :] for k in ckpt.tensors if k.startswith(prefix + ".")}
    missing = set(state) - names
    extra = names - set(state)
    if missing or extra:
        raise ConfigError(f"checkpoint/{prefix} mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    new = {}
    for name, ref in state.items():
        arr = ckpt.tensors[f"{prefix}.{name}"]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ConfigError(f"{prefix}.{name}: checkpoint shape {arr.shape} vs model {tuple(ref.shape)}")
        new[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    module.load_state_dict(new)


def restore_generator(ckpt: Checkpoint) -> torch.Generator | None:
    if not ckpt.rng_state:
        return None
    g = torch.Generator()
    g.set_state(torch.frombuffer(bytearray(ckpt.rng_state), dtype=torch.uint8))
    return g
