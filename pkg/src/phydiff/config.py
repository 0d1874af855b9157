"""Flat ``key = value`` run configuration with dotted section keys."""

from __future__ import annotations

from .errors import ConfigError


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(","))


def _floats(text):
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(","))


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key: (default, parser, description)
DEFAULTS = {
    "run.seed": (0, int, "master seed for training and sampling"),
    "phantom.slices": (16, int, "phantom slice count"),
    "phantom.height": (64, int, "phantom rows"),
    "phantom.width": (64, int, "phantom columns"),
    "phantom.tracts": (3, int, "number of synthetic tracts (<= 42)"),
    "phantom.shells": ((1000.0, 2000.0), _floats, "shell b-values in s/mm^2"),
    "phantom.dirs": (16, int, "directions per shell"),
    "phantom.b0": (1, int, "number of b=0 volumes"),
    "phantom.noise": (0.0, float, "Rician noise sigma"),
    "phantom.seed": (0, int, "phantom geometry seed"),
    "data.split": ((7, 1, 1), _ints, "train:val:test ratio of directions per shell"),
    "data.split_seed": (0, int, "seed of the direction split"),
    "schedule.T": (1000, int, "diffusion steps"),
    "schedule.beta1": (1e-4, float, "first noise variance"),
    "schedule.betaT": (0.02, float, "last noise variance"),
    "schedule.scale_betas": (True, _bool, "rescale the beta range by 1000/T"),
    "schedule.kappa": (0.5, float, "physics modulation strength"),
    "schedule.delta": (1e-8, float, "retention-range degeneracy threshold"),
    "schedule.adc_mean": (False, _bool, "average instead of sum directional ADCs"),
    "model.patch_size": (4, int, "patch size"),
    "model.widths": ((64, 128, 256), _ints, "token widths of the three levels"),
    "model.blocks": (1, int, "transformer blocks per level"),
    "model.mid_blocks": (2, int, "global-attention bottleneck blocks"),
    "model.na_window": (7, int, "neighborhood attention window (odd)"),
    "model.head_dim": (32, int, "attention head width"),
    "cond.width": (256, int, "guidance vector width"),
    "cond.ffn_blocks": (2, int, "GEGLU blocks in the condition mapper"),
    "cond.max_slices": (128, int, "slice-index embedding table size"),
    "adapter.xi": (1.0, float, "enrichment correction factor"),
    "adapter.enabled": (True, _bool, "use the tract adapter when a stage-2 checkpoint is given"),
    "train.stage": ("denoiser", str, "denoiser or adapter"),
    "train.lr": (5e-4, float, "AdamW learning rate"),
    "train.lr_schedule": ("constant", str, "constant, or cosine decay to zero over the step budget"),
    "train.weight_decay": (1e-4, float, "AdamW weight decay"),
    "train.beta1": (0.9, float, "AdamW first-moment decay"),
    "train.beta2": (0.95, float, "AdamW second-moment decay"),
    "train.eps": (1e-8, float, "AdamW epsilon"),
    "train.batch_size": (32, int, "batch size"),
    "train.max_epochs": (80, int, "epoch cap"),
    "train.max_steps": (0, int, "optimizer step cap, 0 = unlimited"),
    "train.patience": (10, int, "early-stopping patience in epochs, 0 = off"),
    "train.val_items": (64, int, "validation items per epoch"),
    "sample.batch_size": (16, int, "images denoised together"),
}


class RunConfig:
    def __init__(self, values: dict | None = None):
        self._values = {k: v[0] for k, v in DEFAULTS.items()}
        for key, value in (values or {}).items():
            self[key] = value

    def __getitem__(self, key):
        return self._values[key]

    def __setitem__(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        parser = DEFAULTS[key][1]
        try:
            self._values[key] = parser(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None

    def __contains__(self, key):
        return key in self._values

    def items(self):
        return self._values.items()

    def copy(self):
        return RunConfig(dict(self._values))

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self._values.items() if k.startswith(prefix)}

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self._values.items())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg[key] = value
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def __repr__(self):
        return f"RunConfig({self._values!r})"
