"""Layered run configuration with a flat `section.key = value` file format.

Resolution order: built-in defaults, then the config file, then command-line
`--set key=value` overrides. Values are JSON literals (numbers, true/false,
null, strings, lists); `#` starts a comment. Unknown keys and invariant
violations are errors naming the offending key path. The fully resolved
mapping is echoed into each run's output directory for provenance.
"""

import json
from dataclasses import dataclass
from pathlib import Path

from vamae.data import SynthConfig
from vamae.errors import ConfigError
from vamae.losses import LossWeights
from vamae.masking import CurriculumSchedule
from vamae.model import ModelConfig
from vamae.priors import FrangiParams
from vamae.train import FinetuneConfig, PretrainConfig

DEFAULTS = {
    "seed": 0,
    # architecture (desk scale; ModelConfig.paper_scale() documents full size)
    "model.image_size": 64,
    "model.patch_size": 8,
    "model.encoder_depth": 4,
    "model.encoder_dim": 64,
    "model.encoder_heads": 4,
    "model.decoder_depth": 2,
    "model.decoder_dim": 32,
    "model.decoder_heads": 4,
    "model.head_hidden_dims": [32],
    # masking policy
    "mask.alpha": 0.6,
    "mask.curriculum": None,  # [[start, end, ratio], ...] or null for reference scaled
    "mask.ratio_override": None,
    # losses
    "loss.w_intensity": 0.3,
    "loss.w_vesselness": 0.5,
    "loss.w_skeleton": 0.2,
    "loss.pos_weight": 15.0,
    # lr schedule
    "sched.warmup_epochs": 10,
    "sched.peak_lr": 1e-4,
    # training
    "train.epochs": 30,
    "train.batch_size": 8,
    "train.weight_decay": 0.05,
    "train.beta1": 0.9,
    "train.beta2": 0.95,
    "train.checkpoint_interval": 0,
    "train.stage1_epochs": 20,
    "train.stage2_epochs": 80,
    "train.stage1_lr": 1e-4,
    "train.stage2_lr": 1e-5,
    "train.label_fraction": 1.0,
    "train.augment": True,
    # synthetic data + priors
    "data.image_size": 64,
    "data.n_images": 200,
    "data.vessel_count": [2, 4],
    "data.width_range": [2.0, 5.0],
    "data.branch_probability": 0.3,
    "data.noise_std": 0.08,
    "data.split_ratios": [0.64, 0.16, 0.20],
    "data.frangi_scales": [0.5, 1.0, 1.5, 2.0, 2.5],
    "data.frangi_beta": 0.5,
    "data.frangi_c": None,
}

_BOOL_KEYS = {"train.augment"}
_INT_KEYS = {
    "seed",
    "model.image_size",
    "model.patch_size",
    "model.encoder_depth",
    "model.encoder_dim",
    "model.encoder_heads",
    "model.decoder_depth",
    "model.decoder_dim",
    "model.decoder_heads",
    "train.epochs",
    "train.batch_size",
    "train.checkpoint_interval",
    "train.stage1_epochs",
    "train.stage2_epochs",
    "data.image_size",
    "data.n_images",
}
_LIST_KEYS = {
    "model.head_hidden_dims",
    "mask.curriculum",
    "data.vessel_count",
    "data.width_range",
    "data.split_ratios",
    "data.frangi_scales",
}
_OPTIONAL_KEYS = {"mask.curriculum", "mask.ratio_override", "data.frangi_c"}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse `key = value` lines into a dict of raw values."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        try:
            values[key] = json.loads(value.strip())
        except json.JSONDecodeError as err:
            raise ConfigError(
                f"{source}:{lineno}: value for {key!r} is not a JSON literal: {err}"
            ) from err
    return values


def _coerce(key, value):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    if value is None:
        if key in _OPTIONAL_KEYS:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if key in _LIST_KEYS:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    return float(value)


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved and validated configuration."""

    values: tuple  # sorted (key, json-encoded value) pairs

    def __getitem__(self, key):
        return dict(self.values)[key]

    def as_dict(self) -> dict:
        return dict(self.values)

    @property
    def seed(self) -> int:
        return self["seed"]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self["model.image_size"],
            patch_size=self["model.patch_size"],
            encoder_depth=self["model.encoder_depth"],
            encoder_dim=self["model.encoder_dim"],
            encoder_heads=self["model.encoder_heads"],
            decoder_depth=self["model.decoder_depth"],
            decoder_dim=self["model.decoder_dim"],
            decoder_heads=self["model.decoder_heads"],
            head_hidden_dims=tuple(self["model.head_hidden_dims"]),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            intensity=self["loss.w_intensity"],
            vesselness=self["loss.w_vesselness"],
            skeleton=self["loss.w_skeleton"],
        )

    def curriculum(self) -> CurriculumSchedule | None:
        raw = self["mask.curriculum"]
        if raw is None:
            return None
        return CurriculumSchedule(tuple((int(s), int(e), float(r)) for s, e, r in raw))

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            peak_lr=self["sched.peak_lr"],
            warmup_epochs=self["sched.warmup_epochs"],
            weight_decay=self["train.weight_decay"],
            betas=(self["train.beta1"], self["train.beta2"]),
            alpha=self["mask.alpha"],
            loss_weights=self.loss_weights(),
            curriculum=self.curriculum(),
            ratio_override=self["mask.ratio_override"],
            checkpoint_interval=self["train.checkpoint_interval"],
            seed=self.seed,
        )

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(
            stage1_epochs=self["train.stage1_epochs"],
            stage2_epochs=self["train.stage2_epochs"],
            stage1_lr=self["train.stage1_lr"],
            stage2_lr=self["train.stage2_lr"],
            batch_size=self["train.batch_size"],
            pos_weight=self["loss.pos_weight"],
            augment=self["train.augment"],
            seed=self.seed,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            image_size=self["data.image_size"],
            n_images=self["data.n_images"],
            vessel_count=tuple(int(v) for v in self["data.vessel_count"]),
            width_range=tuple(float(v) for v in self["data.width_range"]),
            branch_probability=self["data.branch_probability"],
            background_noise_std=self["data.noise_std"],
            seed=self.seed,
        )

    def frangi_params(self) -> FrangiParams:
        return FrangiParams(
            scales=tuple(float(s) for s in self["data.frangi_scales"]),
            beta=self["data.frangi_beta"],
            c=self["data.frangi_c"],
        )

    def label_fraction(self) -> float:
        return self["train.label_fraction"]

    def split_ratios(self) -> tuple[float, float, float]:
        return tuple(float(r) for r in self["data.split_ratios"])

    def to_text(self) -> str:
        lines = [f"{k} = {json.dumps(v)}" for k, v in self.values]
        return "\n".join(lines) + "\n"


def _validate(values: dict) -> None:
    def check(cond, key, message):
        if not cond:
            raise ConfigError(f"{key}: {message} (got {values[key]!r})")

    check(0.0 <= values["mask.alpha"] <= 1.0, "mask.alpha", "must be in [0, 1]")
    ro = values["mask.ratio_override"]
    if ro is not None:
        check(0.0 < ro < 1.0, "mask.ratio_override", "must be in (0, 1)")
    for key in ("loss.w_intensity", "loss.w_vesselness", "loss.w_skeleton"):
        check(values[key] >= 0.0, key, "must be >= 0")
    check(values["loss.pos_weight"] > 0.0, "loss.pos_weight", "must be > 0")
    check(values["sched.peak_lr"] > 0.0, "sched.peak_lr", "must be > 0")
    check(
        0 <= values["sched.warmup_epochs"] < values["train.epochs"],
        "sched.warmup_epochs",
        f"must be in [0, train.epochs={values['train.epochs']})",
    )
    for key in ("train.epochs", "train.batch_size", "train.stage1_epochs",
                "train.stage2_epochs", "data.n_images"):
        check(values[key] >= 1, key, "must be >= 1")
    check(values["train.checkpoint_interval"] >= 0, "train.checkpoint_interval", "must be >= 0")
    check(0.0 < values["train.label_fraction"] <= 1.0, "train.label_fraction",
          "must be in (0, 1]")
    ratios = values["data.split_ratios"]
    check(len(ratios) == 3 and abs(sum(ratios) - 1.0) < 1e-9, "data.split_ratios",
          "must be 3 ratios summing to 1")


def resolve_config(path=None, overrides=None) -> RunConfig:
    """Defaults <- file <- overrides; validates everything up front.

    `overrides` are "key=value" strings from the command line.
    """
    values = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        for key, raw in parse_config_text(p.read_text(), source=str(p)).items():
            values[key] = _coerce(key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        try:
            parsed = json.loads(raw.strip())
        except json.JSONDecodeError as err:
            raise ConfigError(f"override {key!r}: not a JSON literal: {err}") from err
        values[key] = _coerce(key, parsed)

    _validate(values)
    cfg = RunConfig(values=tuple(sorted(values.items(), key=lambda kv: kv[0])))
    # construct every derived config now so invariant violations fail fast
    try:
        cfg.model_config()
        cfg.loss_weights()
        cfg.pretrain_config().resolved_curriculum()
        cfg.finetune_config()
        cfg.synth_config()
        cfg.frangi_params()
    except (ValueError, ConfigError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from err
    return cfg


def echo_config(cfg: RunConfig, out_dir) -> None:
    """Write the resolved configuration into a run's output directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.to_text())
