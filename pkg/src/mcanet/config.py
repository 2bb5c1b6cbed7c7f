"""Variant presets and strict JSON run configuration.

Presets carry the published hyper-parameters of the three model sizes plus
the desk-scale "micro" setup used by tests and smoke training. Config
documents are validated with an unknown-keys-rejected policy so ablation
flag typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .decoder import AblationFlags, DecoderSpec, MCANet
from .encoder import EncoderSpec
from .errors import ConfigError

__all__ = ["VariantSpec", "TrainSettings", "SynthSettings", "RunConfig",
           "PRESETS", "build_model", "load_config", "config_from_dict"]


@dataclass(frozen=True)
class VariantSpec:
    """Complete hyper-parameter bundle of one network variant."""

    name: str
    encoder: EncoderSpec
    decoder: DecoderSpec


def _preset(name, channels, blocks, c, heads, in_channels=3):
    return VariantSpec(
        name=name,
        encoder=EncoderSpec(channels=channels, blocks=blocks, in_channels=in_channels),
        decoder=DecoderSpec(channels=c, heads=heads),
    )


PRESETS: dict[str, VariantSpec] = {
    "mcanet-t": _preset("mcanet-t", (32, 64, 160, 256), (3, 3, 5, 2), 64, 8),
    "mcanet-s": _preset("mcanet-s", (64, 128, 320, 512), (2, 2, 4, 2), 128, 8),
    "mcanet-b": _preset("mcanet-b", (64, 128, 320, 512), (3, 3, 12, 3), 128, 8),
    # Desk-scale configuration for CPU tests; not a published variant.
    "micro": _preset("micro", (8, 16, 32, 64), (1, 1, 1, 1), 16, 4, in_channels=1),
}


def build_model(spec: VariantSpec, seed: int = 0) -> MCANet:
    return MCANet(spec.encoder, spec.decoder, seed=seed)


@dataclass(frozen=True)
class SynthSettings:
    """Parameters of the built-in synthetic dataset generator."""

    task: str = "binary_lesion"
    count: int = 64
    height: int = 64
    width: int = 64
    seed: int = 1
    num_labels: int = 3  # foreground labels for the multi-organ task


@dataclass(frozen=True)
class TrainSettings:
    optimizer: str = "adamw"
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 2000
    batch_size: int = 8
    seed: int = 0
    precision: str = "float32"
    val_fraction: float = 0.2
    eval_interval: int = 0
    lr_decay: bool = False
    data: SynthSettings = field(default_factory=SynthSettings)

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32/float64, got {self.precision!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs: variant, ablations, training settings."""

    variant: VariantSpec
    train: TrainSettings = field(default_factory=TrainSettings)


def _take(doc: dict, allowed: dict, where: str) -> dict:
    """Pop known keys with type coercion; reject anything left over."""
    out = {}
    doc = dict(doc)
    for key, conv in allowed.items():
        if key in doc:
            out[key] = conv(doc.pop(key))
    if doc:
        bad = sorted(doc)[0]
        raise ConfigError(f"unknown key {bad!r} in {where}")
    return out


def _int_tuple(v):
    return tuple(int(x) for x in v)


def config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from a JSON document, preset-based or explicit."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    doc = dict(doc)

    preset_name = doc.pop("preset", None)
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; "
                              f"choose from {sorted(PRESETS)}")
        base = PRESETS[preset_name]
    else:
        base = PRESETS["micro"]

    enc = base.encoder
    if "encoder" in doc:
        fields = _take(doc.pop("encoder"), {
            "channels": _int_tuple, "blocks": _int_tuple, "in_channels": int,
        }, "encoder")
        enc = replace(enc, **fields)
    if "in_channels" in doc:
        enc = replace(enc, in_channels=int(doc.pop("in_channels")))

    dec = base.decoder
    if "decoder" in doc:
        fields = _take(doc.pop("decoder"), {
            "channels": int, "heads": int, "kernel_sizes": _int_tuple,
        }, "decoder")
        dec = replace(dec, **fields)
    if "num_classes" in doc:
        dec = replace(dec, num_classes=int(doc.pop("num_classes")))

    if "ablation" in doc:
        fields = _take(doc.pop("ablation"), {
            "multi_scale": bool, "attention_mode": str,
            "residual_input": bool, "use_e1": str,
        }, "ablation")
        dec = replace(dec, ablation=replace(dec.ablation, **fields))

    train = TrainSettings()
    if "train" in doc:
        tdoc = dict(doc.pop("train"))
        synth = SynthSettings()
        if "data" in tdoc:
            dfields = _take(tdoc.pop("data"), {
                "task": str, "count": int, "height": int, "width": int,
                "seed": int, "num_labels": int,
            }, "train.data")
            synth = replace(synth, **dfields)
        tfields = _take(tdoc, {
            "optimizer": str, "lr": float, "betas": lambda v: tuple(float(x) for x in v),
            "momentum": float, "weight_decay": float, "iterations": int,
            "batch_size": int, "seed": int, "precision": str,
            "val_fraction": float, "eval_interval": int, "lr_decay": bool,
        }, "train")
        train = replace(train, data=synth, **tfields)

    if doc:
        bad = sorted(doc)[0]
        raise ConfigError(f"unknown key {bad!r} in config")

    name = preset_name or "custom"
    return RunConfig(variant=VariantSpec(name=name, encoder=enc, decoder=dec), train=train)


def load_config(source: str | Path) -> RunConfig:
    """Load a config from a preset name or a JSON file path."""
    text = str(source)
    if text in PRESETS:
        return config_from_dict({"preset": text})
    path = Path(text)
    if not path.exists():
        raise ConfigError(f"config {text!r} is neither a preset name nor a file")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    """Serialize a RunConfig back to the JSON document shape."""
    v, t = cfg.variant, cfg.train
    return {
        "preset": v.name if v.name in PRESETS else None,
        "encoder": {"channels": list(v.encoder.channels),
                    "blocks": list(v.encoder.blocks),
                    "in_channels": v.encoder.in_channels},
        "decoder": {"channels": v.decoder.channels, "heads": v.decoder.heads,
                    "kernel_sizes": list(v.decoder.kernel_sizes)},
        "num_classes": v.decoder.num_classes,
        "ablation": {"multi_scale": v.decoder.ablation.multi_scale,
                     "attention_mode": v.decoder.ablation.attention_mode,
                     "residual_input": v.decoder.ablation.residual_input,
                     "use_e1": v.decoder.ablation.use_e1},
        "train": {"optimizer": t.optimizer, "lr": t.lr, "betas": list(t.betas),
                  "momentum": t.momentum, "weight_decay": t.weight_decay,
                  "iterations": t.iterations, "batch_size": t.batch_size,
                  "seed": t.seed, "precision": t.precision,
                  "val_fraction": t.val_fraction, "eval_interval": t.eval_interval,
                  "lr_decay": t.lr_decay,
                  "data": {"task": t.data.task, "count": t.data.count,
                           "height": t.data.height, "width": t.data.width,
                           "seed": t.data.seed, "num_labels": t.data.num_labels}},
    }
