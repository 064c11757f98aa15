"""Declarative run configuration: presets, YAML overrides, stage hashing.

A run is described by one ``RunConfig``; every pipeline stage depends on a
declared subset of its sections plus the upstream stage, and each stage's
identity hash chains over those (Merkle style). Artifacts record their stage
hash, so resuming, cross-variant artifact reuse and refusal of mismatched
inputs all reduce to hash comparison.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .adaptation import AdaptConfig
from .errors import ConfigError
from .nets import DiscriminatorConfig, GeneratorConfig, UNetConfig
from .segmentation import SegLossConfig, SupervisedConfig
from .translation import TranslationConfig
from .volume_io import DomainAppearance, PhantomSpec

VARIANTS = ("full", "seg_only_disc", "s1_only", "no_adapt")

METHOD_LABELS = {
    "full": "C-MADA",
    "seg_only_disc": "C-MADA[seg]",
    "s1_only": "S1+U-Net",
    "s1_only_residual": "S1+residualU-Net",
    "no_adapt": "U-Net (source only)",
}

# canonical ablation-table row order; unknown labels sort after these
REPORT_ORDER = ("C-MADA", "C-MADA[seg]", "S1+residualU-Net", "S1+U-Net")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "phantom"           # "phantom" or "manifest"
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    manifest_path: str = ""

    def __post_init__(self):
        if self.kind not in ("phantom", "manifest"):
            raise ConfigError(f"dataset kind must be phantom|manifest, got {self.kind!r}")
        if self.kind == "manifest" and not self.manifest_path:
            raise ConfigError("manifest datasets need manifest_path")


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple = (1.25, 1.25, 1.0)
    target_shape: tuple = (64, 64, 16)
    clip: bool = True

    def __post_init__(self):
        if len(self.target_spacing) != 3 or min(self.target_spacing) <= 0:
            raise ConfigError(f"bad target_spacing {self.target_spacing}")
        if len(self.target_shape) != 3 or min(self.target_shape) < 1:
            raise ConfigError(f"bad target_shape {self.target_shape}")


@dataclass(frozen=True)
class SelectionConfig:
    holdout_fraction: float = 0.2
    classes: tuple = (1, 2)

    def __post_init__(self):
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in (0, 1)")
        if not self.classes:
            raise ConfigError("selection needs at least one foreground class")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    supervised: SupervisedConfig = field(default_factory=SupervisedConfig)
    adaptation: AdaptConfig = field(default_factory=AdaptConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    seed: int = 0
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def method_label(self) -> str:
        if self.variant == "s1_only" and self.supervised.unet.residual:
            return METHOD_LABELS["s1_only_residual"]
        return METHOD_LABELS[self.variant]


def stage_plan(variant: str) -> tuple:
    """Stages a variant runs, in order (report is cross-variant)."""
    if variant in ("full", "seg_only_disc"):
        return ("synth", "preprocess", "translate", "train-seg", "adapt", "select", "evaluate")
    if variant == "s1_only":
        return ("synth", "preprocess", "translate", "train-seg", "evaluate")
    if variant == "no_adapt":
        return ("synth", "preprocess", "train-seg", "evaluate")
    raise ConfigError(f"unknown variant {variant!r}")


def ablation_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """Derive the configuration for one ablation arm.

    seg_only_disc restricts the phase-2 discriminator input to the class
    probabilities; s1_only stops after supervised training; no_adapt also
    skips translation and trains directly on source-domain slices.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    out = replace(cfg, variant=variant)
    disc_input = "seg_only" if variant == "seg_only_disc" else "full"
    if cfg.adaptation.disc_input != disc_input:
        out = replace(out, adaptation=replace(cfg.adaptation, disc_input=disc_input))
    return out


# -- serialization to/from plain dicts (YAML surface) ---------------------------------

_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "preprocess": PreprocessConfig,
    "translation": TranslationConfig,
    "supervised": SupervisedConfig,
    "adaptation": AdaptConfig,
    "selection": SelectionConfig,
}

_NESTED_TYPES = {
    "phantom": PhantomSpec,
    "source": DomainAppearance,
    "target": DomainAppearance,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "unet": UNetConfig,
    "loss": SegLossConfig,
    "seg": SegLossConfig,
}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        target = names[key].type
        if key in _NESTED_TYPES and isinstance(value, dict):
            kwargs[key] = _build(_NESTED_TYPES[key], value, f"{path}.{key}")
        elif isinstance(value, list):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    unknown = set(data) - set(_SECTION_TYPES) - {"seed", "variant"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            kwargs[name] = _build(cls, data[name], name)
    if "seed" in data:
        kwargs["seed"] = int(data["seed"])
    if "variant" in data:
        kwargs["variant"] = str(data["variant"])
    return RunConfig(**kwargs)


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(config_path=None, preset: str = "desk", seed=None, variant=None) -> RunConfig:
    """Preset defaults, overlaid with the YAML document, then CLI overrides."""
    base = config_to_dict(preset_config(preset))
    if config_path is not None:
        doc = yaml.safe_load(Path(config_path).read_text())
        if doc is None:
            doc = {}
        base = _deep_merge(base, doc)
    cfg = config_from_dict(base)
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if variant is not None:
        cfg = ablation_variant(cfg, variant)
    else:
        cfg = ablation_variant(cfg, cfg.variant)
    return cfg


# -- presets ---------------------------------------------------------------------------


def preset_config(name: str) -> RunConfig:
    """Built-in configurations: laptop-scale default and the clinical-protocol
    preset (spacing 0.468x0.468x1.5 mm, grid 448x448x120, 40/500/100 epochs)."""
    if name == "desk":
        return RunConfig(
            dataset=DatasetConfig(phantom=PhantomSpec(
                n_source=5, n_target=5,
                grid_shape=(80, 80, 16), spacing=(1.0, 1.0, 1.0),
                tumor_radius=(10.0, 16.0), tumor_z_radius=(3.5, 6.0),
                cochlea_radius=(3.0, 5.0), cochlea_z_radius=(1.5, 3.0),
                source=DomainAppearance(class_means=(30.0, 70.0, 95.0),
                                        noise_level=2.0, bias_amplitude=4.0),
                target=DomainAppearance(class_means=(30.0, 70.0, 95.0),
                                        invert_contrast=True,
                                        noise_level=2.0, bias_amplitude=6.0))),
            preprocess=PreprocessConfig(target_spacing=(1.25, 1.25, 1.0),
                                        target_shape=(64, 64, 16)),
            translation=TranslationConfig(
                epochs=12, batch_size=4,
                generator=GeneratorConfig(base_width=12, res_blocks=6),
                discriminator=DiscriminatorConfig(base_width=16)),
            supervised=SupervisedConfig(
                epochs=30, batch_size=4, lr=1e-3,
                unet=UNetConfig(base_width=16, levels=4)),
            adaptation=AdaptConfig(
                epochs=6, batch_size=4, snapshot_interval=20,
                lr_gen=2e-4, lr_disc=1e-4, disc_base_width=16),
            selection=SelectionConfig(),
        )
    if name == "crossmoda":
        return RunConfig(
            dataset=DatasetConfig(phantom=PhantomSpec(
                n_source=5, n_target=5,
                grid_shape=(448, 448, 120), spacing=(0.468, 0.468, 1.5))),
            preprocess=PreprocessConfig(target_spacing=(0.468, 0.468, 1.5),
                                        target_shape=(448, 448, 120)),
            translation=TranslationConfig(
                epochs=40, batch_size=1,
                generator=GeneratorConfig(base_width=32, res_blocks=9),
                discriminator=DiscriminatorConfig(base_width=64)),
            supervised=SupervisedConfig(
                epochs=500, batch_size=4,
                unet=UNetConfig(base_width=32, levels=4)),
            adaptation=AdaptConfig(epochs=100, batch_size=4, snapshot_interval=500,
                                   disc_base_width=64),
            selection=SelectionConfig(),
        )
    raise ConfigError(f"unknown preset {name!r} (expected desk or crossmoda)")


# -- hashing ---------------------------------------------------------------------------


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def stage_hashes(cfg: RunConfig) -> dict:
    """Chained per-stage identity hashes for this configuration."""
    d = config_to_dict(cfg)
    plan = stage_plan(cfg.variant)
    hashes = {}
    h = _digest({"stage": "synth", "dataset": d["dataset"], "seed": cfg.seed})
    hashes["synth"] = h
    h = _digest({"stage": "preprocess", "parent": h, "preprocess": d["preprocess"]})
    hashes["preprocess"] = h
    if "translate" in plan:
        h_tr = _digest({"stage": "translate", "parent": hashes["preprocess"],
                        "translation": d["translation"], "seed": cfg.seed})
        hashes["translate"] = h_tr
        seg_parent, seg_route = h_tr, "mapped_source"
    else:
        seg_parent, seg_route = hashes["preprocess"], "source"
    h_seg = _digest({"stage": "train-seg", "parent": seg_parent, "route": seg_route,
                     "supervised": d["supervised"], "seed": cfg.seed,
                     "holdout_fraction": d["selection"]["holdout_fraction"]})
    hashes["train-seg"] = h_seg
    if "adapt" in plan:
        h_ad = _digest({"stage": "adapt", "parent": h_seg,
                        "adaptation": d["adaptation"], "seed": cfg.seed})
        hashes["adapt"] = h_ad
        h_sel = _digest({"stage": "select", "parent": h_ad,
                         "selection": d["selection"], "seed": cfg.seed})
        hashes["select"] = h_sel
        eval_parent = h_sel
    else:
        eval_parent = h_seg
    hashes["evaluate"] = _digest({"stage": "evaluate", "parent": eval_parent})
    return hashes
