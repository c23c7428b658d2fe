"""Run configuration: INI files, named presets, canonical dumps.

A run is fully described by one flat INI file of ``[section] key = value``
pairs, one section per pipeline concern.  Resolution order: package
defaults, then a named preset, then the config file, then explicit
overrides.  Every hyperparameter any stage consumes lives in a dataclass
here (or in its training module), so the resolved dump is complete: a run
can be reproduced from its dump alone.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .synth import SynthConfig
from .training.classifier import ClassifierConfig
from .training.latent import LatentAEConfig
from .training.ldm import LdmConfig
from .training.phase1 import Phase1Config
from .training.phase2 import Phase2Config


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1
    out: str = "runs/latest"

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")
        if self.seed < 0:
            raise ConfigError(f"seed must not be negative, got {self.seed}")


@dataclass
class GenerateConfig:
    sampler: str = "plms"
    steps: int = 250
    count: int = 0  # 0 = every test sample

    def __post_init__(self):
        if self.sampler not in ("ddpm", "plms"):
            raise ConfigError(f"sampler must be ddpm or plms, got {self.sampler!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be at least 1, got {self.steps}")
        if self.count < 0:
            raise ConfigError(f"count must not be negative, got {self.count}")


@dataclass
class EvalConfig:
    n: int = 10
    k: int = 1
    trials: int = 1000
    # Diagnostic mode: take true classes from stored dataset labels instead
    # of the classifier's verdict on the ground-truth image.
    dataset_labels: bool = False

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"n must be at least 2, got {self.n}")
        if not 1 <= self.k < self.n:
            raise ConfigError(f"need 1 <= k < n, got k={self.k}, n={self.n}")
        if self.trials < 1:
            raise ConfigError(f"trials must be at least 1, got {self.trials}")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    latent_ae: LatentAEConfig = field(default_factory=LatentAEConfig)
    ldm: LdmConfig = field(default_factory=LdmConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)


SECTIONS = [f.name for f in fields(RunConfig)]

# Named presets: section -> key -> value, applied over the defaults.
# desk-default is the tuned full pipeline; desk-smoke is a minutes-scale
# shrink for CI; the remaining presets pin the reference training recipes
# (mask ratio / loss weight pairings, best loss weights, best mask pair,
# deep-decoder variant) for parity runs.
PRESETS: dict[str, dict[str, dict[str, object]]] = {
    "desk-default": {},
    "desk-smoke": {
        "synth": {"n_voxels": 256, "image_size": 16, "n_classes": 4,
                  "n_subjects": 2, "n_train": 32, "n_test": 8},
        "phase1": {"dim": 32, "enc_depth": 2, "dec_depth": 1, "epochs": 2,
                   "batch_size": 8},
        "phase2": {"image_dim": 32, "image_enc_depth": 1, "image_dec_depth": 1,
                   "image_patch": 4, "image_pretrain_epochs": 1, "epochs": 1,
                   "batch_size": 8},
        "latent_ae": {"channels": 8, "epochs": 2, "batch_size": 16},
        "ldm": {"timesteps": 50, "base_channels": 8, "temb_dim": 16,
                "pretrain_epochs": 2, "finetune_epochs": 2, "batch_size": 16,
                "finetune_pairs": 32},
        "classifier": {"base_channels": 8, "epochs": 4},
        "generate": {"steps": 10, "count": 4},
        "evaluate": {"n": 4, "k": 1, "trials": 50},
    },
    "recipe-low-mask": {
        "phase1": {"mask_ratio": 0.5, "gamma_cross": 1.0, "gamma_self": 1.0},
    },
    "recipe-high-mask": {
        "phase1": {"mask_ratio": 0.75, "gamma_cross": 0.5, "gamma_self": 1.0},
    },
    "recipe-loss-weights": {
        "phase2": {"gamma_fmri": 0.25, "gamma_image": 1.5},
    },
    "recipe-mask-pair": {
        "phase2": {"fmri_mask_ratio": 0.75, "image_mask_ratio": 0.5},
    },
    "recipe-deep-decoder": {
        "phase1": {"dec_depth": 6},
    },
}


def default_config() -> RunConfig:
    return RunConfig()


def _coerce(raw: str, target_type, section: str, key: str):
    try:
        if target_type is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return target_type(raw)
    except (TypeError, ValueError):
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {target_type.__name__}") from None


def _set(cfg: RunConfig, section: str, key: str, value) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    sub = getattr(cfg, section)
    by_name = {f.name: f for f in fields(sub)}
    if key not in by_name:
        raise ConfigError(f"unknown key '{key}' in section [{section}]")
    target_type = by_name[key].type
    if isinstance(target_type, str):  # dataclass fields carry string annotations
        target_type = {"int": int, "float": float, "str": str, "bool": bool}[target_type]
    if isinstance(value, str) and target_type is not str:
        value = _coerce(value, target_type, section, key)
    elif target_type is float and isinstance(value, int):
        value = float(value)
    setattr(sub, key, value)


def _revalidate(cfg: RunConfig) -> None:
    """Re-run dataclass validation after field mutation."""
    for section in SECTIONS:
        sub = getattr(cfg, section)
        post = getattr(sub, "__post_init__", None)
        if post is not None:
            post()


def apply_preset(cfg: RunConfig, name: str) -> None:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}', choose from {sorted(PRESETS)}")
    for section, overrides in PRESETS[name].items():
        for key, value in overrides.items():
            _set(cfg, section, key, value)


def load_config(path: str | None = None, preset: str | None = None,
                overrides: dict[tuple[str, str], object] | None = None) -> RunConfig:
    """Defaults <- preset <- file <- overrides, validated."""
    cfg = default_config()
    if preset is not None:
        apply_preset(cfg, preset)
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found or unreadable: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _set(cfg, section, key, raw)
    for (section, key), value in (overrides or {}).items():
        _set(cfg, section, key, value)
    _revalidate(cfg)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Canonical INI text: sections and keys sorted, stable formatting."""
    out = io.StringIO()
    for section in sorted(SECTIONS):
        sub = getattr(cfg, section)
        out.write(f"[{section}]\n")
        for f in sorted(fields(sub), key=lambda f: f.name):
            value = getattr(sub, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            out.write(f"{f.name} = {value}\n")
        out.write("\n")
    return out.getvalue()


def config_as_dict(cfg: RunConfig) -> dict:
    return {section: dataclasses.asdict(getattr(cfg, section)) for section in SECTIONS}
