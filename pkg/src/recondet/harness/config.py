"""Experiment configuration: declarative file (YAML or JSON) plus scale presets.

The scale preset shrinks data subsets, epochs and model widths together so a
complete run fits a desk budget. Any preset field can be overridden through
``scale_overrides``.
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..attacks import AttackSpec, ThreatModelSpec
from ..utils import config_hash, to_jsonable

SCHEMA_VERSION = 1
SETTINGS = ("white-box", "SM-AT", "SM-NT", "EM-AT", "EM-NT")
COMPOSITIONS = ("same-attack", "union-of-six")


@dataclass
class Scale:
    train_subset: int
    classifier_epochs: int
    at_subset: int
    at_epochs: int
    widths: dict
    vae_epochs: int
    vae_channels: tuple
    vae_latent: int
    detect_train: int
    detect_test: int
    detector_epochs: int
    analysis_samples: int
    ctr_samples: int
    accuracy_floor: dict = field(default_factory=lambda: {"NT": 0.6, "AT": 0.3})
    attack_steps: dict = field(default_factory=dict)


SCALES = {
    # seconds-to-minutes smoke run used by the test suite
    "tiny": Scale(
        train_subset=2000, classifier_epochs=3, at_subset=200, at_epochs=1,
        widths={"RESNET18": 4, "VGG16": 4, "WRN28": 1},
        vae_epochs=2, vae_channels=(8, 16, 32, 64), vae_latent=16,
        detect_train=120, detect_test=80, detector_epochs=5,
        analysis_samples=40, ctr_samples=60, accuracy_floor={"NT": 0.0, "AT": 0.0},
        attack_steps={"BIM": 10, "PGD_LINF": 10, "PGD_L2": 10, "CW": 10, "DEEPFOOL": 10},
    ),
    # single-CPU acceptance run (a few hours end to end)
    "desk": Scale(
        train_subset=10000, classifier_epochs=15, at_subset=5000, at_epochs=8,
        widths={"RESNET18": 16, "VGG16": 16, "WRN28": 1},
        vae_epochs=20, vae_channels=(32, 64, 128, 256), vae_latent=128,
        detect_train=5000, detect_test=2000, detector_epochs=60,
        analysis_samples=2000, ctr_samples=1000,
    ),
    "full": Scale(
        train_subset=50000, classifier_epochs=100, at_subset=50000, at_epochs=100,
        widths={"RESNET18": 64, "VGG16": 64, "WRN28": 10},
        vae_epochs=50, vae_channels=(32, 64, 128, 256), vae_latent=128,
        detect_train=7000, detect_test=3000, detector_epochs=100,
        analysis_samples=3000, ctr_samples=3000, accuracy_floor={"NT": 0.8, "AT": 0.6},
    ),
}

_VARIANT_RE = re.compile(r"^(PRD|FRD)-(base|online)(?:\((pha|amp|joint)\))?$")


@dataclass(frozen=True)
class Variant:
    method: str
    extractor: str
    recon: str

    @classmethod
    def parse(cls, name: str) -> "Variant":
        m = _VARIANT_RE.match(name.replace(" ", ""))
        if not m:
            raise ValueError(f"bad variant {name!r}; expected e.g. 'FRD-base(amp)' or 'PRD-online'")
        method, extractor, freq = m.groups()
        if method == "FRD" and freq is None:
            raise ValueError(f"FRD variant {name!r} needs one of (pha|amp|joint)")
        if method == "PRD" and freq is not None:
            raise ValueError(f"PRD variant {name!r} takes no frequency component")
        return cls(method, extractor, "pixel" if method == "PRD" else freq)

    @property
    def name(self) -> str:
        return f"{self.method}-{self.extractor}" + (f"({self.recon})" if self.method == "FRD" else "")


@dataclass
class VaeSettings:
    beta: float = 1e-4
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128


@dataclass
class AnalysisSettings:
    variant: str = "FRD-base(pha)"
    xi: float = 1e-3
    grid: tuple = (4, 4)
    kde_bandwidth: float | None = None
    similarity_layer: str = "penultimate"
    ctr_epsilon: float = 2 / 255
    probe_epsilon: float = 8 / 255


def _default_threats():
    return {
        "SM-NT": [ThreatModelSpec(("VGG16",), "NT", "SINGLE"), ThreatModelSpec(("WRN28",), "NT", "SINGLE")],
        "SM-AT": [ThreatModelSpec(("RESNET18",), "AT", "SINGLE")],
        "EM-NT": [ThreatModelSpec(("VGG16", "WRN28"), "NT", "ENSEMBLE")],
        "EM-AT": [ThreatModelSpec(("VGG16", "WRN28"), "AT", "ENSEMBLE")],
    }


def _six_attacks():
    return [
        AttackSpec("FGSM", 8 / 255),
        AttackSpec("BIM", 8 / 255),
        AttackSpec("PGD_L2", 0.5),
        AttackSpec("PGD_LINF", 8 / 255),
        AttackSpec("DEEPFOOL", 8 / 255),
        AttackSpec("CW", 8 / 255),
    ]


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    dataset: str = "CIFAR10"
    scale: str = "desk"
    scale_overrides: dict = field(default_factory=dict)
    seed: int = 0
    strict_determinism: bool = False
    victim_architecture: str = "RESNET18"
    pretrained_architecture: str = "WRN28"
    threats: dict = field(default_factory=_default_threats)
    variants: list = field(default_factory=lambda: ["FRD-base(amp)"])
    training_attacks: list = field(default_factory=lambda: [AttackSpec("PGD_LINF", 8 / 255)])
    composition: str = "same-attack"
    adversarial_filter: str = "fooled_source"
    layer_ids: list | None = None
    layer_sets: list | None = None
    strengths: list = field(default_factory=lambda: [2, 4, 6, 8])
    strength_variant: str = "FRD-base(pha)"
    vae: VaeSettings = field(default_factory=VaeSettings)
    # VAEs depend only on image shape; a CIFAR-100 run may reuse CIFAR-10 VAEs
    vae_dataset: str | None = None
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"config schema {self.schema_version} unsupported (expected {SCHEMA_VERSION})")
        for name in (self.dataset, self.vae_dataset or self.dataset):
            if name not in ("CIFAR10", "CIFAR100"):
                raise ValueError(f"unknown dataset {name!r}")
        if self.scale not in SCALES:
            raise ValueError(f"unknown scale {self.scale!r}; expected one of {sorted(SCALES)}")
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"unknown composition {self.composition!r}")
        if self.adversarial_filter not in ("none", "fooled_source", "fooled_victim"):
            raise ValueError(f"unknown adversarial filter {self.adversarial_filter!r}")
        if isinstance(self.vae, dict):
            self.vae = VaeSettings(**self.vae)
        if isinstance(self.analysis, dict):
            self.analysis = AnalysisSettings(**self.analysis)
        self.analysis.grid = tuple(self.analysis.grid)
        self.threats = {
            k: [t if isinstance(t, ThreatModelSpec) else ThreatModelSpec(**t) for t in v] for k, v in self.threats.items()
        }
        for k in self.threats:
            if k not in SETTINGS[1:]:
                raise ValueError(f"unknown black-box setting {k!r}")
        self.training_attacks = [a if isinstance(a, AttackSpec) else AttackSpec(**a) for a in self.training_attacks]
        for v in self.variants + [self.strength_variant, self.analysis.variant]:
            Variant.parse(v)
        if self.pretrained_architecture == self.victim_architecture and any(
            Variant.parse(v).extractor == "online" for v in self.variants
        ):
            # same architecture is fine; the online extractor is always a separately seeded checkpoint
            pass

    @property
    def resolved_scale(self) -> Scale:
        base = dataclasses.asdict(SCALES[self.scale])
        unknown = set(self.scale_overrides) - set(base)
        if unknown:
            raise ValueError(f"unknown scale overrides {sorted(unknown)}")
        base.update(self.scale_overrides)
        return Scale(**base)

    def fingerprint(self) -> str:
        payload = to_jsonable(self)
        payload.pop("output_dir")
        return config_hash(payload)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    text = Path(path).read_text()
    raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    raw = raw or {}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    return ExperimentConfig(**raw)


def dump_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(to_jsonable(config), sort_keys=True))
    return path
