"""Three-class detection data (clean / noisy / adversarial), the MLP detector, scoring and AUC."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import rankdata

from .features import Extractor, reconstruction_error
from .reconstruction import VaeModel, reconstruct
from .utils import batches, generator, load_checkpoint, load_state_strict, predict, save_checkpoint

log = logging.getLogger(__name__)

CLEAN, NOISY, ADVERSARIAL = 0, 1, 2
CLASS_NAMES = {CLEAN: "clean", NOISY: "noisy", ADVERSARIAL: "adversarial"}

# (learning rate, weight decay) per training attack; momentum is 0.9 throughout
_LR_WD = {
    ("FRD", "CIFAR10"): {"PGD": (1e-2, 5e-4), "BIM": (1e-2, 5e-3), "FGSM": (1e-2, 5e-3), "DEEPFOOL": (1e-2, 5e-3), "CW": (1e-2, 5e-3)},
    ("FRD", "CIFAR100"): {"PGD": (5e-2, 5e-4), "BIM": (1e-2, 5e-3), "FGSM": (1e-2, 5e-3), "DEEPFOOL": (5e-2, 5e-4), "CW": (1e-2, 5e-3)},
    ("PRD", "CIFAR10"): {"PGD": (1e-2, 5e-4), "BIM": (1e-2, 5e-3), "FGSM": (1e-2, 5e-3), "DEEPFOOL": (1e-2, 5e-3), "CW": (1e-2, 5e-3)},
    ("PRD", "CIFAR100"): {"PGD": (1e-2, 5e-4), "BIM": (1e-2, 5e-3), "FGSM": (1e-2, 5e-3), "DEEPFOOL": (1e-2, 5e-4), "CW": (1e-2, 5e-3)},
}


@dataclass
class DetectorConfig:
    hidden: int = 128
    epochs: int = 60
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0


def detector_config_for(method: str, dataset: str, family: str, **overrides) -> DetectorConfig:
    """Default optimiser settings for a detector trained on ``family`` examples."""
    key = "PGD" if family.startswith("PGD") else family
    lr, wd = _LR_WD[(method, dataset)][key]
    return DetectorConfig(learning_rate=lr, weight_decay=wd, **overrides)


@dataclass
class DetectionSample:
    feature: torch.Tensor
    label: int
    provenance: dict


@dataclass
class DetectionSet:
    features: torch.Tensor  # [N, D]
    labels: torch.Tensor  # [N]
    source_index: torch.Tensor  # index of the originating clean image
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[DetectionSample]:
        for f, l in zip(self.features, self.labels.tolist()):
            yield DetectionSample(f, l, self.provenance)

    def class_counts(self) -> dict[str, int]:
        return {name: int((self.labels == c).sum()) for c, name in CLASS_NAMES.items()}

    def subset(self, idx: torch.Tensor) -> "DetectionSet":
        return DetectionSet(self.features[idx], self.labels[idx], self.source_index[idx], dict(self.provenance))

    @staticmethod
    def concat(parts: list["DetectionSet"], **provenance) -> "DetectionSet":
        return DetectionSet(
            torch.cat([p.features for p in parts]),
            torch.cat([p.labels for p in parts]),
            torch.cat([p.source_index for p in parts]),
            provenance,
        )


def build_detection_dataset(
    clean: torch.Tensor,
    noisy: torch.Tensor,
    adversarial: torch.Tensor,
    labels: torch.Tensor,
    victim: nn.Module,
    vaes: dict[str, VaeModel],
    extractor: Extractor,
    variant: str,
    adversarial_keep: torch.Tensor | None = None,
    provenance: dict | None = None,
) -> DetectionSet:
    """Reconstruct the three aligned sets and turn them into labelled features.

    Clean and noisy samples are kept only where the victim classifies them
    correctly. ``adversarial_keep`` is an optional mask chosen by the caller
    (e.g. only attacks that fooled their source model).
    """
    if not (clean.shape == noisy.shape == adversarial.shape):
        raise ValueError("clean, noisy and adversarial batches must be aligned")
    keep = {
        CLEAN: predict(victim, clean) == labels,
        NOISY: predict(victim, noisy) == labels,
        ADVERSARIAL: torch.ones(len(labels), dtype=torch.bool) if adversarial_keep is None else adversarial_keep,
    }
    parts = []
    for cls, images in ((CLEAN, clean), (NOISY, noisy), (ADVERSARIAL, adversarial)):
        idx = keep[cls].nonzero().flatten()
        if len(idx) == 0:
            raise ValueError(f"no {CLASS_NAMES[cls]} samples left after filtering")
        x = images[idx]
        feats = reconstruction_error(extractor, x, reconstruct(vaes, x, variant)).vector
        parts.append(DetectionSet(feats, torch.full((len(idx),), cls, dtype=torch.long), idx))
    out = DetectionSet.concat(parts, **(provenance or {}))
    log.info("detection set %s: %s", (provenance or {}).get("name", ""), out.class_counts())
    return out


def stratified_split(labels: torch.Tensor, test_fraction: float = 0.3, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    gen = generator(seed)
    train, test = [], []
    for c in labels.unique().tolist():
        idx = (labels == c).nonzero().flatten()
        idx = idx[torch.randperm(len(idx), generator=gen)]
        n_test = int(round(len(idx) * test_fraction))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return torch.cat(train).sort().values, torch.cat(test).sort().values


class DetectorModel(nn.Module):
    """Two fully connected layers over standardized reconstruction-error features."""

    def __init__(self, input_dim: int, config: DetectorConfig, fingerprint: str = ""):
        super().__init__()
        self.config = config
        self.input_dim = input_dim
        self.fingerprint = fingerprint
        self.fc1 = nn.Linear(input_dim, config.hidden)
        self.fc2 = nn.Linear(config.hidden, 3)
        self.register_buffer("mean", torch.zeros(input_dim))
        self.register_buffer("std", torch.ones(input_dim))
        self.history: list[float] = []

    def forward(self, features):
        z = (features - self.mean) / self.std
        return self.fc2(F.relu(self.fc1(z)))


class DetectorTrainingError(RuntimeError):
    pass


def train_detector(
    features: torch.Tensor,
    labels: torch.Tensor,
    config: DetectorConfig | None = None,
    fingerprint: str = "",
) -> DetectorModel:
    config = config or DetectorConfig()
    if len(labels.unique()) < 2:
        raise ValueError("detector training needs at least two classes")
    torch.manual_seed(config.seed)
    model = DetectorModel(features.shape[1], config, fingerprint)
    model.mean.copy_(features.mean(0))
    model.std.copy_(features.std(0).clamp_min(1e-6))
    opt = torch.optim.SGD(
        model.parameters(), lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay
    )
    gen = generator(config.seed)
    stable = copy.deepcopy(model.state_dict())
    for epoch in range(config.epochs):
        model.train()
        total = 0.0
        for idx in batches(len(labels), config.batch_size, torch.randperm(len(labels), generator=gen)):
            loss = F.cross_entropy(model(features[idx]), labels[idx])
            if not torch.isfinite(loss):
                model.load_state_dict(stable)
                raise DetectorTrainingError(f"non-finite detector loss at epoch {epoch + 1}; kept last stable state")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        model.history.append(total / len(labels))
        stable = copy.deepcopy(model.state_dict())
    return model.eval()


@torch.no_grad()
def class_probabilities(detector: DetectorModel, features: torch.Tensor) -> torch.Tensor:
    if features.dim() != 2 or features.shape[1] != detector.input_dim:
        raise ValueError(f"feature width {tuple(features.shape)} does not match detector input {detector.input_dim}")
    detector.eval()
    return F.softmax(detector(features), dim=1)


def score(detector: DetectorModel, features: torch.Tensor, merge: str = "one_minus_clean") -> torch.Tensor:
    """Adversarial-ness in [0, 1] with the noisy and adversarial classes merged.

    ``one_minus_clean`` is 1 - P(clean); ``sum_positive`` is P(noisy) + P(adversarial).
    The two agree up to float rounding.
    """
    p = class_probabilities(detector, features)
    if merge == "one_minus_clean":
        return 1.0 - p[:, CLEAN]
    if merge == "sum_positive":
        return p[:, NOISY] + p[:, ADVERSARIAL]
    raise ValueError(f"unknown merge rule {merge!r}")


def evaluate_auc(scores, is_adversarial) -> float:
    """ROC AUC via the Mann-Whitney rank statistic; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(is_adversarial, dtype=bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined unless both classes are present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def detection_auc(detector: DetectorModel, data: DetectionSet) -> float:
    return evaluate_auc(score(detector, data.features).numpy(), (data.labels != CLEAN).numpy())


def save_detector(detector: DetectorModel, path, **extra) -> Path:
    return save_checkpoint(
        path, "detector", detector.config, detector.state_dict(),
        input_dim=detector.input_dim, fingerprint=detector.fingerprint, history=detector.history, **extra,
    )


def load_detector(
    path,
    expected_fingerprint: str | None = None,
    expected_hash: str | None = None,
    force: bool = False,
    expected_stage: str | None = None,
) -> DetectorModel:
    payload = load_checkpoint(path, "detector", expected_hash, force, expected_stage)
    if expected_fingerprint is not None and payload["fingerprint"] != expected_fingerprint:
        raise ValueError(f"{path}: detector built for extractor {payload['fingerprint']}, not {expected_fingerprint}")
    model = DetectorModel(payload["input_dim"], DetectorConfig(**payload["config"]), payload["fingerprint"])
    load_state_strict(model, payload["state_dict"], path)
    model.history = list(payload.get("history", []))
    return model.eval()


def write_scores_csv(path, scores, labels, setting: str, sample_ids=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    ids = range(len(scores)) if sample_ids is None else sample_ids
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "score", "label", "setting"])
        for i, s, l in zip(ids, scores, labels):
            w.writerow([int(i), f"{s:.6f}", int(l), setting])
    return path
