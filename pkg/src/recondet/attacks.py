"""White-box and transfer attacks, matched random noise, NT/AT classifier training.

All attacks are non-targeted and operate on images in [0, 1].
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .utils import (
    batches,
    generator,
    load_checkpoint,
    load_state_strict,
    predict,
    save_checkpoint,
    to_jsonable,
)
from .zoo import ARCHITECTURES, TapModel, build_classifier

log = logging.getLogger(__name__)

FAMILIES = ("FGSM", "BIM", "PGD_LINF", "PGD_L2", "DEEPFOOL", "CW")
LINF_FAMILIES = ("FGSM", "BIM", "PGD_LINF")


@dataclass
class AttackSpec:
    family: str = "PGD_LINF"
    epsilon: float = 8 / 255
    steps: int | None = None
    step_size: float | None = None
    targeted: bool = False
    random_start: bool = True
    cw_c: float = 1.0
    cw_lr: float = 0.01
    confidence: float = 0.0
    overshoot: float = 0.02

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; expected one of {FAMILIES}")
        if self.targeted:
            raise ValueError("only non-targeted attacks are supported")
        # epsilon == 0 is allowed: it is the no-signal control
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.family == "FGSM":
            self.steps = 1
        elif self.steps is None:
            self.steps = {"CW": 100, "DEEPFOOL": 50}.get(self.family, 20)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is None:
            self.step_size = self.epsilon if self.family == "FGSM" else self.epsilon / 10

    @property
    def name(self) -> str:
        if self.family in ("DEEPFOOL", "CW"):
            return self.family
        eps = self.epsilon * 255 if self.family != "PGD_L2" else self.epsilon
        return f"{self.family}-{eps:g}"


@dataclass
class ThreatModelSpec:
    architectures: tuple[str, ...] = ("RESNET18",)
    strategy: str = "NT"
    mode: str = "SINGLE"

    def __post_init__(self):
        self.architectures = tuple(self.architectures)
        if self.strategy not in ("NT", "AT"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.mode not in ("SINGLE", "ENSEMBLE"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for arch in self.architectures:
            if arch not in ARCHITECTURES:
                raise ValueError(f"unknown architecture {arch!r}")
        if self.mode == "SINGLE" and len(self.architectures) != 1:
            raise ValueError("SINGLE mode takes exactly one architecture")
        if self.mode == "ENSEMBLE" and len(self.architectures) < 2:
            raise ValueError("ENSEMBLE mode needs at least two architectures")

    @property
    def name(self) -> str:
        return "&".join(self.architectures) + f"({self.strategy})"


class Ensemble(nn.Module):
    """Arithmetic mean of member logits."""

    def __init__(self, members):
        super().__init__()
        self.members = nn.ModuleList(members)

    def forward(self, x):
        if len(self.members) == 1:
            return self.members[0](x)
        return torch.stack([m(x) for m in self.members]).mean(0)


def as_model(models) -> nn.Module:
    if isinstance(models, nn.Module):
        return models
    models = list(models)
    return models[0] if len(models) == 1 else Ensemble(models)


def _input_grad(model, x, labels):
    x = x.detach().requires_grad_(True)
    loss = F.cross_entropy(model(x), labels)
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def _l2(x):
    return x.flatten(1).norm(dim=1).view(-1, *([1] * (x.dim() - 1)))


def _linf_attack(model, x, y, spec: AttackSpec, gen):
    eps, alpha = spec.epsilon, spec.step_size
    if eps == 0:
        return x.clone()
    if spec.family == "FGSM":
        return (x + eps * _input_grad(model, x, y).sign()).clamp(0, 1)
    delta = torch.zeros_like(x)
    if spec.family == "PGD_LINF" and spec.random_start:
        delta = (torch.rand(x.shape, generator=gen) * 2 - 1) * eps
        delta = (x + delta).clamp(0, 1) - x
    for _ in range(spec.steps):
        grad = _input_grad(model, x + delta, y)
        delta = (delta + alpha * grad.sign()).clamp(-eps, eps)
        delta = (x + delta).clamp(0, 1) - x
    return x + delta


def _pgd_l2(model, x, y, spec: AttackSpec, gen):
    eps, alpha = spec.epsilon, spec.step_size
    if eps == 0:
        return x.clone()
    delta = torch.zeros_like(x)
    if spec.random_start:
        delta = torch.randn(x.shape, generator=gen)
        radius = torch.rand(len(x), generator=gen).view(-1, 1, 1, 1) * eps
        delta = delta / _l2(delta).clamp_min(1e-12) * radius
        delta = (x + delta).clamp(0, 1) - x
    for _ in range(spec.steps):
        grad = _input_grad(model, x + delta, y)
        delta = delta + alpha * grad / _l2(grad).clamp_min(1e-12)
        delta = delta * (eps / _l2(delta).clamp_min(1e-12)).clamp(max=1.0)
        delta = (x + delta).clamp(0, 1) - x
    return x + delta


def _deepfool(model, x, y, spec: AttackSpec, stats):
    """Multi-class l2 DeepFool over all classes."""
    x_adv = x.clone()
    active = torch.ones(len(x), dtype=torch.bool)
    r_total = torch.zeros_like(x)
    dead = torch.zeros(len(x), dtype=torch.bool)
    for _ in range(spec.steps):
        idx = active.nonzero().flatten()
        if len(idx) == 0:
            break
        xi = (x[idx] + (1 + spec.overshoot) * r_total[idx]).clamp(0, 1).requires_grad_(True)
        logits = model(xi)
        still = logits.argmax(1) == y[idx]
        if not still.any():
            active[idx] = False
            break
        k = logits.shape[1]
        grads = []
        for c in range(k):
            (g,) = torch.autograd.grad(logits[:, c].sum(), xi, retain_graph=c < k - 1)
            grads.append(g)
        grads = torch.stack(grads, 1)  # [B, K, C, H, W]
        logits = logits.detach()
        ar = torch.arange(len(idx))
        w = grads - grads[ar, y[idx]].unsqueeze(1)
        f = logits - logits[ar, y[idx]].unsqueeze(1)
        wn = w.flatten(2).norm(dim=2)
        ratio = f.abs() / wn.clamp_min(1e-12)
        ratio[ar, y[idx]] = float("inf")
        ratio[wn < 1e-12] = float("inf")
        best = ratio.argmin(1)
        r_best = ratio[ar, best]
        no_dir = ~torch.isfinite(r_best)
        wb = w[ar, best]
        step = (r_best.clamp(max=1e6) + 1e-4).view(-1, 1, 1, 1) * wb / wn[ar, best].clamp_min(1e-12).view(-1, 1, 1, 1)
        step[no_dir] = 0
        upd = still & ~no_dir
        r_total[idx[upd]] += step[upd]
        active[idx[~still]] = False
        dead[idx[still & no_dir]] = True
        active[idx[still & no_dir]] = False
    x_adv = (x + (1 + spec.overshoot) * r_total).clamp(0, 1)
    x_adv[dead] = x[dead]
    stats["fallbacks"] = stats.get("fallbacks", 0) + int(dead.sum())
    return x_adv


def _cw_l2(model, x, y, spec: AttackSpec, stats):
    """Carlini-Wagner l2 with a fixed trade-off constant; keeps the smallest successful perturbation."""
    eps = 1e-6
    w = torch.atanh((x * 2 - 1).clamp(-1 + eps, 1 - eps)).detach().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=spec.cw_lr)
    best = x.clone()
    best_l2 = torch.full((len(x),), float("inf"))
    onehot = F.one_hot(y, num_classes=model(x[:1]).shape[1]).bool()
    for _ in range(spec.steps):
        adv = (torch.tanh(w) + 1) / 2
        logits = model(adv)
        real = logits[onehot]
        other = logits.masked_fill(onehot, -float("inf")).max(1).values
        margin = (real - other + spec.confidence).clamp_min(0)
        dist = (adv - x).flatten(1).pow(2).sum(1)
        loss = (dist + spec.cw_c * margin).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            success = logits.argmax(1) != y
            improved = success & (dist < best_l2)
            best_l2[improved] = dist[improved]
            best[improved] = adv.detach()[improved]
    failed = ~torch.isfinite(best_l2)
    stats["fallbacks"] = stats.get("fallbacks", 0) + int(failed.sum())
    return best


def craft(
    spec: AttackSpec,
    models,
    images: torch.Tensor,
    labels: torch.Tensor,
    seed: int = 0,
    batch_size: int = 250,
    stats: dict | None = None,
) -> torch.Tensor:
    """Craft non-targeted adversarial examples against one model or an ensemble.

    ``models`` is a module or a sequence of modules (mean-logit ensemble).
    Per-sample DeepFool/CW failures fall back to the clean image and are
    counted in ``stats["fallbacks"]``.
    """
    model = as_model(models)
    model.eval()
    stats = {} if stats is None else stats
    stats.setdefault("fallbacks", 0)
    out = []
    for b, idx in enumerate(batches(len(images), batch_size)):
        x, y = images[idx], labels[idx]
        gen = generator(seed * 1_000_003 + b)
        if spec.family in LINF_FAMILIES:
            adv = _linf_attack(model, x, y, spec, gen)
        elif spec.family == "PGD_L2":
            adv = _pgd_l2(model, x, y, spec, gen)
        elif spec.family == "DEEPFOOL":
            adv = _deepfool(model, x, y, spec, stats)
        else:
            adv = _cw_l2(model, x, y, spec, stats)
        out.append(adv.detach())
    adv = torch.cat(out) if out else images.clone()
    if spec.family in LINF_FAMILIES:
        adv = torch.min(torch.max(adv, images - spec.epsilon), images + spec.epsilon).clamp(0, 1)
    if stats["fallbacks"]:
        log.info("%s: %d samples fell back to the clean image", spec.name, stats["fallbacks"])
    return adv


def add_matched_noise(clean: torch.Tensor, adversarial: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Uniform noise whose per-sample l-inf size equals that of ``adversarial - clean``."""
    if clean.shape != adversarial.shape:
        raise ValueError("clean and adversarial batches differ in shape")
    mag = (adversarial - clean).flatten(1).abs().amax(1).view(-1, *([1] * (clean.dim() - 1)))
    u = torch.rand(clean.shape, generator=generator(seed)) * 2 - 1
    # pin the extreme entry so the realised magnitude is exact, not just bounded
    flat = u.flatten(1)
    flat[torch.arange(len(flat)), flat.abs().argmax(1)] = flat[torch.arange(len(flat)), flat.abs().argmax(1)].sign()
    noise = flat.view_as(clean) * mag
    return (clean + noise).clamp(0, 1)


def fooling_rate(model, adversarial: torch.Tensor, labels: torch.Tensor) -> float:
    return (predict(model, adversarial) != labels).float().mean().item()


# -- classifier training ------------------------------------------------------


@dataclass
class ClassifierConfig:
    architecture: str = "RESNET18"
    strategy: str = "NT"
    width: int | None = None
    num_classes: int = 10
    dataset: str = "CIFAR10"
    epochs: int = 30
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    augment: bool = True
    at_epsilon: float = 8 / 255
    at_steps: int = 7
    at_step_size: float = 2 / 255
    accuracy_floor: float = 0.60
    seed: int = 0


class ClassifierModel(nn.Module):
    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        self.net: TapModel = build_classifier(config.architecture, config.num_classes, config.width, config.dataset)
        self.clean_accuracy: float | None = None

    @property
    def usable(self) -> bool:
        return self.clean_accuracy is not None and self.clean_accuracy >= self.config.accuracy_floor

    def forward(self, x):
        return self.net(x)

    def forward_taps(self, x, taps):
        return self.net.forward_taps(x, taps)


def _augment(x, gen):
    n, _, h, w = x.shape
    padded = F.pad(x, (4, 4, 4, 4))
    offs = torch.randint(0, 9, (n, 2), generator=gen)
    flips = torch.rand(n, generator=gen) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        crop = padded[i, :, offs[i, 0]:offs[i, 0] + h, offs[i, 1]:offs[i, 1] + w]
        out[i] = crop.flip(-1) if flips[i] else crop
    return out


def train_classifier(
    config: ClassifierConfig,
    images: torch.Tensor,
    labels: torch.Tensor,
    eval_images: torch.Tensor | None = None,
    eval_labels: torch.Tensor | None = None,
    checkpoint: str | Path | None = None,
) -> ClassifierModel:
    """NT: cross-entropy; AT: PGD-l-inf adversarial training on every batch."""
    torch.manual_seed(config.seed)
    model = ClassifierModel(config)
    opt = torch.optim.SGD(
        model.parameters(), lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay
    )
    steps_per_epoch = math.ceil(len(images) / config.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=config.learning_rate, total_steps=config.epochs * steps_per_epoch, pct_start=0.25
    )
    gen = generator(config.seed)
    at_spec = AttackSpec("PGD_LINF", config.at_epsilon, config.at_steps, config.at_step_size)
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for b, idx in enumerate(batches(len(images), config.batch_size, torch.randperm(len(images), generator=gen))):
            x, y = images[idx], labels[idx]
            if config.augment:
                x = _augment(x, gen)
            if config.strategy == "AT":
                model.eval()
                x = _linf_attack(model, x, y, at_spec, gen).detach()
            model.train()
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite classifier loss at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
            count += len(idx)
        log.info("%s(%s) epoch %d/%d loss %.4f", config.architecture, config.strategy, epoch + 1, config.epochs, total / count)
    model.eval()
    if eval_images is not None:
        model.clean_accuracy = (predict(model, eval_images) == eval_labels).float().mean().item()
        if not model.usable:
            log.warning(
                "%s(%s) clean accuracy %.3f below floor %.2f: unusable for experiments",
                config.architecture, config.strategy, model.clean_accuracy, config.accuracy_floor,
            )
    if checkpoint is not None:
        save_classifier(model, checkpoint)
    return model


def robust_accuracy(model, images, labels, spec: AttackSpec | None = None, seed: int = 0) -> float:
    spec = spec or AttackSpec("PGD_LINF", 8 / 255)
    adv = craft(spec, model, images, labels, seed=seed)
    return (predict(model, adv) == labels).float().mean().item()


def save_classifier(model: ClassifierModel, path, **extra) -> Path:
    return save_checkpoint(path, "classifier", model.config, model.state_dict(), clean_accuracy=model.clean_accuracy, **extra)


def load_classifier(path, expected_hash: str | None = None, force: bool = False, expected_stage: str | None = None) -> ClassifierModel:
    payload = load_checkpoint(path, "classifier", expected_hash, force, expected_stage)
    model = ClassifierModel(ClassifierConfig(**payload["config"]))
    load_state_strict(model, payload["state_dict"], path)
    model.clean_accuracy = payload.get("clean_accuracy")
    return model.eval()


# -- adversarial-set archive --------------------------------------------------


@dataclass
class AdversarialSet:
    images: torch.Tensor
    clean: torch.Tensor
    labels: torch.Tensor
    victim_predictions: torch.Tensor
    source_predictions: torch.Tensor
    config: dict = field(default_factory=dict)
    config_hash: str = ""

    def __len__(self):
        return len(self.labels)


def save_archive(path, adv: AdversarialSet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(
        tmp,
        images=adv.images.numpy(),
        clean=adv.clean.numpy(),
        labels=adv.labels.numpy(),
        victim_predictions=adv.victim_predictions.numpy(),
        source_predictions=adv.source_predictions.numpy(),
        config=np.array(json.dumps(to_jsonable(adv.config), sort_keys=True)),
        config_hash=np.array(adv.config_hash),
        format_version=np.array(1),
    )
    tmp.replace(path)
    return path


def load_archive(path, expected_hash: str | None = None, force: bool = False) -> AdversarialSet:
    with np.load(path) as d:
        got = str(d["config_hash"])
        if expected_hash is not None and got != expected_hash and not force:
            raise ValueError(f"{path}: archive built by config {got}, expected {expected_hash}")
        return AdversarialSet(
            torch.from_numpy(d["images"]),
            torch.from_numpy(d["clean"]),
            torch.from_numpy(d["labels"]),
            torch.from_numpy(d["victim_predictions"]),
            torch.from_numpy(d["source_predictions"]),
            json.loads(str(d["config"])),
            got,
        )
