"""PixelVAE and FreqVAE: VAEs trained on normal images only.

The pixel model reconstructs raw images. The frequency models reconstruct a
single spectral component (amplitude or phase); the complementary component
is always taken from the input, and the reconstruction loss is measured in
the pixel domain after recomposition.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .frequency import SpectrumPair, dft_decompose, recompose_variant
from .utils import batches, generator, load_checkpoint, load_state_strict, save_checkpoint

log = logging.getLogger(__name__)

TARGETS = ("pixel", "amplitude", "phase")
RECON_VARIANTS = ("pixel", "pha", "amp", "joint")
LOGVAR_BOUND = 10.0


@dataclass
class VaeConfig:
    target: str = "pixel"
    latent_dim: int = 128
    beta: float = 1.0
    epochs: int = 50
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    channels: tuple[int, ...] = (32, 64, 128, 256)
    image_shape: tuple[int, int, int] = (3, 32, 32)
    seed: int = 0

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}; expected one of {TARGETS}")
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        self.channels = tuple(self.channels)
        self.image_shape = tuple(self.image_shape)
        scale = 2 ** len(self.channels)
        if self.image_shape[1] % scale or self.image_shape[2] % scale:
            raise ValueError(f"image size {self.image_shape[1:]} not divisible by {scale}")


class VaeDivergenceError(RuntimeError):
    pass


class VaeModel(nn.Module):
    """Convolutional VAE over one reconstruction target."""

    def __init__(self, config: VaeConfig):
        super().__init__()
        self.config = config
        c, h, w = config.image_shape
        chans = config.channels
        enc, cin = [], c
        for cout in chans:
            enc += [nn.Conv2d(cin, cout, 4, 2, 1), nn.BatchNorm2d(cout), nn.LeakyReLU(0.2)]
            cin = cout
        self.encoder = nn.Sequential(*enc)
        self.bottleneck = (chans[-1], h // 2 ** len(chans), w // 2 ** len(chans))
        flat = chans[-1] * self.bottleneck[1] * self.bottleneck[2]
        self.fc_mu = nn.Linear(flat, config.latent_dim)
        self.fc_logvar = nn.Linear(flat, config.latent_dim)
        self.fc_dec = nn.Linear(config.latent_dim, flat)
        dec, cin = [], chans[-1]
        for cout in list(chans[::-1][1:]) + [c]:
            dec += [nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.BatchNorm2d(cout), nn.LeakyReLU(0.2)]
            cin = cout
        self.decoder = nn.Sequential(*dec[:-2])
        self.history: list[float] = []
        # an image in [0, 1] has no DFT coefficient above H * W
        self.max_log_amplitude = math.log1p(h * w)
        # per-frequency standardisation of log-amplitude, fitted on the training set
        self.register_buffer("shift", torch.zeros(config.image_shape))
        self.register_buffer("scale", torch.ones(config.image_shape))

    @torch.no_grad()
    def fit_standardisation(self, images: torch.Tensor) -> None:
        if self.target != "amplitude":
            return
        logs = torch.log1p(dft_decompose(images).amplitude)
        self.shift.copy_(logs.mean(0))
        self.scale.copy_(logs.std(0).clamp_min(1e-3))

    @property
    def target(self) -> str:
        return self.config.target

    def to_input(self, component: torch.Tensor) -> torch.Tensor:
        if self.target == "amplitude":
            return (torch.log1p(component) - self.shift) / self.scale
        if self.target == "phase":
            return component / math.pi
        return component

    def from_output(self, raw: torch.Tensor) -> torch.Tensor:
        if self.target == "amplitude":
            return torch.expm1((self.shift + self.scale * raw).clamp(0.0, self.max_log_amplitude))
        if self.target == "phase":
            return math.pi * torch.tanh(raw)
        return torch.sigmoid(raw)

    def encode(self, component: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        hidden = self.encoder(self.to_input(component)).flatten(1)
        return self.fc_mu(hidden), self.fc_logvar(hidden).clamp(-LOGVAR_BOUND, LOGVAR_BOUND)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        hidden = self.fc_dec(z).view(-1, *self.bottleneck)
        return self.from_output(self.decoder(hidden))

    def forward(self, component: torch.Tensor, sample: bool = True):
        mu, logvar = self.encode(component)
        z = mu + torch.randn_like(mu) * torch.exp(0.5 * logvar) if sample else mu
        return self.decode(z), mu, logvar


def select_component(images: torch.Tensor, target: str) -> tuple[torch.Tensor, SpectrumPair | None]:
    if target == "pixel":
        return images, None
    spec = dft_decompose(images)
    return (spec.amplitude if target == "amplitude" else spec.phase), spec


def to_pixels(decoded: torch.Tensor, target: str, spec: SpectrumPair | None) -> torch.Tensor:
    if target == "pixel":
        return decoded
    if target == "amplitude":
        return recompose_variant(spec, SpectrumPair(decoded, spec.phase), "amp")
    return recompose_variant(spec, SpectrumPair(spec.amplitude, decoded), "pha")


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mu, exp(logvar)) || N(0, I)), summed over latents, averaged over the batch."""
    return 0.5 * (logvar.exp() + mu.pow(2) - 1.0 - logvar).sum(1).mean()


def vae_loss(
    reconstruction: torch.Tensor,
    original: torch.Tensor,
    mu: torch.Tensor,
    logvar: torch.Tensor,
    beta: float = 1.0,
) -> torch.Tensor:
    """Negative ELBO: pixel-domain MSE plus beta-weighted KL."""
    if mu.shape != logvar.shape or mu.dim() != 2:
        raise ValueError(f"mu/logvar must both be [N, latent_dim], got {tuple(mu.shape)} and {tuple(logvar.shape)}")
    return F.mse_loss(reconstruction, original) + beta * kl_divergence(mu, logvar)


def train_vae(
    images: torch.Tensor,
    config: VaeConfig,
    checkpoint: str | Path | None = None,
) -> VaeModel:
    """Train on normal images with SGD; per-epoch mean losses land in ``model.history``."""
    torch.manual_seed(config.seed)
    model = VaeModel(config)
    model.fit_standardisation(images)
    opt = torch.optim.SGD(
        model.parameters(), lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay
    )
    gen = generator(config.seed)
    stable = copy.deepcopy(model.state_dict())
    for epoch in range(config.epochs):
        model.train()
        total, count = 0.0, 0
        for idx in batches(len(images), config.batch_size, torch.randperm(len(images), generator=gen)):
            x = images[idx]
            component, spec = select_component(x, config.target)
            decoded, mu, logvar = model(component)
            recon = to_pixels(decoded, config.target, spec)
            mse = F.mse_loss(recon, x)
            kl = kl_divergence(mu, logvar)
            loss = mse + config.beta * kl
            if not torch.isfinite(loss):
                load_state_strict(model, stable)
                if checkpoint is not None:
                    save_vae(model, checkpoint)
                raise VaeDivergenceError(
                    f"non-finite loss at epoch {epoch + 1} (lr={config.learning_rate}, "
                    f"mse={mse.item():.4g}, kl={kl.item():.4g}); last stable weights retained"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        model.history.append(total / count)
        stable = copy.deepcopy(model.state_dict())
        log.info("vae[%s] epoch %d/%d loss %.5f", config.target, epoch + 1, config.epochs, model.history[-1])
    model.eval()
    if checkpoint is not None:
        save_vae(model, checkpoint)
    return model


def save_vae(model: VaeModel, path: str | Path, **extra) -> Path:
    return save_checkpoint(path, "vae", model.config, model.state_dict(), history=list(model.history), **extra)


def load_vae(path: str | Path, expected_hash: str | None = None, force: bool = False, expected_stage: str | None = None) -> VaeModel:
    payload = load_checkpoint(path, "vae", expected_hash, force, expected_stage)
    config = VaeConfig(**payload["config"])
    model = VaeModel(config)
    load_state_strict(model, payload["state_dict"], path)
    model.history = list(payload.get("history", []))
    return model.eval()


def _required_targets(variant: str) -> tuple[str, ...]:
    return {"pixel": ("pixel",), "pha": ("phase",), "amp": ("amplitude",), "joint": ("amplitude", "phase")}[variant]


def check_models(models: dict[str, VaeModel], variant: str) -> None:
    if variant not in RECON_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {RECON_VARIANTS}")
    for target in _required_targets(variant):
        if target not in models:
            raise ValueError(f"variant {variant!r} needs a {target} model; got {sorted(models)}")
        if models[target].target != target:
            raise ValueError(f"model registered as {target} was trained on {models[target].target}")


@torch.no_grad()
def reconstruct(models: dict[str, VaeModel], images: torch.Tensor, variant: str, batch_size: int = 500) -> torch.Tensor:
    """Reconstruct a pixel-domain batch with the posterior mean latent.

    ``models`` maps target name ("pixel", "amplitude", "phase") to a trained
    model; the variant decides which ones are used.
    """
    check_models(models, variant)
    for m in models.values():
        m.eval()
    out = []
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        if variant == "pixel":
            out.append(models["pixel"](x, sample=False)[0])
            continue
        spec = dft_decompose(x)
        amp, pha = spec.amplitude, spec.phase
        if variant in ("amp", "joint"):
            amp = models["amplitude"](spec.amplitude, sample=False)[0]
        if variant in ("pha", "joint"):
            pha = models["phase"](spec.phase, sample=False)[0]
        out.append(recompose_variant(spec, SpectrumPair(amp, pha), variant))
    return torch.cat(out) if out else images[:0]
