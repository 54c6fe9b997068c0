"""Pixel <-> frequency conversion and amplitude/phase recomposition.

Spectra are kept in natural DFT order (no fftshift) and every channel is
transformed independently.
"""
from __future__ import annotations

import math
import warnings
from typing import NamedTuple

import torch

VARIANTS = ("pha", "amp", "joint")
DOMAINS = ("pixel", "amplitude", "phase")

# max-abs imaginary residue tolerated for spectra that come from real images
IMAG_RESIDUE_TOL = 1e-3


class SpectrumPair(NamedTuple):
    amplitude: torch.Tensor
    phase: torch.Tensor


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def dft_decompose(images: torch.Tensor) -> SpectrumPair:
    """Per-channel 2D DFT of an [N, C, H, W] batch split into amplitude and phase."""
    if images.dim() != 4:
        raise ValueError(f"expected [N, C, H, W], got shape {tuple(images.shape)}")
    _check_finite(images, "images")
    spec = torch.fft.fft2(images, dim=(-2, -1))
    amplitude = spec.abs()
    phase = torch.atan2(spec.imag, spec.real)
    # atan2 returns -pi for (-0.0 imag, negative real); fold onto the closed end
    phase = torch.where(phase <= -math.pi, torch.full_like(phase, math.pi), phase)
    return SpectrumPair(amplitude, phase)


def idft_recompose(
    amplitude: torch.Tensor,
    phase: torch.Tensor,
    clamp: bool = False,
    real_origin: bool = False,
) -> torch.Tensor:
    """Inverse DFT of ``amplitude * exp(i * phase)``, keeping the real part.

    With ``real_origin`` the imaginary residue is checked against
    ``IMAG_RESIDUE_TOL`` and a warning is emitted when it is exceeded. Mixed
    spectra (amplitude of one image, phase of another) break conjugate
    symmetry and legitimately leave a residue, so this is never fatal.
    """
    if amplitude.shape != phase.shape:
        raise ValueError(f"shape mismatch: {tuple(amplitude.shape)} vs {tuple(phase.shape)}")
    spec = torch.polar(amplitude, phase)
    out = torch.fft.ifft2(spec, dim=(-2, -1))
    if real_origin:
        residue = out.imag.abs().max().item() if out.numel() else 0.0
        if residue > IMAG_RESIDUE_TOL:
            warnings.warn(f"imaginary residue {residue:.3g} above {IMAG_RESIDUE_TOL}", RuntimeWarning)
    img = out.real
    if clamp:
        img = img.clamp(0.0, 1.0)
    return img


def recompose_variant(
    original: SpectrumPair,
    reconstructed: SpectrumPair,
    variant: str,
    clamp: bool = False,
) -> torch.Tensor:
    """Mix original and reconstructed spectra.

    pha   -> IDFT(A_orig, P_rec)
    amp   -> IDFT(A_rec, P_orig)
    joint -> IDFT(A_rec, P_rec)
    """
    if variant == "pha":
        amp, pha = original.amplitude, reconstructed.phase
    elif variant == "amp":
        amp, pha = reconstructed.amplitude, original.phase
    elif variant == "joint":
        amp, pha = reconstructed.amplitude, reconstructed.phase
    else:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if amp.shape != pha.shape:
        raise ValueError("original and reconstructed spectra differ in shape")
    return idft_recompose(amp, pha, clamp=clamp)


def patch_slices(height: int, width: int, grid: tuple[int, int], index: int) -> tuple[slice, slice]:
    rows, cols = grid
    if rows <= 0 or cols <= 0 or height % rows or width % cols:
        raise ValueError(f"grid {grid} does not tile {height}x{width} evenly")
    if not 0 <= index < rows * cols:
        raise ValueError(f"patch index {index} out of range for grid {grid}")
    ph, pw = height // rows, width // cols
    r, c = divmod(index, cols)
    return slice(r * ph, (r + 1) * ph), slice(c * pw, (c + 1) * pw)


def patch_substitute(
    base: torch.Tensor,
    donor: torch.Tensor,
    patch_index: int,
    domain: str,
    grid: tuple[int, int],
) -> torch.Tensor:
    """Apply the ``patch_index``-th patch of ``donor`` to ``base``.

    In the pixel domain ``donor`` is a perturbation and its patch is *added*
    to ``base``. In the amplitude/phase domains ``donor`` is an image whose
    spectral patch of the named component replaces that of ``base``; the
    other component is left untouched and the result is inverse-transformed.
    """
    if base.shape != donor.shape:
        raise ValueError(f"shape mismatch: {tuple(base.shape)} vs {tuple(donor.shape)}")
    rs, cs = patch_slices(base.shape[-2], base.shape[-1], grid, patch_index)
    if domain == "pixel":
        out = base.clone()
        out[..., rs, cs] += donor[..., rs, cs]
        return out
    if domain not in ("amplitude", "phase"):
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    b = dft_decompose(base)
    d = dft_decompose(donor)
    amp, pha = b.amplitude.clone(), b.phase.clone()
    if domain == "amplitude":
        amp[..., rs, cs] = d.amplitude[..., rs, cs]
    else:
        pha[..., rs, cs] = d.phase[..., rs, cs]
    return idft_recompose(amp, pha)
