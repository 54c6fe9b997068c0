import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from oracles import dft_loop, idft_loop
from recondet.frequency import (
    SpectrumPair,
    dft_decompose,
    idft_recompose,
    patch_slices,
    patch_substitute,
    recompose_variant,
)


def images(n=2, c=3, h=8, w=8, seed=0):
    return torch.rand(n, c, h, w, generator=torch.Generator().manual_seed(seed))


def test_constant_image_has_dc_only():
    c = 0.37
    spec = dft_decompose(torch.full((1, 1, 4, 4), c))
    expected = torch.zeros(4, 4)
    expected[0, 0] = c * 16
    assert torch.allclose(spec.amplitude[0, 0], expected, atol=1e-5)
    assert spec.phase[0, 0, 0, 0].item() == 0.0


def test_forward_matches_loop_oracle_4x4():
    x = images(1, 1, 4, 4, seed=3)
    spec = dft_decompose(x)
    ref = dft_loop(x[0, 0].double().numpy())
    np.testing.assert_allclose(spec.amplitude[0, 0].numpy(), np.abs(ref), atol=1e-5)
    # compare phases through the unit phasor so the +-pi seam cannot cause false failures
    got = np.exp(1j * spec.phase[0, 0].double().numpy())
    want = np.exp(1j * np.angle(ref))
    mask = np.abs(ref) > 1e-6
    np.testing.assert_allclose(got[mask], want[mask], atol=1e-5)


def test_non_square_transform_is_per_channel():
    x = images(1, 2, 4, 6, seed=5)
    spec = dft_decompose(x)
    for ch in range(2):
        ref = dft_loop(x[0, ch].double().numpy())
        np.testing.assert_allclose(spec.amplitude[0, ch].numpy(), np.abs(ref), atol=1e-5)


def test_mixed_spectra_match_inverse_loop_oracle():
    a, b = images(1, 1, 4, 4, seed=1), images(1, 1, 4, 4, seed=2)
    sa, sb = dft_decompose(a), dft_decompose(b)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        got = idft_recompose(sa.amplitude, sb.phase)
    spec = sa.amplitude[0, 0].double().numpy() * np.exp(1j * sb.phase[0, 0].double().numpy())
    np.testing.assert_allclose(got[0, 0].numpy(), idft_loop(spec).real, atol=1e-5)


def test_zero_amplitude_gives_zero_image():
    phase = torch.rand(2, 3, 8, 8) * 2 * math.pi - math.pi
    assert torch.count_nonzero(idft_recompose(torch.zeros(2, 3, 8, 8), phase)) == 0


@given(st.integers(0, 10_000), st.integers(1, 3), st.sampled_from([(4, 4), (8, 8), (6, 10), (32, 32)]))
def test_round_trip_and_spectrum_invariants(seed, c, hw):
    x = images(2, c, *hw, seed=seed)
    spec = dft_decompose(x)
    assert (spec.amplitude >= 0).all()
    assert (spec.phase > -math.pi).all() and (spec.phase <= math.pi).all()
    back = idft_recompose(*spec, real_origin=True)
    assert (back - x).abs().max() < 1e-4
    # Parseval
    h, w = hw
    lhs = x.double().pow(2).sum()
    rhs = spec.amplitude.double().pow(2).sum() / (h * w)
    assert abs(lhs - rhs) / lhs < 1e-3


def test_phase_never_minus_pi():
    # negative real coefficients with a signed-zero imaginary part
    x = torch.tensor([[[[0.0, 1.0], [0.0, 1.0]]]])
    assert (dft_decompose(x).phase > -math.pi).all()
    assert (dft_decompose(-x).phase > -math.pi).all()


def test_rejects_non_finite_and_bad_rank():
    x = images()
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        dft_decompose(x)
    with pytest.raises(ValueError):
        dft_decompose(torch.rand(3, 8, 8))


def test_clamp_is_opt_in():
    spec = dft_decompose(images())
    boosted = SpectrumPair(spec.amplitude * 3, spec.phase)
    raw = recompose_variant(spec, boosted, "amp")
    assert raw.max() > 1
    assert recompose_variant(spec, boosted, "amp", clamp=True).max() <= 1


def test_asymmetric_spectrum_warns_when_claimed_real():
    # a random phase field breaks conjugate symmetry, so the inverse is not real
    sa = dft_decompose(images(seed=1))
    phase = torch.rand(sa.phase.shape, generator=torch.Generator().manual_seed(0)) * 2 * math.pi - math.pi
    with pytest.warns(RuntimeWarning, match="imaginary residue"):
        idft_recompose(sa.amplitude, phase, real_origin=True)


def test_two_real_spectra_mix_to_a_real_image():
    sa, sb = dft_decompose(images(seed=1)), dft_decompose(images(seed=2))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        idft_recompose(sa.amplitude, sb.phase, real_origin=True)


class TestRecomposeVariant:
    def test_joint_with_identity_reconstruction(self):
        x = images()
        spec = dft_decompose(x)
        assert (recompose_variant(spec, spec, "joint") - x).abs().max() < 1e-4

    def test_amp_with_same_amplitude(self):
        x = images()
        spec = dft_decompose(x)
        other = dft_decompose(images(seed=9))
        rec = SpectrumPair(spec.amplitude, other.phase)
        assert (recompose_variant(spec, rec, "amp") - x).abs().max() < 1e-4

    def test_pha_is_definitional(self):
        o, r = dft_decompose(images(seed=1)), dft_decompose(images(seed=2))
        assert torch.equal(recompose_variant(o, r, "pha"), idft_recompose(o.amplitude, r.phase))

    def test_unknown_variant(self):
        spec = dft_decompose(images())
        with pytest.raises(ValueError, match="unknown variant"):
            recompose_variant(spec, spec, "both")


class TestPatchSubstitute:
    def test_pixel_zero_perturbation_is_identity(self):
        x = images()
        assert torch.equal(patch_substitute(x, torch.zeros_like(x), 2, "pixel", (2, 2)), x)

    def test_pixel_adds_only_inside_patch(self):
        x, d = images(seed=1), images(seed=2) * 0.1
        out = patch_substitute(x, d, 1, "pixel", (2, 2))
        assert torch.allclose(out[..., :4, 4:], x[..., :4, 4:] + d[..., :4, 4:])
        mask = torch.ones(8, 8, dtype=torch.bool)
        mask[:4, 4:] = False
        assert torch.equal(out[..., mask], x[..., mask])

    @pytest.mark.parametrize("domain", ["amplitude", "phase"])
    def test_self_substitution(self, domain):
        x = images()
        assert (patch_substitute(x, x, 3, domain, (4, 4)) - x).abs().max() < 1e-4

    def test_phase_patch_matches_assembled_oracle(self):
        base, donor = images(1, 1, 8, 8, seed=4), images(1, 1, 8, 8, seed=5)
        fb, fd = dft_loop(base[0, 0].double().numpy()), dft_loop(donor[0, 0].double().numpy())
        amp, pha = np.abs(fb), np.angle(fb)
        # patch 3 of a 2x2 grid is the bottom-right 4x4 block
        for u in range(4, 8):
            for v in range(4, 8):
                pha[u, v] = np.angle(fd[u, v])
        want = idft_loop(amp * np.exp(1j * pha)).real
        got = patch_substitute(base, donor, 3, "phase", (2, 2))
        np.testing.assert_allclose(got[0, 0].numpy(), want, atol=1e-5)

    def test_amplitude_patch_matches_assembled_oracle(self):
        base, donor = images(1, 1, 8, 8, seed=6), images(1, 1, 8, 8, seed=7)
        fb, fd = dft_loop(base[0, 0].double().numpy()), dft_loop(donor[0, 0].double().numpy())
        amp, pha = np.abs(fb), np.angle(fb)
        for u in range(0, 4):
            for v in range(4, 8):
                amp[u, v] = np.abs(fd[u, v])
        want = idft_loop(amp * np.exp(1j * pha)).real
        got = patch_substitute(base, donor, 1, "amplitude", (2, 2))
        np.testing.assert_allclose(got[0, 0].numpy(), want, atol=1e-5)

    def test_uneven_grid_rejected(self):
        x = images()
        with pytest.raises(ValueError, match="tile"):
            patch_substitute(x, x, 0, "pixel", (3, 3))

    def test_index_out_of_range(self):
        with pytest.raises(ValueError):
            patch_slices(8, 8, (2, 2), 4)

    @given(st.integers(1, 4), st.integers(1, 4))
    def test_patches_partition_the_image(self, rows, cols):
        h, w = rows * 3, cols * 2
        seen = torch.zeros(h, w, dtype=torch.int64)
        for i in range(rows * cols):
            rs, cs = patch_slices(h, w, (rows, cols), i)
            seen[rs, cs] += 1
        assert (seen == 1).all()
