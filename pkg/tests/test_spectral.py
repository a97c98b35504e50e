import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dgap.spectral import (
    AmplitudePhase,
    ComplexSpectrum,
    NumericIntegrityError,
    fft2,
    from_amp_phase,
    ifft2,
    low_freq_mask,
    to_amp_phase,
)
from oracles import dft2_loops

images = st.sampled_from([(1, 4, 4), (3, 8, 8), (2, 16, 8), (1, 6, 10), (1, 5, 3)]).flatmap(
    lambda shape: arrays(np.float64, shape, elements=st.floats(0, 1)))


def test_constant_image_is_dc_only():
    s = to_amp_phase(fft2(np.full((1, 8, 8), 0.3)))
    expected = np.zeros((1, 8, 8))
    expected[0, 0, 0] = 0.3 * 64
    assert np.allclose(s.amplitude, expected, atol=1e-9)
    assert s.phase[0, 0, 0] == 0.0


def test_impulse_has_flat_amplitude():
    x = np.zeros((1, 8, 8))
    x[0, 0, 0] = 1.0
    assert np.allclose(to_amp_phase(fft2(x)).amplitude, 1.0, atol=1e-12)


@pytest.mark.parametrize("shape", [(8, 8), (16, 16), (6, 10), (5, 7)])
def test_forward_matches_loop_dft(rng, shape):
    x = rng.random(shape)
    assert np.max(np.abs(fft2(x).to_complex() - dft2_loops(x))) < 1e-9


@pytest.mark.parametrize("shape", [(8, 8), (12, 8)])
def test_inverse_matches_loop_dft(rng, shape):
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    got = ifft2(ComplexSpectrum.from_complex(z), return_complex=True)
    assert np.max(np.abs(got - dft2_loops(z, inverse=True))) < 1e-9


def test_inverse_is_linear(rng):
    s1, s2 = fft2(rng.random((2, 8, 8))), fft2(rng.random((2, 8, 8)))
    lhs = ifft2(2.5 * s1 + (-0.7) * s2)
    assert np.max(np.abs(lhs - (2.5 * ifft2(s1) - 0.7 * ifft2(s2)))) < 1e-10


def test_hand_polar_case():
    ap = to_amp_phase(ComplexSpectrum(np.array([[3.0]]), np.array([[4.0]])))
    assert ap.amplitude[0, 0] == 5.0
    assert ap.phase[0, 0] == np.arctan2(4.0, 3.0)


def test_zero_amplitude_gives_zero_spectrum(rng):
    s = from_amp_phase(AmplitudePhase(np.zeros((4, 4)), rng.uniform(-3, 3, (4, 4)), True))
    assert not s.re.any() and not s.im.any()


def test_from_amp_phase_per_bin(rng):
    a, p = rng.random((4, 4)), rng.uniform(-np.pi, np.pi, (4, 4))
    s = from_amp_phase(AmplitudePhase(a, p, False))
    for u in range(4):
        for v in range(4):
            z = a[u, v] * complex(np.cos(p[u, v]), np.sin(p[u, v]))
            assert abs(complex(s.re[u, v], s.im[u, v]) - z) < 1e-12


def test_negative_amplitude_rejected():
    with pytest.raises(ValueError):
        from_amp_phase(AmplitudePhase(-np.ones((2, 2)), np.zeros((2, 2)), False))


def test_integrity_error_on_broken_symmetry(rng):
    s = fft2(rng.random((8, 8)))
    broken = ComplexSpectrum(s.re, s.im + np.eye(8), conj_symmetric=True)
    with pytest.raises(NumericIntegrityError):
        ifft2(broken)


@given(images)
def test_round_trip_and_parseval(x):
    s = fft2(x)
    assert np.max(np.abs(ifft2(s) - x)) < 1e-10
    ap = to_amp_phase(s)
    energy = float((x**2).sum())
    spec_energy = float((ap.amplitude**2).sum()) / (x.shape[-1] * x.shape[-2])
    assert abs(energy - spec_energy) <= 1e-9 * max(energy, 1e-300) + 1e-12
    back = from_amp_phase(ap)
    assert np.max(np.abs(back.re - s.re)) < 1e-9 and np.max(np.abs(back.im - s.im)) < 1e-9
    assert np.all(ap.amplitude >= 0)
    assert np.all(ap.phase > -np.pi - 1e-15) and np.all(ap.phase <= np.pi)


@given(images)
def test_conjugate_symmetry(x):
    z = fft2(x).to_complex()
    h, w = z.shape[-2:]
    mirror = np.conj(z[..., (-np.arange(h)) % h, :][..., (-np.arange(w)) % w])
    assert np.max(np.abs(z - mirror)) < 1e-9


def test_round_trip_64(rng):
    x = rng.random((3, 64, 64))
    assert np.max(np.abs(ifft2(fft2(x)) - x)) < 1e-10


def _enumerate_mask(h, w, r):
    s = max(1, round(r * min(h, w)))
    half = s // 2
    bins = set()
    for u in range(h):
        for v in range(w):
            su = u if u <= h // 2 else u - h
            sv = v if v <= w // 2 else v - w
            if abs(su) <= half and abs(sv) <= half:
                bins.add((u, v))
    return bins


def test_mask_full_and_minimal():
    assert low_freq_mask(8, 8, 1.0).count == 64
    m = low_freq_mask(8, 8, 0.05)
    assert m.count == 1 and (0, 0) in m


@pytest.mark.parametrize("h,w,r", [(8, 8, 0.5), (8, 8, 0.375), (16, 16, 0.5), (16, 12, 0.3), (7, 9, 0.6)])
def test_mask_enumeration(h, w, r):
    m = low_freq_mask(h, w, r)
    assert {tuple(i) for i in np.argwhere(m.grid)} == _enumerate_mask(h, w, r)


def test_odd_side_is_exact_square():
    # r = 0.375 on 8x8 -> s = 3
    assert low_freq_mask(8, 8, 0.375).count == 9


@given(st.integers(1, 24), st.integers(1, 24), st.floats(0.01, 1.0))
def test_mask_symmetric_and_contains_dc(h, w, r):
    g = low_freq_mask(h, w, r).grid
    assert g[0, 0]
    mirror = g[(-np.arange(h)) % h][:, (-np.arange(w)) % w]
    assert np.array_equal(g, mirror)


@pytest.mark.parametrize("r", [0.0, -0.1, 1.5])
def test_mask_rejects_bad_ratio(r):
    with pytest.raises(ValueError):
        low_freq_mask(8, 8, r)


def test_masked_mix_reconstructs_real(rng):
    x1, x2 = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    a1, a2 = to_amp_phase(fft2(x1)), to_amp_phase(fft2(x2))
    m = low_freq_mask(16, 16, 0.5).grid
    amp = np.where(m, 0.3 * a1.amplitude + 0.7 * a2.amplitude, a1.amplitude)
    z = ifft2(from_amp_phase(AmplitudePhase(amp, a1.phase, True)), return_complex=True)
    assert np.max(np.abs(z.imag)) < 1e-8
