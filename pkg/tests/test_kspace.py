import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcr.errors import DimensionError, ParameterError
from mcr.kspace import (apply_mask, data_consistency, forward_fft, inverse_fft,
                        mirror_index, zero_filled_recon)
from mcr.sampling import default_params, generate_mask


def test_impulse_gives_constant_spectrum():
    img = np.zeros((16, 16))
    img[8, 8] = 1.0
    k = forward_fft(img)
    np.testing.assert_allclose(np.abs(k), 1 / 16, atol=1e-12)


def test_constant_image_gives_dc_only():
    k = forward_fft(np.ones((16, 16)))
    assert abs(k[8, 8]) == pytest.approx(16.0)
    k[8, 8] = 0
    assert np.abs(k).max() < 1e-12


def test_dc_only_inverts_to_constant():
    k = np.zeros((16, 16), complex)
    k[8, 8] = 16.0
    np.testing.assert_allclose(inverse_fft(k), 1.0, atol=1e-12)


def test_parseval(rng):
    img = rng.standard_normal((32, 32)) + 1j * rng.standard_normal((32, 32))
    ratio = np.sum(np.abs(img) ** 2) / np.sum(np.abs(forward_fft(img)) ** 2)
    assert abs(ratio - 1) < 1e-6


def test_round_trip(rng):
    x = rng.standard_normal((16, 16))
    assert np.abs(inverse_fft(forward_fft(x)) - x).max() < 1e-6


def test_inverse_is_linear(rng):
    y1 = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
    y2 = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
    a = 0.7 - 0.3j
    lhs = inverse_fft(a * y1 + y2)
    assert np.abs(lhs - (a * inverse_fft(y1) + inverse_fft(y2))).max() < 1e-6


def test_real_image_spectrum_is_hermitian(rng):
    k = forward_fft(rng.random((32, 32)))
    np.testing.assert_allclose(k, np.conj(mirror_index(k)), rtol=1e-5, atol=1e-12)


def test_odd_dimensions_rejected():
    with pytest.raises(DimensionError):
        forward_fft(np.zeros((15, 16)))
    with pytest.raises(DimensionError):
        inverse_fft(np.zeros((16, 17)))


def test_apply_mask_identity_and_empty(rng):
    k = forward_fft(rng.random((16, 16)))
    np.testing.assert_array_equal(apply_mask(k, np.ones((16, 16), bool)), k)
    assert not np.any(apply_mask(k, np.zeros((16, 16), bool)))


def test_apply_mask_energy_matches_direct_sum(rng):
    k = rng.standard_normal((32, 32)) + 1j * rng.standard_normal((32, 32))
    mask = rng.random((32, 32)) < 0.3
    terms = []
    for i in range(32):
        for j in range(32):
            if mask[i, j]:
                terms.append(abs(k[i, j]) ** 2)
    # correctly rounded sums on both sides make the comparison exact
    assert math.fsum((np.abs(apply_mask(k, mask)) ** 2).ravel()) == math.fsum(terms)


def test_apply_mask_shape_mismatch():
    with pytest.raises(DimensionError):
        apply_mask(np.zeros((16, 16)), np.ones((16, 18), bool))


def test_zero_filled_full_and_empty(rng):
    img = rng.random((16, 16))
    full = zero_filled_recon(forward_fft(img), np.ones((16, 16), bool))
    np.testing.assert_allclose(full, img, atol=1e-12)
    empty = zero_filled_recon(forward_fft(img), np.zeros((16, 16), bool))
    assert not np.any(empty)


def test_zero_filled_keeps_acquired_samples(rng):
    img = rng.random((64, 64))
    mask = generate_mask(64, 64, default_params(10), seed=3)
    acquired = apply_mask(forward_fft(img), mask)
    zf = zero_filled_recon(acquired, mask)
    assert np.linalg.norm(zf - img) > 0
    np.testing.assert_allclose(apply_mask(forward_fft(zf), mask), acquired, atol=1e-12)


def test_dc_full_mask_returns_reference(rng):
    ref = rng.random((32, 32))
    pred = rng.random((32, 32))
    out = data_consistency(pred, forward_fft(ref), np.ones((32, 32), bool))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_dc_empty_mask_returns_prediction(rng):
    pred = rng.random((32, 32))
    out = data_consistency(pred, np.zeros((32, 32), complex), np.zeros((32, 32), bool))
    np.testing.assert_allclose(out, pred, atol=1e-12)


def test_dc_preserves_acquired_samples(rng):
    ref = rng.random((32, 32))
    mask = rng.random((32, 32)) < 0.2
    acquired = apply_mask(forward_fft(ref), mask)
    out, residual = data_consistency(rng.random((32, 32)), acquired, mask, return_residual=True)
    got = forward_fft(out)[mask]
    rel = np.linalg.norm(got - acquired[mask]) / np.linalg.norm(acquired[mask])
    assert rel < 1e-5
    assert residual < 1e-10


def test_dc_lambda_zero_is_identity(rng):
    ref = rng.random((32, 32))
    mask = rng.random((32, 32)) < 0.3
    pred = rng.random((32, 32))
    out = data_consistency(pred, apply_mask(forward_fft(ref), mask), mask, lam=0.0)
    np.testing.assert_allclose(out, pred, atol=1e-6)


def test_dc_finite_lambda_blends(rng):
    ref = rng.random((32, 32))
    pred = rng.random((32, 32))
    full = np.ones((32, 32), bool)
    out = data_consistency(pred, forward_fft(ref), full, lam=1.0)
    np.testing.assert_allclose(out, 0.5 * (pred + ref), atol=1e-12)


def test_dc_negative_lambda():
    with pytest.raises(ParameterError):
        data_consistency(np.zeros((16, 16)), np.zeros((16, 16)), np.ones((16, 16), bool), lam=-1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), density=st.floats(0.0, 1.0))
def test_dc_is_idempotent(seed, density):
    rng = np.random.default_rng(seed)
    ref = rng.random((16, 16))
    mask = rng.random((16, 16)) < density
    acquired = apply_mask(forward_fft(ref), mask)
    once = data_consistency(rng.random((16, 16)), acquired, mask)
    twice = data_consistency(once, acquired, mask)
    assert np.abs(twice - once).max() <= 1e-6


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_apply_mask_is_projection(seed):
    rng = np.random.default_rng(seed)
    k = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
    mask = rng.random((16, 16)) < 0.5
    once = apply_mask(k, mask)
    np.testing.assert_array_equal(apply_mask(once, mask), once)
