"""Centered, unitary Fourier operators and the k-space data-consistency projection.

k-space grids are plain complex ``ndarray`` objects of shape ``(H, W)`` with the
DC sample at index ``(H // 2, W // 2)``. Images are ``ndarray`` objects of the
same shape, complex or real.
"""

import numpy as np

from .errors import DimensionError, ParameterError

__all__ = [
    "forward_fft",
    "inverse_fft",
    "apply_mask",
    "zero_filled_recon",
    "data_consistency",
    "mirror_index",
]


def _check_even(shape):
    if len(shape) != 2:
        raise DimensionError(f"expected a 2D array, got shape {shape}")
    if shape[0] % 2 or shape[1] % 2:
        raise DimensionError(f"both dimensions must be even, got {shape}")


def _bits(mask):
    return np.asarray(getattr(mask, "bits", mask), dtype=bool)


def forward_fft(image):
    """Unitary centered 2D DFT of ``image``.

    Parseval holds with factor one: ``sum|image|**2 == sum|kspace|**2``.
    """
    image = np.asarray(image)
    _check_even(image.shape)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(image), norm="ortho"))


def inverse_fft(kspace):
    """Inverse of :func:`forward_fft`; returns a complex image."""
    kspace = np.asarray(kspace)
    _check_even(kspace.shape)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(kspace), norm="ortho"))


def apply_mask(kspace, mask):
    """Partial Fourier operator: keep samples where ``mask`` is set, zero the rest."""
    kspace = np.asarray(kspace)
    bits = _bits(mask)
    if bits.shape != kspace.shape:
        raise DimensionError(f"mask shape {bits.shape} != k-space shape {kspace.shape}")
    return np.where(bits, kspace, 0).astype(np.result_type(kspace.dtype, np.complex64))


def zero_filled_recon(acquired, mask):
    """Inverse FFT of the masked grid (missing samples set to zero)."""
    return inverse_fft(apply_mask(acquired, mask))


def mirror_index(grid):
    """Reorder a centered grid so that entry ``k`` holds the value at ``-k``."""
    return np.roll(np.flip(grid, axis=(0, 1)), 1, axis=(0, 1))


def data_consistency(prediction, acquired, mask, lam=np.inf, return_residual=False):
    """Project a real prediction onto the acquired k-space samples.

    On every acquired location ``k`` the prediction spectrum ``Y`` is replaced
    by ``(Y + lam * y_a) / (1 + lam)``, i.e. by ``y_a`` itself when ``lam`` is
    infinite. Because the output is a real image, the same correction is
    mirrored onto ``-k`` with the conjugate value; for acquisitions of a real
    image this is the conjugate-symmetric partner of the measured sample, so
    the result stays exactly consistent with the data on the acquired set.

    Parameters
    ----------
    prediction : ndarray
        Real image, shape ``(H, W)``.
    acquired : ndarray
        Centered complex k-space, zero outside ``mask``.
    mask : SamplingMask or ndarray of bool
    lam : float
        Data weight in ``[0, inf]``.
    return_residual : bool
        Also return the largest absolute imaginary part discarded when taking
        the real part of the corrected image.
    """
    if lam < 0 or np.isnan(lam):
        raise ParameterError(f"data-consistency weight must be >= 0, got {lam}")
    prediction = np.asarray(prediction)
    if not np.all(np.isfinite(prediction)):
        raise ParameterError("prediction contains non-finite values")
    bits = _bits(mask)
    acquired = np.asarray(acquired)
    if bits.shape != prediction.shape or acquired.shape != prediction.shape:
        raise DimensionError(
            f"shape mismatch: prediction {prediction.shape}, acquired {acquired.shape}, mask {bits.shape}"
        )

    spectrum = forward_fft(prediction.astype(np.complex128))
    mirrored_bits = mirror_index(bits)
    support = bits | mirrored_bits
    # measured samples take precedence over their mirrored partners
    target = np.where(bits, acquired, np.conj(mirror_index(acquired)))
    if np.isinf(lam):
        corrected = np.where(support, target, spectrum)
    else:
        corrected = np.where(support, (spectrum + lam * target) / (1.0 + lam), spectrum)

    image = inverse_fft(corrected)
    out = image.real.astype(prediction.dtype if prediction.dtype.kind == "f" else np.float64)
    if return_residual:
        return out, float(np.max(np.abs(image.imag)))
    return out
