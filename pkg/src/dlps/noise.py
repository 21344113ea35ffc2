"""Poisson corruption calibrated to a target SNR.

SNR is ``10 log10(sum (a y)^2 / sum a y)``: signal energy of the scaled
stack over the expected energy of Poisson noise at that scale, taken over
the whole stack (restricted to masked pixels when a mask is given).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ImageStack, check_mask

# numpy's Poisson sampler rejects means above ~9.2e18; well before that the
# normal approximation is exact to double precision for our purposes
_NORMAL_APPROX_MEAN = 1e12


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float
    seed: int = 0
    realization: int = 0

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.realization])


def _masked(stack: ImageStack, mask) -> np.ndarray:
    if mask is None:
        return stack.data
    return stack.data[check_mask(mask, stack.height, stack.width).ravel()]


def calibrate_scale(stack: ImageStack, snr_db: float, mask=None) -> float:
    """Photon scale ``alpha`` giving ``Poisson(alpha * y)`` the target SNR."""
    y = _masked(stack, mask)
    s1 = float(y.sum())
    s2 = float(np.vdot(y, y))
    if s2 <= 0:
        raise CalibrationError("cannot calibrate noise on an all-zero stack")
    return 10.0 ** (snr_db / 10.0) * s1 / s2


def _poisson(rng: np.random.Generator, lam: np.ndarray) -> np.ndarray:
    big = lam > _NORMAL_APPROX_MEAN
    out = rng.poisson(np.where(big, 0.0, lam)).astype(np.float64)
    if big.any():
        lb = lam[big]
        out[big] = np.round(lb + np.sqrt(lb) * rng.standard_normal(lb.shape))
    return out


def apply_poisson(stack: ImageStack, spec: NoiseSpec, mask=None) -> ImageStack:
    """Return ``Poisson(alpha * y) / alpha``; unbiased and nonnegative."""
    alpha = calibrate_scale(stack, spec.snr_db, mask)
    noisy = _poisson(spec.rng(), alpha * stack.data) / alpha
    return stack.with_data(noisy)


def empirical_snr(clean: ImageStack, noisy: ImageStack, mask=None) -> float:
    """Achieved SNR in dB: clean energy over realized noise energy."""
    y = _masked(clean, mask)
    r = _masked(noisy, mask) - y
    return float(10.0 * np.log10(np.vdot(y, y) / np.vdot(r, r)))
