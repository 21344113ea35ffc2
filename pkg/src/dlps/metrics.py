"""Angular error between normal fields."""

from __future__ import annotations

import numpy as np

from .core import ContractError, NormalField, check_mask

DEGENERATE_SCORE = 90.0


def angular_error_map(est: NormalField, truth: NormalField, mask=None) -> np.ndarray:
    """Per-pixel angle in degrees between unit normals.

    Pixels outside ``mask`` are NaN. A pixel where either field is
    degenerate (zero albedo) scores 90 degrees.
    """
    if (est.height, est.width) != (truth.height, truth.width):
        raise ContractError(
            f"field sizes differ: {est.height}x{est.width} vs {truth.height}x{truth.width}"
        )
    mask = check_mask(mask, est.height, est.width).ravel()
    a, b = est.unit, truth.unit
    # atan2 form stays accurate near 0 and 180 degrees, unlike arccos of the dot
    cross = np.linalg.norm(np.cross(a, b), axis=1)
    dot = np.einsum("ij,ij->i", a, b)
    ang = np.degrees(np.arctan2(cross, dot))
    ang[est.degenerate | truth.degenerate] = DEGENERATE_SCORE
    ang[~mask] = np.nan
    return ang.reshape(est.height, est.width)


def mean_angular_error(error_map: np.ndarray, mask=None) -> float:
    error_map = np.asarray(error_map, dtype=np.float64)
    mask = check_mask(mask, *error_map.shape)
    if not mask.any():
        raise ContractError("mask selects no pixels")
    return float(np.mean(error_map[mask]))


def mae(est: NormalField, truth: NormalField, mask=None) -> float:
    """Mean angular error in degrees over the masked pixels."""
    return mean_angular_error(angular_error_map(est, truth, mask), mask)
