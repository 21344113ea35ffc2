"""Patch extraction operators, their adjoint, and the diagonal Gram matrix.

For a geometry ``g`` with ``c`` patches of length ``p``, ``extract_patches``
applies the stacked operator ``[P_1; ...; P_c]`` and returns a ``(p, c)``
matrix; ``adjoint_patches`` applies its transpose, scattering each column
back onto the volume and summing overlaps.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ContractError, PatchGeometry


def _check_volume(volume: np.ndarray, geom: PatchGeometry):
    if tuple(volume.shape) != geom.volume:
        raise ContractError(f"volume shape {volume.shape} does not match geometry {geom.volume}")


def extract_patches(volume: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    """Return the ``(p, c)`` patch matrix whose column ``j`` is ``P_j v``."""
    volume = np.asarray(volume, dtype=np.float64)
    _check_volume(volume, geom)
    xs, ys, zs = geom.starts
    windows = sliding_window_view(volume, geom.patch)[np.ix_(xs, ys, zs)]
    # (nx, ny, nz, cx, cy, cz) -> x fastest inside each patch
    windows = windows.transpose(0, 1, 2, 5, 4, 3)
    return np.ascontiguousarray(windows.reshape(geom.count, geom.patch_length).T)


def adjoint_patches(patches: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    """Return ``sum_j P_j^T patches[:, j]`` as a volume."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (geom.patch_length, geom.count):
        raise ContractError(
            f"patch matrix shape {patches.shape} does not match "
            f"({geom.patch_length}, {geom.count})"
        )
    xs, ys, zs = geom.starts
    cx, cy, cz = geom.patch
    blocks = patches.reshape(cz, cy, cx, len(xs), len(ys), len(zs))
    out = np.zeros(geom.volume)
    # Starts are distinct per axis, so each offset writes to distinct voxels
    # and plain fancy-index accumulation is safe. Offset order is fixed.
    for c in range(cz):
        for b in range(cy):
            for a in range(cx):
                out[np.ix_(xs + a, ys + b, zs + c)] += blocks[c, b, a]
    return out


def _axis_coverage(dim: int, size: int, starts: np.ndarray) -> np.ndarray:
    cov = np.zeros(dim, dtype=np.int64)
    for s in starts:
        cov[s:s + size] += 1
    return cov


def gram_diagonal(geom: PatchGeometry) -> np.ndarray:
    """Per-voxel patch coverage counts, the diagonal of ``sum_j P_j^T P_j``."""
    covs = [
        _axis_coverage(v, p, s) for v, p, s in zip(geom.volume, geom.patch, geom.starts)
    ]
    # the patch grid is a Cartesian product, so coverage factorizes per axis
    return np.einsum("i,j,k->ijk", *covs).astype(np.float64)
