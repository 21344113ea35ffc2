"""Domain types shared across the toolkit.

Pixel order is row-major everywhere: pixel ``(x, y)`` of an ``m1 x m2``
image (``x`` = row, ``y`` = column) lives at row ``x * m2 + y`` of every
per-pixel matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

EPS_ALBEDO = 1e-12


class ContractError(ValueError):
    """Raised when inputs violate an operation's shape or value contract."""


class IllPosedError(ValueError):
    """Raised when the lighting cannot determine a normal (rank(L) < 3)."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LightSet:
    """Unit light directions, one row per image."""

    directions: np.ndarray

    def __post_init__(self):
        dirs = np.asarray(self.directions, dtype=np.float64)
        if dirs.ndim != 2 or dirs.shape[1] != 3:
            raise ContractError(f"light directions must be (d, 3), got {dirs.shape}")
        if dirs.shape[0] < 3:
            raise ContractError(f"need at least 3 lights, got {dirs.shape[0]}")
        norms = np.linalg.norm(dirs, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-9)
        if bad.size:
            raise ContractError(
                f"light {bad[0]} has norm {norms[bad[0]]:.12g}, expected 1"
            )
        object.__setattr__(self, "directions", _frozen(dirs))

    @classmethod
    def from_unnormalized(cls, directions) -> "LightSet":
        dirs = np.asarray(directions, dtype=np.float64)
        return cls(dirs / np.linalg.norm(dirs, axis=1, keepdims=True))

    @property
    def matrix(self) -> np.ndarray:
        """The 3 x d light matrix."""
        return self.directions.T

    def __len__(self) -> int:
        return self.directions.shape[0]

    def subset(self, idx) -> "LightSet":
        return LightSet(self.directions[np.asarray(idx)])


@dataclass(frozen=True)
class ImageStack:
    """``d`` grayscale images of size ``height x width`` with their lights.

    ``data`` is the ``(height*width, d)`` observation matrix; column ``k``
    is the row-major vectorization of image ``k``.
    """

    height: int
    width: int
    data: np.ndarray
    lights: LightSet

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != self.height * self.width:
            raise ContractError(
                f"data shape {data.shape} does not match {self.height}x{self.width} pixels"
            )
        if data.shape[1] != len(self.lights):
            raise ContractError(
                f"{data.shape[1]} images but {len(self.lights)} light directions"
            )
        if not np.all(np.isfinite(data)):
            raise ContractError("image intensities must be finite")
        neg = int(np.count_nonzero(data < 0))
        if neg:
            logger.warning("clamped %d negative intensities to 0", neg)
            data = np.maximum(data, 0.0)
        object.__setattr__(self, "data", _frozen(data))

    @property
    def n_images(self) -> int:
        return self.data.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def with_data(self, data: np.ndarray) -> "ImageStack":
        return ImageStack(self.height, self.width, data, self.lights)

    def subset(self, idx) -> "ImageStack":
        idx = np.asarray(idx)
        return ImageStack(self.height, self.width, self.data[:, idx], self.lights.subset(idx))


def stack_to_volume(stack: ImageStack) -> np.ndarray:
    """Return the ``(height, width, d)`` volume with ``vol[x, y, k] = I_k(x, y)``."""
    return stack.data.reshape(stack.height, stack.width, stack.n_images).copy()


def volume_to_stack(volume: np.ndarray, lights: LightSet) -> ImageStack:
    m1, m2, d = volume.shape
    return ImageStack(m1, m2, volume.reshape(m1 * m2, d), lights)


def normalize_rows(scaled: np.ndarray, eps: float = EPS_ALBEDO):
    """Split scaled normals into unit directions and albedo.

    Returns ``(unit, albedo, degenerate)``. Rows whose norm is at most
    ``eps`` come back as zero vectors with ``degenerate`` set.
    """
    scaled = np.asarray(scaled, dtype=np.float64)
    albedo = np.linalg.norm(scaled, axis=-1)
    degenerate = albedo <= eps
    unit = np.zeros_like(scaled)
    ok = ~degenerate
    unit[ok] = scaled[ok] / albedo[ok, None]
    return unit, albedo, degenerate


@dataclass(frozen=True)
class NormalField:
    """Per-pixel scaled normals ``rho * n`` as a ``(height*width, 3)`` matrix."""

    height: int
    width: int
    scaled: np.ndarray
    _views: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        s = np.asarray(self.scaled, dtype=np.float64)
        if s.shape != (self.height * self.width, 3):
            raise ContractError(
                f"normals shape {s.shape} does not match {self.height}x{self.width}x3"
            )
        object.__setattr__(self, "scaled", _frozen(s))
        object.__setattr__(self, "_views", normalize_rows(self.scaled))

    @property
    def unit(self) -> np.ndarray:
        return self._views[0]

    @property
    def albedo(self) -> np.ndarray:
        return self._views[1]

    @property
    def degenerate(self) -> np.ndarray:
        return self._views[2]

    def albedo_map(self) -> np.ndarray:
        return self.albedo.reshape(self.height, self.width)

    def to_volume(self) -> np.ndarray:
        return self.scaled.reshape(self.height, self.width, 3).copy()

    @classmethod
    def from_volume(cls, volume: np.ndarray) -> "NormalField":
        m1, m2, ch = volume.shape
        if ch != 3:
            raise ContractError(f"normal volume needs 3 channels, got {ch}")
        return cls(m1, m2, volume.reshape(m1 * m2, 3))


def check_mask(mask, height: int, width: int) -> np.ndarray:
    """Validate a boolean object mask; ``None`` means every pixel."""
    if mask is None:
        return np.ones((height, width), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (height, width):
        raise ContractError(f"mask shape {mask.shape} does not match {height}x{width}")
    return mask


def _axis_starts(dim: int, size: int, stride: int) -> np.ndarray:
    starts = list(range(0, dim - size + 1, stride))
    if starts[-1] != dim - size:
        # flush boundary patch keeps coverage total
        starts.append(dim - size)
    return np.asarray(starts, dtype=np.intp)


@dataclass(frozen=True)
class PatchGeometry:
    """Axis-aligned patch grid over a ``(m1, m2, depth)`` volume.

    Patches are anchored at voxel (0, 0, 0) and advance by ``stride``; an
    extra patch flush with the far boundary is added on any axis where the
    stride does not land exactly, so every voxel is covered. Patches are
    ordered row-major over their start positions (x slowest, z fastest) and
    each patch is vectorized with x fastest, then y, then z.
    """

    patch: tuple[int, int, int]
    volume: tuple[int, int, int]
    stride: tuple[int, int, int] | None = None

    def __post_init__(self):
        patch = tuple(int(p) for p in self.patch)
        volume = tuple(int(v) for v in self.volume)
        if len(patch) != 3 or len(volume) != 3:
            raise ContractError("patch and volume dims must be 3-tuples")
        stride = (1, 1, patch[2]) if self.stride is None else tuple(int(s) for s in self.stride)
        for name, p, v, s in zip("xyz", patch, volume, stride):
            if not 1 <= p <= v:
                raise ContractError(f"patch size {p} on axis {name} outside [1, {v}]")
            if not 1 <= s <= p:
                # a stride longer than the patch would leave uncovered voxels
                raise ContractError(f"stride {s} on axis {name} outside [1, {p}]")
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "volume", volume)
        object.__setattr__(self, "stride", stride)

    @property
    def starts(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(_axis_starts(v, p, s) for v, p, s in zip(self.volume, self.patch, self.stride))

    @property
    def patch_length(self) -> int:
        cx, cy, cz = self.patch
        return cx * cy * cz

    @property
    def count(self) -> int:
        return int(np.prod([len(s) for s in self.starts]))

    def patch_offsets(self) -> np.ndarray:
        """Voxel offsets ``(p, 3)`` in within-patch vector order."""
        cx, cy, cz = self.patch
        z, y, x = np.meshgrid(np.arange(cz), np.arange(cy), np.arange(cx), indexing="ij")
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    def patch_origins(self) -> np.ndarray:
        """Start voxel ``(c, 3)`` of each patch in patch order."""
        xs, ys, zs = self.starts
        grid = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def index_map(self) -> np.ndarray:
        """Flat (C-order) voxel index of every patch entry, shape ``(p, c)``.

        Column ``j`` lists the voxels selected by ``P_j``.
        """
        vox = self.patch_origins()[None, :, :] + self.patch_offsets()[:, None, :]
        return np.ravel_multi_index((vox[..., 0], vox[..., 1], vox[..., 2]), self.volume)
