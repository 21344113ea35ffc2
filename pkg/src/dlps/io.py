"""Dataset loading, synthetic scenes and result persistence.

Frame convention (shared by DiLiGenT ground truth and the renderer): x
points right along image columns, y points up (against the row index) and
z points toward the camera.

Images are assumed to hold linear radiance. Color inputs are reduced to
luma with Rec. 601 weights (0.299, 0.587, 0.114); integer images are
divided by their type maximum (or ``2**bit_depth - 1`` when a bit depth is
given).

Two dataset layouts are recognized:

* a ``manifest.txt`` of ``key = value`` lines with keys ``images``
  (whitespace or comma separated, in order), ``lights``, and optionally
  ``mask``, ``normals``, ``bit_depth`` and ``intensities``;
* the DiLiGenT layout: ``filenames.txt``, ``light_directions.txt`` and
  optionally ``mask.png``, ``light_intensities.txt``, ``Normal_gt.mat``.

Raw grids (``.f32``) are a 16-byte little-endian header (magic ``DLPS``,
uint32 rows, cols, channels) followed by C-order float32 data.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .core import ImageStack, LightSet, NormalField, check_mask

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
GRID_MAGIC = b"DLPS"
CSV_FIELDS = [
    "method", "dataset", "d", "snr_db", "realization", "mae_deg", "wall_time_s",
    "lambda", "mu", "atoms", "patch", "stride", "outer_iters", "inner_iters",
    "prox_steps", "tau", "seed",
]
# columns that legitimately differ between identical reruns
NONDETERMINISTIC_FIELDS = ("wall_time_s",)


class DatasetError(ValueError):
    pass


class CountMismatchError(DatasetError):
    pass


class UnreadableFileError(DatasetError):
    pass


class LightsFormatError(DatasetError):
    pass


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    images: tuple
    lights: Path
    mask: Path | None = None
    normals: Path | None = None
    bit_depth: int | None = None
    intensities: Path | None = None

    def check(self):
        for p in (*self.images, self.lights, self.mask, self.normals, self.intensities):
            if p is not None and not Path(p).is_file():
                raise UnreadableFileError(f"missing file: {p}")


# ---------------------------------------------------------------- images

def read_image(path, bit_depth: int | None = None) -> np.ndarray:
    """Decode one image to a 2-D float64 grayscale array in [0, 1]."""
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path)
    else:
        img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise UnreadableFileError(f"cannot decode image: {path}")
    if img.ndim == 3:
        if path.suffix != ".npy":
            img = img[..., :3][..., ::-1]  # BGR(A) -> RGB
        img = img[..., :3]
    if np.issubdtype(img.dtype, np.integer):
        top = (2 ** bit_depth - 1) if bit_depth else np.iinfo(img.dtype).max
        img = img.astype(np.float64) / top
    else:
        img = img.astype(np.float64)
    if img.ndim == 3:
        img = img @ LUMA
    return img


def write_image(path, img: np.ndarray, bit_depth: int = 16):
    """Write a [0, 1] grayscale or RGB array as an 8/16-bit PNG."""
    dtype = {8: np.uint8, 16: np.uint16}[bit_depth]
    top = np.iinfo(dtype).max
    q = np.round(np.clip(img, 0.0, 1.0) * top).astype(dtype)
    if q.ndim == 3:
        q = q[..., ::-1]
    if not cv2.imwrite(str(path), q):
        raise OSError(f"failed to write image: {path}")


# ---------------------------------------------------------------- raw grids

def write_grid(path, arr: np.ndarray):
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[..., None]
    m1, m2, ch = arr.shape
    with open(path, "wb") as f:
        f.write(GRID_MAGIC + struct.pack("<3I", m1, m2, ch))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_grid(path) -> np.ndarray:
    """Read a raw grid as float64 of shape ``(rows, cols, channels)``."""
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:4] != GRID_MAGIC:
            raise UnreadableFileError(f"not a raw grid file: {path}")
        m1, m2, ch = struct.unpack("<3I", head[4:])
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != m1 * m2 * ch:
        raise UnreadableFileError(f"truncated raw grid: {path}")
    return data.reshape(m1, m2, ch).astype(np.float64)


# ---------------------------------------------------------------- lights

def read_lights(path) -> LightSet:
    """Parse ``x y z`` lines; renormalizes directions that are not unit length."""
    return LightSet.from_unnormalized(_read_light_rows(path))


def _read_light_rows(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            parts = s.replace(",", " ").split()
            try:
                vec = [float(v) for v in parts]
            except ValueError:
                vec = []
            if len(vec) != 3 or not all(math.isfinite(v) for v in vec):
                raise LightsFormatError(f"{path}:{lineno}: expected 'x y z', got {line.strip()!r}")
            nrm = math.sqrt(sum(v * v for v in vec))
            if nrm == 0:
                raise LightsFormatError(f"{path}:{lineno}: zero-length light direction")
            if abs(nrm - 1.0) > 1e-3:
                logger.warning("%s:%d: light norm %.6g renormalized to 1", path, lineno, nrm)
            rows.append(vec)
    if not rows:
        raise LightsFormatError(f"{path}: no light directions")
    return np.asarray(rows, dtype=np.float64)


def write_lights(path, lights: LightSet):
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in lights.directions:
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def _read_intensities(path, n: int) -> np.ndarray:
    vals = np.atleast_2d(np.loadtxt(path, ndmin=2))
    if vals.shape[0] != n:
        raise CountMismatchError(f"{path}: {vals.shape[0]} intensities for {n} images")
    if vals.shape[1] == 3:
        return vals @ LUMA
    return vals[:, 0]


# ---------------------------------------------------------------- normals

def read_normals(path) -> NormalField:
    """Load ground-truth normals and row-normalize them."""
    path = Path(path)
    if path.suffix == ".mat":
        from scipy.io import loadmat

        mat = loadmat(path)
        keys = [k for k in mat if not k.startswith("__")]
        key = "Normal_gt" if "Normal_gt" in mat else keys[0]
        vol = np.asarray(mat[key], dtype=np.float64)
    elif path.suffix == ".npy":
        vol = np.load(path).astype(np.float64)
    elif path.suffix == ".f32":
        vol = read_grid(path)
    else:
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None or raw.ndim != 3:
            raise UnreadableFileError(f"cannot decode normal map: {path}")
        raw = raw[..., :3][..., ::-1]
        if np.issubdtype(raw.dtype, np.integer):
            vol = 2.0 * raw.astype(np.float64) / np.iinfo(raw.dtype).max - 1.0
        else:
            vol = raw.astype(np.float64)
    if vol.ndim != 3 or vol.shape[2] != 3:
        raise UnreadableFileError(f"{path}: expected (rows, cols, 3) normals, got {vol.shape}")
    field = NormalField.from_volume(vol)
    return NormalField(field.height, field.width, field.unit)


def normals_to_rgb(unit: np.ndarray) -> np.ndarray:
    """Encode unit normals as RGB in [0, 1] via ``(n + 1) / 2``."""
    return (np.asarray(unit) + 1.0) / 2.0


# ---------------------------------------------------------------- datasets

def _parse_manifest(root: Path) -> DatasetManifest:
    entries = {}
    path = root / "manifest.txt"
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise DatasetError(f"{path}:{lineno}: expected 'key = value'")
            k, v = (t.strip() for t in s.split("=", 1))
            entries[k] = v
    if "images" not in entries or "lights" not in entries:
        raise DatasetError(f"{path}: 'images' and 'lights' keys are required")
    opt = lambda k: root / entries[k] if entries.get(k) else None  # noqa: E731
    return DatasetManifest(
        root=root,
        images=tuple(root / n for n in entries["images"].replace(",", " ").split()),
        lights=root / entries["lights"],
        mask=opt("mask"),
        normals=opt("normals"),
        bit_depth=int(entries["bit_depth"]) if entries.get("bit_depth") else None,
        intensities=opt("intensities"),
    )


def _diligent_manifest(root: Path) -> DatasetManifest:
    with open(root / "filenames.txt", encoding="utf-8") as f:
        names = [ln.strip() for ln in f if ln.strip()]
    first = lambda *c: next((root / n for n in c if (root / n).is_file()), None)  # noqa: E731
    return DatasetManifest(
        root=root,
        images=tuple(root / n for n in names),
        lights=root / "light_directions.txt",
        mask=first("mask.png"),
        normals=first("Normal_gt.mat", "Normal_gt.npy", "Normal_gt.png"),
        intensities=first("light_intensities.txt"),
    )


def find_manifest(root) -> DatasetManifest:
    root = Path(root)
    if (root / "manifest.txt").is_file():
        return _parse_manifest(root)
    if (root / "filenames.txt").is_file() and (root / "light_directions.txt").is_file():
        return _diligent_manifest(root)
    raise DatasetError(f"{root}: no manifest.txt and not a DiLiGenT directory")


def load_dataset(root, use_intensities: bool = False):
    """Load ``(ImageStack, mask, truth-or-None)`` from a dataset directory.

    Image order follows the manifest, never the directory listing.
    ``use_intensities`` divides each image by its published light intensity
    when the dataset ships one.
    """
    man = find_manifest(root)
    man.check()
    rows = _read_light_rows(man.lights)
    if len(rows) != len(man.images):
        raise CountMismatchError(
            f"{man.lights}: {len(rows)} light directions for {len(man.images)} images"
        )
    lights = LightSet.from_unnormalized(rows)
    imgs = [read_image(p, man.bit_depth) for p in man.images]
    shape = imgs[0].shape
    for p, im in zip(man.images, imgs):
        if im.shape != shape:
            raise DatasetError(f"{p}: size {im.shape} differs from {shape}")
    data = np.stack([im.ravel() for im in imgs], axis=1)
    if use_intensities and man.intensities is not None:
        data = data / _read_intensities(man.intensities, len(imgs))[None, :]
    stack = ImageStack(shape[0], shape[1], data, lights)

    mask = None
    if man.mask is not None:
        mask = check_mask(read_image(man.mask) > 0.5, *shape)
    truth = read_normals(man.normals) if man.normals is not None else None
    if truth is not None and (truth.height, truth.width) != shape:
        raise DatasetError(f"{man.normals}: normals size does not match images")
    return stack, check_mask(mask, *shape), truth


def save_stack(root, stack: ImageStack, mask=None, truth: NormalField | None = None,
               bit_depth: int = 16):
    """Write a stack as a manifest dataset readable by :func:`load_dataset`."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    vol = stack.data.reshape(stack.height, stack.width, stack.n_images)
    if vol.max(initial=0.0) > 1.0:
        logger.warning("intensities above 1 are clipped when saved")
    for k in range(stack.n_images):
        name = f"img_{k:03d}.png"
        write_image(root / name, vol[..., k], bit_depth)
        names.append(name)
    write_lights(root / "lights.txt", stack.lights)
    lines = [f"images = {' '.join(names)}", "lights = lights.txt", f"bit_depth = {bit_depth}"]
    if mask is not None:
        write_image(root / "mask.png", np.asarray(mask, dtype=float), 8)
        lines.append("mask = mask.png")
    if truth is not None:
        write_grid(root / "normals.f32", truth.to_volume())
        lines.append("normals = normals.f32")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- synthetic

def spread_lights(d: int, max_zenith_deg: float = 45.0) -> LightSet:
    """``d`` well-spread directions on a cap around +z (Fibonacci spiral)."""
    k = np.arange(d) + 0.5
    cos_max = math.cos(math.radians(max_zenith_deg))
    z = 1.0 - k / d * (1.0 - cos_max)
    r = np.sqrt(1.0 - z * z)
    phi = k * math.pi * (3.0 - math.sqrt(5.0))
    return LightSet.from_unnormalized(np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1))


def _albedo(pattern, u, w, res):
    if isinstance(pattern, (int, float)):
        return np.full(u.shape, float(pattern))
    if isinstance(pattern, np.ndarray):
        return np.broadcast_to(pattern, u.shape).astype(float)
    if pattern == "uniform":
        return np.ones(u.shape)
    if pattern == "checker":
        cell = max(res // 8, 1)
        i, j = np.indices(u.shape)
        return np.where(((i // cell) + (j // cell)) % 2 == 0, 1.0, 0.5)
    if pattern == "radial":
        return 1.0 - 0.5 * np.sqrt(u * u + w * w)
    raise ValueError(f"unknown albedo pattern {pattern!r}")


def generate_sphere(resolution: int, lights: LightSet, albedo="uniform",
                    max_zenith_deg: float = 90.0):
    """Render an orthographic Lambertian sphere.

    Returns ``(stack, mask, truth)``. Pixels inside the disc get normal
    ``(u, w, sqrt(1 - u^2 - w^2))`` with ``u`` along columns and ``w`` up
    the rows, both in [-1, 1]; intensities are ``rho * max(l . n, 0)``.
    ``max_zenith_deg`` shrinks the disc to normals within that angle of +z,
    which keeps every pixel lit for lights close enough to the axis.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    half = resolution / 2.0
    c = (np.arange(resolution) + 0.5 - half) / half
    u, w = np.meshgrid(c, -c)
    r2 = u * u + w * w
    lim = min(math.sin(math.radians(max_zenith_deg)) ** 2, 1.0)
    mask = (r2 < lim) & (r2 < 1.0)
    nz = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    n = np.stack([u, w, nz], axis=-1) * mask[..., None]
    rho = _albedo(albedo, u, w, resolution) * mask
    scaled = (n * rho[..., None]).reshape(-1, 3)
    data = np.maximum(scaled @ lights.matrix, 0.0)
    stack = ImageStack(resolution, resolution, data, lights)
    return stack, mask, NormalField(resolution, resolution, scaled)


# ---------------------------------------------------------------- results

def append_csv(path, rows):
    """Append dict rows under the fixed :data:`CSV_FIELDS` header."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS, extrasaction="ignore")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _error_colormap(err: np.ndarray, vmax: float = 90.0) -> np.ndarray:
    scaled = np.nan_to_num(np.clip(err / vmax, 0.0, 1.0), nan=0.0)
    bgr = cv2.applyColorMap(np.round(scaled * 255).astype(np.uint8), cv2.COLORMAP_JET)
    bgr[np.isnan(err)] = 0
    return bgr


def save_results(out_dir, normals: NormalField, error_map=None, report=None,
                 csv_rows=None, csv_name: str = "results.csv"):
    """Write the normal map, raw normals, error map, report and CSV rows."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        unit = normals.unit.reshape(normals.height, normals.width, 3)
        write_image(out / "normals.png", normals_to_rgb(unit), 8)
        write_grid(out / "normals.f32", normals.to_volume())
        if error_map is not None:
            cv2.imwrite(str(out / "error_map.png"), _error_colormap(error_map))
            write_grid(out / "error_map.f32", error_map)
        if report is not None:
            payload = report.as_dict() if hasattr(report, "as_dict") else report
            (out / "report.json").write_text(
                json.dumps(payload, indent=2, default=_json_default), encoding="utf-8"
            )
        if csv_rows:
            append_csv(out / csv_name, csv_rows)
    except OSError as exc:
        raise OSError(f"failed writing results to {out}: {exc}") from exc


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
