"""Noise/image-count/parameter sweeps producing CSV rows.

Every cell of a sweep is an independent job. The noise realization of a
cell is seeded by ``(seed, realization)`` and the image subset by
``seed`` alone, so serial and parallel runs agree bit for bit and all
methods and parameter values at a cell see the same corrupted images.
"""

from __future__ import annotations

import itertools
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import io, metrics, noise, solvers
from .core import ImageStack, LightSet, NormalField

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    name: str
    stack: ImageStack
    mask: np.ndarray
    truth: NormalField | None = None


@dataclass(frozen=True)
class Cell:
    method: str
    n_images: int
    snr_db: float | None
    realization: int
    lam: float
    mu: float


def resolve_dataset(spec: str) -> Dataset:
    """Load a dataset directory, or render a synthetic sphere.

    The synthetic form is ``sphere[:RES[:D[:LIGHT_ZENITH[:NORMAL_ZENITH]]]]``
    (defaults 64, 20, 45 and 90 degrees).
    """
    if spec.startswith("sphere"):
        parts = spec.split(":")[1:]
        res = int(parts[0]) if len(parts) > 0 else 64
        d = int(parts[1]) if len(parts) > 1 else 20
        zen = float(parts[2]) if len(parts) > 2 else 45.0
        cap = float(parts[3]) if len(parts) > 3 else 90.0
        stack, mask, truth = io.generate_sphere(res, io.spread_lights(d, zen), max_zenith_deg=cap)
        return Dataset(spec, stack, mask, truth)
    stack, mask, truth = io.load_dataset(spec)
    return Dataset(spec, stack, mask, truth)


def select_lights(lights: LightSet, k: int, seed: int = 0) -> np.ndarray:
    """Pick ``k`` well-spread lights by greedy farthest-point sampling.

    Starts from the light closest to the viewing axis; ties are broken by a
    seeded permutation. Returned indices are sorted.
    """
    d = len(lights)
    if not 1 <= k <= d:
        raise ValueError(f"subset size {k} outside [1, {d}]")
    if k == d:
        return np.arange(d)
    dirs = lights.directions
    rank = np.empty(d, dtype=np.intp)
    rank[np.random.default_rng(seed).permutation(d)] = np.arange(d)

    def best(scores):
        top = np.flatnonzero(np.isclose(scores, scores.max(), rtol=0, atol=1e-12))
        return top[np.argmin(rank[top])]

    chosen = [best(dirs[:, 2])]
    mind = np.arccos(np.clip(dirs @ dirs[chosen[0]], -1.0, 1.0))
    while len(chosen) < k:
        scores = mind.copy()
        scores[chosen] = -1.0
        nxt = best(scores)
        chosen.append(nxt)
        mind = np.minimum(mind, np.arccos(np.clip(dirs @ dirs[nxt], -1.0, 1.0)))
    return np.sort(np.asarray(chosen))


def prepare_stack(ds: Dataset, n_images: int, snr_db, realization: int, seed: int):
    """Subsample and corrupt; returns ``(noisy, clean)`` stacks."""
    clean = ds.stack
    if n_images != clean.n_images:
        clean = clean.subset(select_lights(clean.lights, n_images, seed))
    if snr_db is None:
        return clean, clean
    spec = noise.NoiseSpec(float(snr_db), seed, realization)
    return noise.apply_poisson(clean, spec, ds.mask), clean


def reference_normals(ds: Dataset) -> NormalField:
    """Ground truth, or least squares on the clean full stack when absent."""
    if ds.truth is not None:
        return ds.truth
    logger.info("%s has no ground truth; using least squares on clean images", ds.name)
    return solvers.least_squares(ds.stack)


def _fmt_triplet(t) -> str:
    return "" if t is None else "x".join(str(int(v)) for v in t)


def make_row(ds_name, cell: Cell, cfg: solvers.SolverConfig, mae, wall) -> dict:
    dl = cell.method != "ls"
    return {
        "method": cell.method,
        "dataset": ds_name,
        "d": cell.n_images,
        "snr_db": "" if cell.snr_db is None else repr(float(cell.snr_db)),
        "realization": cell.realization,
        "mae_deg": "" if mae is None else repr(float(mae)),
        "wall_time_s": f"{wall:.4f}",
        "lambda": repr(cell.lam) if dl else "",
        "mu": repr(cell.mu) if dl else "",
        "atoms": "" if not dl or cfg.n_atoms is None else cfg.n_atoms,
        "patch": _fmt_triplet(cfg.patch) if dl else "",
        "stride": _fmt_triplet(cfg.stride) if dl else "",
        "outer_iters": cfg.outer_iters if dl else "",
        "inner_iters": cfg.inner_iters if dl else "",
        "prox_steps": cfg.prox_steps if cell.method == "dlnv" else "",
        "tau": ("auto" if cfg.tau is None else repr(cfg.tau)) if cell.method == "dlnv" else "",
        "seed": cfg.seed,
    }


def run_cell(ds: Dataset, cell: Cell, base: solvers.SolverConfig, truth=None):
    """Run one sweep cell; returns ``(row, normals, report)``."""
    cfg = replace(base, lam=cell.lam, mu=cell.mu)
    noisy, _ = prepare_stack(ds, cell.n_images, cell.snr_db, cell.realization, base.seed)
    t0 = time.perf_counter()
    normals, report = solvers.estimate(noisy, cell.method, cfg)
    wall = time.perf_counter() - t0
    ref = truth if truth is not None else reference_normals(ds)
    mae = metrics.mae(normals, ref, ds.mask)
    return make_row(ds.name, cell, cfg, mae, wall), normals, report


_WORKER = {}


def _init_worker(ds, base, truth):
    _WORKER.update(ds=ds, base=base, truth=truth)


def _work(cell):
    return run_cell(_WORKER["ds"], cell, _WORKER["base"], _WORKER["truth"])[0]


def run_cells(ds: Dataset, cells, base: solvers.SolverConfig, jobs: int = 1) -> list:
    """Run cells (optionally in a process pool); rows come back in cell order."""
    truth = reference_normals(ds)
    cells = list(cells)
    if jobs <= 1 or len(cells) <= 1:
        return [run_cell(ds, c, base, truth)[0] for c in cells]
    with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(ds, base, truth)) as ex:
        return list(ex.map(_work, cells))


def build_cells(methods, counts, snrs, realizations, lams, mus) -> list:
    cells = []
    for n, snr, r, method in itertools.product(counts, snrs, range(realizations), methods):
        grid = [(lams[0], mus[0])] if method == "ls" else itertools.product(lams, mus)
        for lam, mu in grid:
            cells.append(Cell(method, n, snr, r, lam, mu))
    return cells


def summarize(rows) -> list:
    """Mean/std of MAE over realizations, with the best (lambda, mu) flagged.

    Best parameters are chosen separately for every (method, d, SNR) cell.
    """
    groups = {}
    for row in rows:
        key = (row["method"], row["d"], row["snr_db"], row["lambda"], row["mu"])
        groups.setdefault(key, []).append(float(row["mae_deg"]))
    out = []
    for (method, d, snr, lam, mu), vals in groups.items():
        out.append({
            "method": method, "d": d, "snr_db": snr, "lambda": lam, "mu": mu,
            "mae_mean": statistics.fmean(vals),
            "mae_std": statistics.pstdev(vals) if len(vals) > 1 else 0.0,
            "n": len(vals), "best": False,
        })
    best = {}
    for s in out:
        k = (s["method"], s["d"], s["snr_db"])
        if k not in best or s["mae_mean"] < best[k]["mae_mean"]:
            best[k] = s
    for s in best.values():
        s["best"] = True
    return out
