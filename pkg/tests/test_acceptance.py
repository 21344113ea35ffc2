"""Acceptance criteria, one test per criterion.

Every test records a ``[PASS]``/``[FAIL]`` line that is printed in the
"acceptance criteria" section of the pytest summary.
"""

import hashlib
import itertools
import os
from pathlib import Path

import numpy as np
import pytest

from dlps import io, metrics, noise, solvers
from dlps.core import ImageStack, LightSet, PatchGeometry
from dlps.dictlearn import sparse_code_atom
from dlps.experiments import Cell, Dataset, build_cells, run_cell, run_cells, summarize
from dlps.patch import adjoint_patches, extract_patches, gram_diagonal

from conftest import ACCEPTANCE_LINES, random_lights
from test_dictlearn import brute_force_code
from test_patch import coverage_oracle

# fingerprints of each suite, compared against an independent rerun by criterion 8
FINGERPRINTS = {}

# desk-scale solver settings for the robustness sweep
ROBUST_BASE = solvers.SolverConfig(patch=(6, 6, 5), stride=(2, 2, 5), n_atoms=32,
                                   outer_iters=3, inner_iters=3, prox_steps=10)
ROBUST_LAMS = [0.1, 1.0, 10.0, 100.0]
ROBUST_MUS = [0.05, 0.1, 0.2, 0.4]


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    assert ok, detail


def digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- suites

def suite_inversion():
    stack, mask, truth = io.generate_sphere(64, io.spread_lights(10, 30.0), max_zenith_deg=55.0)
    clamped = int(np.count_nonzero(stack.data[mask.ravel()] <= 0))
    est = solvers.least_squares(stack)
    return metrics.mae(est, truth, mask), clamped, digest(est.scaled)


def suite_patch_ops(seed=2):
    rng = np.random.default_rng(seed)
    worst_adj, gram_ok, h = 0.0, True, []
    for k in range(50):
        vol = tuple(int(v) for v in rng.integers(1, 9, 3))
        patch = tuple(int(rng.integers(1, v + 1)) for v in vol)
        stride = tuple(int(rng.integers(1, p + 1)) for p in patch)
        g = PatchGeometry(patch, vol, stride)
        x = rng.normal(size=vol)
        z = rng.normal(size=(g.patch_length, g.count))
        px = extract_patches(x, g)
        ptz = adjoint_patches(z, g)
        lhs, rhs = np.vdot(px, z), np.vdot(x, ptz)
        worst_adj = max(worst_adj, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
        if k < 10:
            gram_ok &= np.array_equal(gram_diagonal(g), coverage_oracle(g.volume, g.patch, g.stride))
        h.append(digest(px, ptz))
    return worst_adj, gram_ok, "".join(h)


def suite_sparse_coding(seed=3):
    rng = np.random.default_rng(seed)
    worst, h = 0.0, []
    for _ in range(100):
        p, c = int(rng.integers(1, 6)), int(rng.integers(1, 11))
        E = rng.normal(size=(p, c))
        atom = rng.normal(size=p)
        atom /= np.linalg.norm(atom)
        mu = float(rng.uniform(0.05, 1.5))
        bound = float(rng.uniform(mu, 3.0))
        got = sparse_code_atom(E, atom, mu, bound)
        want, _ = brute_force_code(E, atom, mu, bound)
        f = lambda b: np.sum((E - np.outer(atom, b)) ** 2) + mu ** 2 * np.count_nonzero(b)  # noqa: E731
        worst = max(worst, abs(f(got) - f(want)), np.abs(got - want).max())
        h.append(digest(got))
    return worst, "".join(h)


def suite_descent(seed=4):
    rng = np.random.default_rng(seed)
    worst, h = -np.inf, []
    cfg = solvers.SolverConfig(lam=1.0, mu=0.05, patch=(4, 4, 4), stride=(2, 2, 4), n_atoms=24,
                               outer_iters=6, inner_iters=2, prox_steps=5, tol=0.0)
    for _ in range(20):
        stack = ImageStack(16, 16, rng.uniform(0, 1, (256, 8)), random_lights(rng, 8))
        for method in ("dlpi", "dlnv"):
            est, rep = solvers.estimate(stack, method, cfg)
            t = np.asarray(rep.objective_trace)
            worst = max(worst, float(np.max((t[1:] - t[:-1]) / np.abs(t[:-1]))))
            h.append(digest(t, est.scaled))
    return worst, "".join(h)


def suite_gradient(seed=5):
    rng = np.random.default_rng(seed)
    worst_fd, worst_kron = 0.0, 0.0
    for _ in range(10):
        m, d = int(rng.integers(1, 13)), int(rng.integers(3, 9))
        L = random_lights(rng, d).matrix
        Y = rng.uniform(size=(m, d))
        N = rng.normal(size=(m, 3))
        f = lambda M: 0.5 * np.sum((Y - M @ L) ** 2)  # noqa: E731
        g = solvers.data_gradient(N, Y, L)
        fd = np.zeros_like(N)
        for idx in np.ndindex(N.shape):
            e = np.zeros_like(N)
            e[idx] = 1e-5
            fd[idx] = (f(N + e) - f(N - e)) / 2e-5
        worst_fd = max(worst_fd, np.linalg.norm(g - fd) / np.linalg.norm(g))
        A = np.kron(L.T, np.eye(m))
        R = rng.normal(size=(m, d))
        worst_kron = max(
            worst_kron,
            np.abs(solvers.apply_A(N, L).ravel(order="F") - A @ N.ravel(order="F")).max(),
            np.abs(solvers.apply_At(R, L).ravel(order="F") - A.T @ R.ravel(order="F")).max(),
        )
    return worst_fd, worst_kron


def suite_noise(seed=6):
    rng = np.random.default_rng(seed)
    stack = ImageStack(100, 100, rng.uniform(0.05, 1.0, (10000, 4)), random_lights(rng, 4))
    out, h = {}, []
    for snr in (1.0, 10.0, 30.0):
        noisy = noise.apply_poisson(stack, noise.NoiseSpec(snr, seed=seed))
        out[snr] = noise.empirical_snr(stack, noisy)
        h.append(digest(noisy.data))
    return out, stack.n_pixels, "".join(h)


def robust_dataset():
    stack, mask, truth = io.generate_sphere(64, io.spread_lights(20, 45.0))
    return Dataset("sphere:64:20", stack, mask, truth)


def suite_robustness(jobs=1):
    ds = robust_dataset()
    cells = build_cells(["ls", "dlpi", "dlnv"], [20], [10.0, 1.0], 5, ROBUST_LAMS, ROBUST_MUS)
    rows = run_cells(ds, cells, ROBUST_BASE, jobs)
    best = {}
    for s in summarize(rows):
        if s["best"]:
            best[(s["method"], float(s["snr_db"]))] = s
    return best, rows


# ---------------------------------------------------------------- criteria

def test_criterion_1_forward_inversion():
    mae, clamped, FINGERPRINTS[1] = suite_inversion()
    record(1, clamped == 0 and mae <= 1e-6,
           f"least squares on unclamped noiseless sphere: MAE {mae:.3e} deg (<= 1e-6), "
           f"{clamped} clamped pixels")


def test_criterion_2_patch_adjoint_and_gram():
    worst, gram_ok, FINGERPRINTS[2] = suite_patch_ops()
    record(2, worst <= 1e-10 and gram_ok,
           f"adjoint identity worst rel. error {worst:.2e} (<= 1e-10) on 50 pairs; "
           f"gram diagonal matches coverage counts on 10 geometries: {gram_ok}")


def test_criterion_3_sparse_coding_optimal():
    worst, FINGERPRINTS[3] = suite_sparse_coding()
    record(3, worst <= 1e-12,
           f"sparse coding vs exhaustive support search, 100 instances: worst gap {worst:.2e} (<= 1e-12)")


def test_criterion_4_monotone_descent():
    worst, FINGERPRINTS[4] = suite_descent()
    record(4, worst <= 1e-9,
           f"DLPI/DLNV objective traces on 20 problems (16x16, d=8, auto tau): "
           f"largest relative increase {worst:.2e} (<= 1e-9)")


def test_criterion_5_gradient():
    fd, kron = suite_gradient()
    FINGERPRINTS[5] = digest([fd, kron])
    record(5, fd <= 1e-6 and kron <= 1e-12,
           f"gradient vs central differences worst rel. {fd:.2e} (<= 1e-6); "
           f"matrix-free vs Kronecker worst abs. {kron:.2e} (<= 1e-12)")


def test_criterion_6_noise_calibration():
    snrs, size, FINGERPRINTS[6] = suite_noise()
    worst = max(abs(v - k) for k, v in snrs.items())
    detail = ", ".join(f"{k:g} dB -> {v:.3f}" for k, v in snrs.items())
    record(6, size >= 1e4 and worst <= 0.5,
           f"achieved SNR on a {size}-pixel stack: {detail} (within 0.5 dB)")


@pytest.mark.slow
def test_criterion_7_robustness_ordering():
    best, rows = suite_robustness()
    FINGERPRINTS[7] = rows
    ok, parts = True, []
    for snr in (1.0, 10.0):
        ls = best[("ls", snr)]["mae_mean"]
        for m in ("dlpi", "dlnv"):
            v = best[(m, snr)]["mae_mean"]
            good = v <= 0.8 * ls if snr == 1.0 else v <= ls
            ok &= good
            parts.append(f"{m}@{snr:g}dB {v:.2f} vs LS {ls:.2f}")
    record(7, ok, "best-parameter MAE (5 realizations, 4x4 grid): " + "; ".join(parts)
           + " (need <= 0.8*LS at 1 dB, <= LS at 10 dB)")


def test_criterion_8_determinism():
    same = {
        1: suite_inversion()[2] == FINGERPRINTS.get(1, suite_inversion()[2]),
        2: suite_patch_ops()[2] == FINGERPRINTS.get(2, suite_patch_ops()[2]),
        3: suite_sparse_coding()[1] == FINGERPRINTS.get(3, suite_sparse_coding()[1]),
        4: suite_descent()[1] == FINGERPRINTS.get(4, suite_descent()[1]),
        5: digest(suite_gradient()) == FINGERPRINTS.get(5, digest(suite_gradient())),
        6: suite_noise()[2] == FINGERPRINTS.get(6, suite_noise()[2]),
    }
    # the sweep is too slow to repeat in full: rerun a few cells serially and in a pool
    ds = robust_dataset()
    cells = [Cell("ls", 20, 1.0, 3, 0.1, 0.05), Cell("dlpi", 20, 1.0, 2, 10.0, 0.2),
             Cell("dlnv", 20, 10.0, 4, 1.0, 0.4)]
    strip = lambda r: {k: v for k, v in r.items() if k not in io.NONDETERMINISTIC_FIELDS}  # noqa: E731
    serial = [strip(run_cell(ds, c, ROBUST_BASE)[0]) for c in cells]
    pooled = [strip(r) for r in run_cells(ds, cells, ROBUST_BASE, jobs=2)]
    same[7] = serial == pooled
    if 7 in FINGERPRINTS:
        by_cell = {(r["method"], r["snr_db"], r["realization"], r["lambda"], r["mu"]): strip(r)
                   for r in FINGERPRINTS[7]}
        same[7] &= all(by_cell[(r["method"], r["snr_db"], r["realization"], r["lambda"],
                                r["mu"])] == r for r in serial)
    bad = [k for k, v in same.items() if not v]
    record(8, not bad, f"bit-identical reruns of suites 1-7: "
           + ("all identical" if not bad else f"differences in {bad}"))


BEAR = os.environ.get("DLPS_DILIGENT_BEAR")
REFERENCE_MAE = {5: {"dlpi": 20.91, "dlnv": 21.43, "ls": 34.25},
             96: {"dlpi": 8.69, "dlnv": 8.61, "ls": 9.45}}


@pytest.mark.dataset
def test_criterion_9_diligent_bear():
    if not BEAR:
        ACCEPTANCE_LINES.append("[SKIP] criterion 9: DiLiGenT Bear not supplied "
                                "(set DLPS_DILIGENT_BEAR to the bearPNG directory)")
        pytest.skip("set DLPS_DILIGENT_BEAR to the DiLiGenT bearPNG directory")
    stack, mask, truth = io.load_dataset(Path(BEAR))
    ds = Dataset("bear", stack, mask, truth)
    base = solvers.SolverConfig(outer_iters=5, inner_iters=3, n_atoms=64)
    cells = build_cells(["ls", "dlpi", "dlnv"], [5, 96], [10.0], 5, [0.1, 1.0, 10.0],
                        [0.05, 0.1, 0.2])
    rows = run_cells(ds, cells, base, jobs=os.cpu_count() or 1)
    best = {(s["method"], int(s["d"])): s["mae_mean"] for s in summarize(rows) if s["best"]}
    ok, parts = True, []
    for d in (5, 96):
        ls = best[("ls", d)]
        for m in ("dlpi", "dlnv"):
            ok &= best[(m, d)] < ls
            if d == 5:
                ok &= ls - best[(m, d)] > 5.0
        parts.append(", ".join(f"{m} {best[(m, d)]:.2f} (reference {REFERENCE_MAE[d][m]})"
                               for m in ("ls", "dlpi", "dlnv")) + f" at d'={d}")
    band = all(abs(best[(m, 96)] - REFERENCE_MAE[96][m]) <= 2.0 for m in ("ls", "dlpi", "dlnv"))
    record(9, ok, "DiLiGenT Bear, 10 dB, 5 realizations: " + "; ".join(parts)
           + f"; within +/-2 deg of reference at d'=96: {band}")
