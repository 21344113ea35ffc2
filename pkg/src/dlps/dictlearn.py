"""Adaptive dictionary learning with an l0 penalty and bounded codes.

Minimizes ``||X - D B||_F^2 + mu^2 ||B||_0`` over unit-norm atoms (columns
of ``D``) and codes with ``|B_ij| <= a`` by block coordinate descent over
the atoms: each visit sets atom ``i``'s code row by clamped hard
thresholding and then the atom itself by a normalized rank-one projection
of the residual. Both steps are exact block minimizers, so the objective
never increases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg.blas import dger

from .core import ContractError


@dataclass(frozen=True)
class DictLearnConfig:
    n_atoms: int
    mu: float
    code_bound: float = 1e6
    inner_iters: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_atoms < 1:
            raise ContractError(f"n_atoms must be >= 1, got {self.n_atoms}")
        if not self.mu > 0:
            raise ContractError(f"mu must be > 0, got {self.mu}")
        if not self.code_bound > 0:
            raise ContractError(f"code_bound must be > 0, got {self.code_bound}")
        if self.mu > self.code_bound:
            raise ContractError(
                f"mu ({self.mu}) must not exceed code_bound ({self.code_bound})"
            )
        if self.inner_iters < 1:
            raise ContractError(f"inner_iters must be >= 1, got {self.inner_iters}")


def init_dictionary(p: int, n_atoms: int, seed: int = 0) -> np.ndarray:
    """Canonical basis vectors first, then seeded Gaussian unit atoms."""
    if n_atoms < 1 or p < 1:
        raise ContractError(f"need p >= 1 and n_atoms >= 1, got {p}, {n_atoms}")
    D = np.zeros((p, n_atoms))
    k = min(p, n_atoms)
    D[np.arange(k), np.arange(k)] = 1.0
    if n_atoms > p:
        rng = np.random.default_rng(seed)
        extra = rng.standard_normal((p, n_atoms - p))
        D[:, p:] = extra / np.linalg.norm(extra, axis=0)
    return D


def hard_threshold(t: np.ndarray, mu: float, bound: float) -> np.ndarray:
    return np.clip(np.where(np.abs(t) > mu, t, 0.0), -bound, bound)


def sparse_code_atom(residual: np.ndarray, atom: np.ndarray, mu: float, bound: float) -> np.ndarray:
    """Optimal code row for one atom against the residual ``E_i``.

    Minimizes ``||E_i - atom b^T||_F^2 + mu^2 ||b||_0`` subject to
    ``|b_j| <= bound``; exact when ``mu <= bound``.
    """
    atom = np.asarray(atom, dtype=np.float64)
    if abs(np.linalg.norm(atom) - 1.0) > 1e-9:
        raise ContractError(f"atom must have unit norm, got {np.linalg.norm(atom)}")
    return hard_threshold(np.asarray(residual).T @ atom, mu, bound)


def update_atom(residual: np.ndarray, code_row: np.ndarray) -> np.ndarray:
    """Unit atom maximizing ``<d, E_i b>``; falls back to ``e_1`` when ``E_i b = 0``."""
    v = np.asarray(residual) @ np.asarray(code_row)
    nrm = np.linalg.norm(v)
    if nrm > 0:
        return v / nrm
    e1 = np.zeros(v.shape[0])
    e1[0] = 1.0
    return e1


def objective(X: np.ndarray, D: np.ndarray, B: np.ndarray, mu: float) -> float:
    """``||X - D B||_F^2 + mu^2 ||B||_0``."""
    R = X - D @ B
    return float(np.vdot(R, R) + mu * mu * np.count_nonzero(B))


def learn(patches: np.ndarray, cfg: DictLearnConfig, warm=None):
    """Run ``cfg.inner_iters`` atom sweeps on a ``(p, c)`` patch matrix.

    Parameters
    ----------
    patches : ndarray
        Patch matrix, one column per patch.
    cfg : DictLearnConfig
    warm : tuple, optional
        ``(D, B)`` to start from. ``B`` may be ``None`` for zero codes.

    Returns
    -------
    D : ndarray, shape (p, K)
    B : ndarray, shape (K, c)
    trace : list of float
        Objective after each sweep.
    """
    X = np.asarray(patches, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError(f"patch matrix must be 2-D, got shape {X.shape}")
    p, c = X.shape
    K = cfg.n_atoms
    if warm is None:
        D = init_dictionary(p, K, cfg.seed)
        B = np.zeros((K, c))
    else:
        D, B = warm
        D = np.array(D, dtype=np.float64)
        if D.shape != (p, K):
            raise ContractError(f"warm dictionary shape {D.shape}, expected {(p, K)}")
        B = np.zeros((K, c)) if B is None else np.array(B, dtype=np.float64)
        if B.shape != (K, c):
            raise ContractError(f"warm codes shape {B.shape}, expected {(K, c)}")

    mu, bound = cfg.mu, cfg.code_bound
    # residual kept transposed, (c, p), so per-patch updates touch contiguous rows
    R = (X - D @ B).T.copy()
    trace = []
    for _ in range(cfg.inner_iters):
        for i in range(K):
            d = D[:, i]
            b_old = B[i]
            old = np.flatnonzero(b_old)
            # E_i = E + d b_old^T, which differs from E only on the old support
            t = R @ d
            t[old] += b_old[old] * (d @ d)
            b_new = hard_threshold(t, mu, bound)
            new = np.flatnonzero(b_new)
            dense = old.size + new.size > c // 4
            if not new.size:
                nrm = 0.0
            elif dense:
                v = b_new @ R + d * (b_old @ b_new)
                nrm = np.linalg.norm(v)
            else:
                v = b_new[new] @ R[new] + d * (b_old[new] @ b_new[new])
                nrm = np.linalg.norm(v)
            if nrm > 0:
                d_new = v / nrm
            else:
                d_new = np.zeros(p)
                d_new[0] = 1.0
            if dense:
                # in-place rank-one updates on the Fortran view of R
                Rt = R.T
                if old.size:
                    Rt = dger(1.0, d, b_old, a=Rt, overwrite_a=True)
                if new.size:
                    Rt = dger(-1.0, d_new, b_new, a=Rt, overwrite_a=True)
                R = Rt.T
            else:
                if old.size:
                    R[old] += b_old[old, None] * d
                if new.size:
                    R[new] -= b_new[new, None] * d_new
            D[:, i] = d_new
            B[i] = b_new
        R = (X - D @ B).T.copy()
        trace.append(float(np.vdot(R, R) + mu * mu * np.count_nonzero(B)))
    return D, B, trace
