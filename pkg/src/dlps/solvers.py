"""Normal-field estimators: least squares, DLPI and DLNV.

DLPI cleans the image stack with a patch-sparse dictionary prior and then
solves least squares. DLNV places the same kind of prior directly on the
scaled normal field (shaped ``m1 x m2 x 3``) and fits it with proximal
gradient steps on the Lambertian data term.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dictlearn
from .core import ContractError, IllPosedError, ImageStack, NormalField, PatchGeometry
from .patch import adjoint_patches, extract_patches, gram_diagonal

logger = logging.getLogger(__name__)

METHODS = ("ls", "dlpi", "dlnv")


@dataclass(frozen=True)
class SolverConfig:
    """Parameters for DLPI / DLNV.

    ``patch`` and ``stride`` default per method: DLPI uses
    ``(8, 8, min(d, 5))`` over the image volume, DLNV ``(8, 8, 3)`` over the
    normal volume; stride defaults to 1 spatially and the patch depth
    across slices. Patch sizes are clipped to the volume. ``n_atoms``
    defaults to twice the patch length and ``tau=None`` selects the
    automatic proximal step.
    """

    lam: float = 1.0
    mu: float = 0.1
    n_atoms: int | None = None
    code_bound: float = 1e6
    inner_iters: int = 5
    patch: tuple[int, int, int] | None = None
    stride: tuple[int, int, int] | None = None
    outer_iters: int = 20
    prox_steps: int = 10
    tau: float | None = None
    tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise ContractError(f"lambda must be > 0, got {self.lam}")
        if not self.mu > 0:
            raise ContractError(f"mu must be > 0, got {self.mu}")
        if self.outer_iters < 1:
            raise ContractError(f"outer_iters must be >= 1, got {self.outer_iters}")
        if self.prox_steps < 1:
            raise ContractError(f"prox_steps must be >= 1, got {self.prox_steps}")
        if self.tau is not None and not self.tau > 0:
            raise ContractError(f"tau must be > 0, got {self.tau}")
        if self.n_atoms is not None and self.n_atoms < 1:
            raise ContractError(f"n_atoms must be >= 1, got {self.n_atoms}")
        # surfaces code_bound / inner_iters problems at construction time
        dictlearn.DictLearnConfig(
            1, self.mu, self.code_bound, self.inner_iters, self.seed
        )

    def geometry(self, volume: tuple[int, int, int], default_patch) -> PatchGeometry:
        patch = self.patch if self.patch is not None else default_patch
        patch = tuple(min(int(p), int(v)) for p, v in zip(patch, volume))
        stride = self.stride
        if stride is None:
            stride = (1, 1, patch[2])
        stride = tuple(min(int(s), p) for s, p in zip(stride, patch))
        return PatchGeometry(patch, volume, stride)

    def dict_config(self, patch_length: int) -> dictlearn.DictLearnConfig:
        k = self.n_atoms if self.n_atoms is not None else 2 * patch_length
        return dictlearn.DictLearnConfig(k, self.mu, self.code_bound, self.inner_iters, self.seed)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SolveReport:
    objective_trace: list = field(default_factory=list)
    change_trace: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    final_rel_change: float = float("nan")
    converged: bool = False
    tau: float | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    warnings: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.objective_trace)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["iterations"] = self.iterations
        return d


class _Timer:
    def __init__(self, report: SolveReport, key: str):
        self.report, self.key = report, key

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        t = self.report.timings
        t[self.key] = t.get(self.key, 0.0) + time.perf_counter() - self.t0


def _check_rank(L: np.ndarray):
    rank = np.linalg.matrix_rank(L)
    if rank < 3:
        raise IllPosedError(
            f"light matrix has rank {rank} < 3; directions:\n{np.array2string(L.T, precision=4)}"
        )


def least_squares(stack: ImageStack) -> NormalField:
    """Closed-form ``N = Y L^+``."""
    L = stack.lights.matrix
    _check_rank(L)
    N = stack.data @ np.linalg.pinv(L)
    return NormalField(stack.height, stack.width, N)


def spectral_norm_sq(L: np.ndarray, iters: int = 50, tol: float = 1e-10) -> float:
    """Largest eigenvalue of ``L L^T`` by power iteration."""
    M = L @ L.T
    x = np.ones(M.shape[0]) / np.sqrt(M.shape[0])
    val = 0.0
    for _ in range(iters):
        y = M @ x
        nrm = np.linalg.norm(y)
        if nrm == 0:
            return 0.0
        x = y / nrm
        new = float(x @ M @ x)
        if abs(new - val) <= tol * abs(new):
            val = new
            break
        val = new
    return val


def apply_A(N: np.ndarray, L: np.ndarray) -> np.ndarray:
    """``A n`` with ``A = L^T kron I``, returned in matrix form ``N L``."""
    return N @ L


def apply_At(R: np.ndarray, L: np.ndarray) -> np.ndarray:
    """``A^T r`` in matrix form ``R L^T``."""
    return R @ L.T


def data_gradient(N: np.ndarray, Y: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Gradient of ``0.5 ||Y - N L||_F^2`` with respect to ``N``."""
    return apply_At(apply_A(N, L) - Y, L)


def _prior(X: np.ndarray, D: np.ndarray, B: np.ndarray, mu: float) -> float:
    return dictlearn.objective(X, D, B, mu)


def dlpi_objective(y, v, D, B, lam, mu, geom) -> float:
    """``0.5||y - v||^2 + lam (sum_j ||P_j v - D b_j||^2 + mu^2 ||B||_0)``."""
    r = y - v
    return 0.5 * float(np.vdot(r, r)) + lam * _prior(extract_patches(v, geom), D, B, mu)


def dlnv_objective(Y, N, L, D, B, lam, mu, geom) -> float:
    """``0.5||Y - N L||^2 + lam (sum_j ||P_j n - D b_j||^2 + mu^2 ||B||_0)``."""
    r = Y - N @ L
    vol = N.reshape(geom.volume)
    return 0.5 * float(np.vdot(r, r)) + lam * _prior(extract_patches(vol, geom), D, B, mu)


def v_update(y: np.ndarray, DB: np.ndarray, lam: float, geom: PatchGeometry, gram=None) -> np.ndarray:
    """Exact minimizer over ``v`` with the dictionary fixed (diagonal solve)."""
    if gram is None:
        gram = gram_diagonal(geom)
    return (y + 2 * lam * adjoint_patches(DB, geom)) / (1 + 2 * lam * gram)


def prox_step(N, Y, L, back, tau, lam, gram_flat) -> np.ndarray:
    """One proximal gradient step on the normal field.

    ``back`` is ``sum_j P_j^T D b_j`` flattened to match ``N``.
    """
    Nt = N - tau * data_gradient(N, Y, L)
    return (Nt + 2 * tau * lam * back) / (1 + 2 * tau * lam * gram_flat)


def _rel_change(new, old) -> float:
    den = np.linalg.norm(old)
    return float(np.linalg.norm(new - old) / den) if den > 0 else float(np.linalg.norm(new))


def dlpi_preprocess(stack: ImageStack, cfg: SolverConfig, warm=None):
    """Denoise the stack by alternating dictionary learning and the v-update.

    ``warm`` optionally seeds the first dictionary step with ``(D, B)``.
    Returns the cleaned stack and a :class:`SolveReport`.
    """
    report = SolveReport(config=cfg.as_dict(), seed=cfg.seed)
    d = stack.n_images
    y = stack.data.reshape(stack.height, stack.width, d)
    geom = cfg.geometry((stack.height, stack.width, d), (8, 8, min(d, 5)))
    dcfg = cfg.dict_config(geom.patch_length)
    gram = gram_diagonal(geom)

    v = y.copy()
    D, B = (None, None) if warm is None else warm
    for _ in range(cfg.outer_iters):
        with _Timer(report, "learn"):
            X = extract_patches(v, geom)
            D, B, _ = dictlearn.learn(X, dcfg, None if D is None else (D, B))
        with _Timer(report, "update"):
            v_new = v_update(y, D @ B, cfg.lam, geom, gram)
        with _Timer(report, "objective"):
            report.objective_trace.append(
                dlpi_objective(y, v_new, D, B, cfg.lam, cfg.mu, geom)
            )
        change = _rel_change(v_new, v)
        report.change_trace.append(change)
        v = v_new
        if change < cfg.tol:
            report.converged = True
            break
    report.final_rel_change = report.change_trace[-1]

    neg = int(np.count_nonzero(v < 0))
    if neg:
        logger.debug("clamping %d negative cleaned intensities", neg)
    cleaned = stack.with_data(np.maximum(v, 0.0).reshape(stack.n_pixels, d))
    return cleaned, report


def dlpi(stack: ImageStack, cfg: SolverConfig, warm=None):
    _check_rank(stack.lights.matrix)
    cleaned, report = dlpi_preprocess(stack, cfg, warm)
    with _Timer(report, "least_squares"):
        normals = least_squares(cleaned)
    return normals, report


def dlnv(stack: ImageStack, cfg: SolverConfig, warm=None):
    """Fit the normal field under a learned patch-sparse prior.

    Starts from the least-squares field; ``warm`` optionally seeds the
    first dictionary step with ``(D, B)``.
    """
    report = SolveReport(config=cfg.as_dict(), seed=cfg.seed)
    L = stack.lights.matrix
    Y = stack.data
    m1, m2 = stack.height, stack.width
    with _Timer(report, "least_squares"):
        N = least_squares(stack).scaled.copy()

    lip = spectral_norm_sq(L)
    if cfg.tau is None:
        tau = 0.99 / lip
    else:
        tau = cfg.tau
        if tau > 2.0 / lip:
            report.warnings.append(
                f"tau={tau:.4g} exceeds 2/sigma_max(L)^2={2.0 / lip:.4g}; iterations may diverge"
            )
    report.tau = tau

    geom = cfg.geometry((m1, m2, 3), (8, 8, 3))
    dcfg = cfg.dict_config(geom.patch_length)
    gram = gram_diagonal(geom).reshape(m1 * m2, 3)

    D, B = (None, None) if warm is None else warm
    for _ in range(cfg.outer_iters):
        with _Timer(report, "learn"):
            X = extract_patches(N.reshape(m1, m2, 3), geom)
            D, B, _ = dictlearn.learn(X, dcfg, None if D is None else (D, B))
        with _Timer(report, "update"):
            back = adjoint_patches(D @ B, geom).reshape(m1 * m2, 3)
            N_old = N
            for _ in range(cfg.prox_steps):
                N = prox_step(N, Y, L, back, tau, cfg.lam, gram)
        with _Timer(report, "objective"):
            report.objective_trace.append(dlnv_objective(Y, N, L, D, B, cfg.lam, cfg.mu, geom))
        change = _rel_change(N, N_old)
        report.change_trace.append(change)
        if change < cfg.tol:
            report.converged = True
            break
    report.final_rel_change = report.change_trace[-1]
    return NormalField(m1, m2, N), report


def estimate(stack: ImageStack, method: str, cfg: SolverConfig | None = None):
    """Dispatch to one estimator; returns ``(NormalField, SolveReport)``."""
    if method == "ls":
        report = SolveReport(config={} if cfg is None else cfg.as_dict())
        with _Timer(report, "least_squares"):
            normals = least_squares(stack)
        return normals, report
    cfg = cfg or SolverConfig()
    if method == "dlpi":
        return dlpi(stack, cfg)
    if method == "dlnv":
        return dlnv(stack, cfg)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
