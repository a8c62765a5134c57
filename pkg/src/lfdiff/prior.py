"""Gaussian priors on the reparametrised conductivity and the link function.

The conductivity is ``f = f_min + exp(F)`` with ``F = sum_k theta_k eta_k``.
Two bases are supported: the constant plus non-constant Neumann-Laplacian
eigenfunctions (with a diagonal series prior), and P1 hat functions on the
mesh nodes (with a dense stationary-kernel prior).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.special import gammaln, kve

from . import fem
from .eigen import EigenBasis, solve_lowest
from .errors import DimensionError, IllConditionedPriorError, InvalidParameterError, ParameterOverflowError
from .mesh import Mesh

logger = logging.getLogger(__name__)

F_MIN = 0.1
EXP_LIMIT = 700.0


@dataclass(frozen=True, eq=False)
class ParamBasis:
    """Nodal values of the basis functions ``eta_0..eta_K``.

    ``values`` is ``None`` for the nodal (hat function) basis, where the
    coefficient vector is the nodal field itself.
    """

    kind: str
    n_nodes: int
    values: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.n_nodes if self.values is None else self.values.shape[1]

    def field(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape[0] != self.dim:
            raise DimensionError(f"theta has length {theta.shape[0]}, basis has {self.dim} functions")
        return theta.copy() if self.values is None else self.values @ theta

    def transpose_apply(self, nodal) -> np.ndarray:
        nodal = np.asarray(nodal, dtype=float)
        return nodal.copy() if self.values is None else self.values.T @ nodal


def laplacian_series_basis(mesh: Mesh, K: int, laplace_basis: EigenBasis | None = None) -> tuple[ParamBasis, EigenBasis]:
    """Constant function plus the first ``K`` non-constant Neumann-Laplacian eigenvectors."""
    if laplace_basis is None:
        M = fem.assemble_mass(mesh)
        S = fem.assemble_stiffness(mesh, 1.0)
        laplace_basis = solve_lowest(S, M, lambda_cut=np.inf, j_max=K, f_snapshot=np.ones(mesh.n_nodes))
    if laplace_basis.J < K:
        raise InvalidParameterError(f"series prior needs K={K} non-constant eigenpairs, basis has {laplace_basis.J}")
    values = np.column_stack([np.ones(mesh.n_nodes), laplace_basis.eigenvectors[:, 1 : K + 1]])
    basis = ParamBasis("laplacian_series", mesh.n_nodes, values, laplace_basis.eigenvalues[1 : K + 1].copy())
    return basis, laplace_basis


def nodal_basis(mesh: Mesh) -> ParamBasis:
    return ParamBasis("nodal_linear", mesh.n_nodes)


@dataclass(frozen=True)
class ConductivityParam:
    theta: np.ndarray
    basis: ParamBasis
    f_min: float = F_MIN
    link_kind: str = "exp_shift"

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            raise InvalidParameterError("theta must be finite")
        if not self.f_min > 0:
            raise InvalidParameterError("f_min must be positive")
        object.__setattr__(self, "theta", theta)


def apply_link(param: ConductivityParam, mesh: Mesh | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Nodal ``f = f_min + exp(F)`` and the link derivative ``exp(F)``.

    Raises
    ------
    ParameterOverflowError
        If ``F`` exceeds 700 at some node.
    """
    F = param.basis.field(param.theta)
    if mesh is not None and F.shape[0] != mesh.n_nodes:
        raise DimensionError("basis and mesh disagree on the node count")
    if F.max() > EXP_LIMIT:
        raise ParameterOverflowError(f"log-conductivity {F.max():.1f} overflows the exponential link")
    dphi = np.exp(F)
    return param.f_min + dphi, dphi


def inverse_link(f, f_min: float = F_MIN) -> np.ndarray:
    return np.log(np.asarray(f, dtype=float) - f_min)


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Centred Gaussian prior on the coefficient vector.

    Exactly one of ``cov_diag`` (diagonal covariance) and ``chol`` (lower
    Cholesky factor of a dense covariance) is set.
    """

    kind: str
    params: dict
    cov_diag: np.ndarray | None = None
    chol: np.ndarray | None = None
    jitter: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.cov_diag.size if self.cov_diag is not None else self.chol.shape[0]

    def covariance(self) -> np.ndarray:
        if self.cov_diag is not None:
            return np.diag(self.cov_diag)
        return self.chol @ self.chol.T

    def precision_diag_or_full(self) -> np.ndarray:
        if self.cov_diag is not None:
            return 1.0 / self.cov_diag
        return sla.cho_solve((self.chol, True), np.eye(self.dim))

    def precision_times(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.cov_diag is not None:
            return theta / self.cov_diag
        return sla.cho_solve((self.chol, True), theta)

    def log_density(self, theta) -> float:
        """Unnormalised ``-theta' C^{-1} theta / 2``."""
        theta = np.asarray(theta, dtype=float)
        return -0.5 * float(theta @ self.precision_times(theta))

    def factor_times(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.cov_diag is not None:
            return np.sqrt(self.cov_diag) * z
        return self.chol @ z


def build_series_prior(laplace_basis: EigenBasis | ParamBasis, K: int, alpha: float, sigma2: float) -> PriorSpec:
    """``theta ~ N(0, sigma2 * diag(1, lambda_1^-alpha, ..., lambda_K^-alpha))``."""
    if isinstance(laplace_basis, ParamBasis):
        lam = laplace_basis.eigenvalues
    else:
        lam = laplace_basis.eigenvalues[1:]
    if lam is None or lam.size < K:
        raise InvalidParameterError(f"series prior with K={K} needs {K} non-constant eigenpairs")
    if alpha < 0 or not sigma2 > 0:
        raise InvalidParameterError("need alpha >= 0 and sigma2 > 0")
    cov = sigma2 * np.concatenate([[1.0], lam[:K] ** (-alpha)])
    return PriorSpec("series", {"K": K, "alpha": alpha, "sigma2": sigma2}, cov_diag=cov)


def matern_covariance(r, alpha: float, ell: float):
    """Matérn kernel with regularity ``alpha`` and length scale ``ell``; 1 at ``r = 0``."""
    if not alpha > 0 or not ell > 0:
        raise InvalidParameterError("alpha and ell must be positive")
    r = np.asarray(r, dtype=float)
    z = r * np.sqrt(2.0 * alpha) / ell
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        logc = (1.0 - alpha) * np.log(2.0) - gammaln(alpha) + alpha * np.log(z) + np.log(kve(alpha, z)) - z
        c = np.exp(logc)
    # tiny arguments: K_alpha overflows but the kernel is 1 to machine precision
    c = np.where((z < 1e-8) | ~np.isfinite(c), 1.0, c)
    return float(c) if c.ndim == 0 else c


def se_covariance(r, ell: float):
    """Squared exponential kernel ``exp(-r^2 / (2 ell^2))``."""
    r = np.asarray(r, dtype=float)
    c = np.exp(-(r**2) / (2.0 * ell**2))
    return float(c) if c.ndim == 0 else c


def jittered_cholesky(cov: np.ndarray, max_doublings: int = 20) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``cov + jitter * I`` with the smallest jitter that works.

    Jitter starts at ``1e-10 * trace / dim`` and doubles at most ``max_doublings`` times.
    """
    n = cov.shape[0]
    jitter = 1e-10 * np.trace(cov) / n
    for _ in range(max_doublings + 1):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise IllConditionedPriorError(f"covariance not factorizable with jitter up to {jitter / 2:.3e}", jitter / 2)


def build_stationary_prior(mesh: Mesh | np.ndarray, kernel: str = "matern", **params) -> PriorSpec:
    """Dense prior on nodal values with covariance ``C(|y_k - y_k'|)``.

    Parameters
    ----------
    mesh : Mesh or (K+1, 2) array
        Grid points (the mesh nodes for the P1 basis).
    kernel : {"matern", "se"}
    params
        ``alpha`` and ``ell`` for Matérn, ``ell`` for squared exponential.
        ``sigma2`` optionally scales the kernel (default 1).
    """
    pts = mesh.nodes if isinstance(mesh, Mesh) else np.asarray(mesh, dtype=float)
    r = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    if kernel == "matern":
        cov = matern_covariance(r, params["alpha"], params["ell"])
    elif kernel == "se":
        cov = se_covariance(r, params["ell"])
    else:
        raise InvalidParameterError(f"unknown kernel {kernel!r}")
    cov = params.get("sigma2", 1.0) * np.asarray(cov)
    L, jitter = jittered_cholesky(cov)
    logger.debug("stationary %s prior on %d points, jitter %.2e", kernel, len(pts), jitter)
    return PriorSpec("stationary", {"kernel": kernel, **params}, chol=L, jitter=jitter)


def sample_prior(spec: PriorSpec, rng: np.random.Generator) -> np.ndarray:
    """``theta = L z`` with ``z`` standard normal drawn from ``rng``."""
    return spec.factor_times(rng.standard_normal(spec.dim))


def project_onto_basis(mesh: Mesh, basis: ParamBasis, F_nodal) -> tuple[np.ndarray, np.ndarray]:
    """Mass-weighted least-squares coefficients of a nodal field and the projected field."""
    F_nodal = np.asarray(F_nodal, dtype=float)
    if basis.values is None:
        return F_nodal.copy(), F_nodal.copy()
    M = fem.assemble_mass(mesh)
    Phi = basis.values
    theta = np.linalg.solve(Phi.T @ (M @ Phi), Phi.T @ (M @ F_nodal))
    return theta, Phi @ theta
