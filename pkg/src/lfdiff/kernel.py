"""Spectral transition densities, log-likelihood and its derivatives.

With Neumann eigenpairs ``(lambda_j, e_j)`` of ``-div(f grad .)`` on a
domain of area ``|O|`` (1 by default), the transition density is
``p_t(x, y) = 1/|O| + sum_{j>=1} exp(-lambda_j t) e_j(x) e_j(y)``; its
derivative in ``f`` along ``h`` is the double series
``sum_{j,j'} C_{jj'} <h, grad e_j . grad e_j'> e_j'(x) e_j(y)`` whose
coefficients are divided differences of ``exp(-lambda D)``.

When the basis is truncated, the derivative of the truncated density also
picks up eigenvector components outside the basis. Those are obtained from
one bordered linear solve per retained eigenpair, so that gradients are
exact derivatives of the likelihood actually evaluated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .eigen import EigenBasis, eigen_at_points
from .errors import DimensionError, InvalidParameterError, SolverError
from .mesh import Mesh, interpolation_matrix

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Points ``X_0, X_D, ..., X_{nD}`` observed at lag ``D``."""

    D: float
    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DimensionError("points must have shape (n + 1, 2)")
        if not self.D > 0:
            raise InvalidParameterError(f"time lag must be positive, got {self.D}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        """Number of transitions."""
        return max(self.points.shape[0] - 1, 0)

    def split(self, at: int) -> tuple["ObservationSet", "ObservationSet"]:
        """Two observation sets sharing the point with index ``at``."""
        return ObservationSet(self.D, self.points[: at + 1]), ObservationSet(self.D, self.points[at:])

    def head(self, n: int) -> "ObservationSet":
        return ObservationSet(self.D, self.points[: n + 1])


class LogLikelihood(NamedTuple):
    value: float
    n_clamped: int


@dataclass(eq=False)
class LikelihoodWorkspace:
    """Everything derived from one eigensolve that the likelihood routines reuse."""

    mesh: Mesh
    basis: EigenBasis
    D: float
    eval_table: np.ndarray
    decay: np.ndarray
    raw_density: np.ndarray
    density_floor: float = DENSITY_FLOOR
    n_snapped: int = 0
    clamp_count: int = field(default=0)
    interp: sp.csr_matrix | None = None

    @property
    def per_pair_density(self) -> np.ndarray:
        return np.maximum(self.raw_density, self.density_floor)

    @property
    def clamped(self) -> np.ndarray:
        return self.raw_density <= self.density_floor

    @cached_property
    def eigen_gradients(self) -> np.ndarray:
        """(T, J, 2) piecewise-constant gradients of the non-constant eigenfunctions."""
        return fem.field_gradients(self.mesh, self.basis.eigenvectors[:, 1:])


def _pair_sums(ex: np.ndarray, ey: np.ndarray, decay: np.ndarray, const: float = 1.0) -> np.ndarray:
    # identical product order for (x, y) and (y, x) keeps the sum exactly symmetric
    return const + np.sum(decay * (ex[..., 1:] * ey[..., 1:]), axis=-1)


def build_workspace(
    mesh: Mesh, basis: EigenBasis, obs: ObservationSet, density_floor: float = DENSITY_FLOOR
) -> LikelihoodWorkspace:
    """Evaluate eigenfunctions at all observation points and the per-pair densities."""
    if obs.points.shape[0] > 0:
        P, n_snapped = interpolation_matrix(mesh, obs.points, snap=True)
        table = np.asarray(P @ basis.eigenvectors)
    else:
        P, table, n_snapped = None, np.zeros((0, basis.n_pairs)), 0
    decay = np.exp(-basis.eigenvalues[1:] * obs.D)
    raw = _pair_sums(table[:-1], table[1:], decay, 1.0 / mesh.area) if obs.n else np.zeros(0)
    ws = LikelihoodWorkspace(
        mesh=mesh,
        basis=basis,
        D=obs.D,
        eval_table=table,
        decay=decay,
        raw_density=raw,
        density_floor=density_floor,
        n_snapped=n_snapped,
        interp=P,
    )
    ws.clamp_count = int(np.count_nonzero(ws.clamped))
    return ws


def transition_density(ws: LikelihoodWorkspace, t: float, x, y) -> float:
    """Truncated spectral density ``p_t(x, y)``, clamped below at the density floor."""
    if not t > 0:
        raise InvalidParameterError(f"time must be positive, got {t}")
    e = eigen_at_points(ws.basis, ws.mesh, np.array([x, y], dtype=float))
    decay = np.exp(-ws.basis.eigenvalues[1:] * t)
    p = float(_pair_sums(e[0], e[1], decay, 1.0 / ws.mesh.area))
    if p <= ws.density_floor:
        ws.clamp_count += 1
        return ws.density_floor
    return p


def transition_density_matrix(ws: LikelihoodWorkspace, t: float, xs, ys) -> np.ndarray:
    """Unclamped ``p_t(x_a, y_b)`` for all pairs, shape ``(len(xs), len(ys))``."""
    if not t > 0:
        raise InvalidParameterError(f"time must be positive, got {t}")
    ex = eigen_at_points(ws.basis, ws.mesh, xs)[:, 1:]
    ey = eigen_at_points(ws.basis, ws.mesh, ys)[:, 1:]
    decay = np.exp(-ws.basis.eigenvalues[1:] * t)
    return 1.0 / ws.mesh.area + (ex * decay) @ ey.T


def log_likelihood(ws: LikelihoodWorkspace, obs: ObservationSet | None = None) -> LogLikelihood:
    """Sum of log transition densities over consecutive pairs.

    The stationary density of ``X_0`` is the constant ``1/|O|`` and is
    omitted. Clamped pairs contribute ``log(density_floor)``.
    """
    if obs is not None and obs.n != ws.raw_density.size:
        raise DimensionError("workspace was built for a different observation set")
    n_clamped = int(np.count_nonzero(ws.clamped))
    if n_clamped:
        logger.warning("%d transition densities clamped at %.1e", n_clamped, ws.density_floor)
    return LogLikelihood(math.fsum(np.log(ws.per_pair_density)), n_clamped)


@dataclass(frozen=True)
class FrechetCoefficients:
    """Divided differences ``C_{jj'}`` for ``j, j' = 1..J``."""

    C: np.ndarray
    tie_threshold: np.ndarray
    D: float


def default_tie_threshold(eigenvalues: np.ndarray) -> np.ndarray:
    lam = np.asarray(eigenvalues, dtype=float)
    return 1e-6 * (1.0 + np.maximum.outer(lam, lam))


def frechet_coefficients(basis_or_eigenvalues, D: float, Tr=None) -> FrechetCoefficients:
    """Coefficients of the derivative double series.

    ``C_{jj'} = (e^{-lambda_j D} - e^{-lambda_j' D}) / (lambda_j - lambda_j')``,
    and ``-D e^{-lambda D}`` when the two eigenvalues differ by at most ``Tr``
    (evaluated at their midpoint so the table stays exactly symmetric).

    Parameters
    ----------
    basis_or_eigenvalues : EigenBasis or array
        An :class:`EigenBasis` (its constant mode is skipped) or the
        non-constant eigenvalues themselves.
    Tr : float or array, optional
        Tie threshold; defaults to ``1e-6 * (1 + max(lambda_j, lambda_j'))``.
    """
    if isinstance(basis_or_eigenvalues, EigenBasis):
        lam = basis_or_eigenvalues.eigenvalues[1:]
    else:
        lam = np.asarray(basis_or_eigenvalues, dtype=float)
    if not D > 0:
        raise InvalidParameterError("D must be positive")
    tr = default_tie_threshold(lam) if Tr is None else np.broadcast_to(np.asarray(Tr, dtype=float), (lam.size,) * 2)
    a = lam[:, None]
    b = lam[None, :]
    diff = b - a
    tie = np.abs(diff) <= tr
    # lower triangle may overflow; only the upper one is kept
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        # -e^{-aD} (1 - e^{-(b-a)D}) / (b - a), stable for moderate gaps
        dd = np.exp(-a * D) * np.expm1(-diff * D) / diff
    C = np.where(tie, -D * np.exp(-0.5 * (a + b) * D), dd)
    C = np.triu(C) + np.triu(C, 1).T
    return FrechetCoefficients(C=C, tie_threshold=np.asarray(tr), D=float(D))


def _truncation_complement(ws: LikelihoodWorkspace, Px, Py, w) -> np.ndarray | None:
    """Per-element ``sum_j grad a_j . grad e_j`` from eigenvector components outside the basis.

    ``a_j`` solves ``(K - lambda_j M) a = r_j`` on the M-orthogonal complement
    of the computed eigenvectors, where ``r_j`` is the sensitivity of the
    weighted pair sums to the nodal values of ``e_j``. The derivative along
    ``h`` then gains ``-sum_T |T| mean_T(h) q_T``. Returns None when the basis
    is complete or carries no conductivity snapshot.
    """
    basis, mesh = ws.basis, ws.mesh
    N, J = mesh.n_nodes, basis.J
    if basis.n_pairs >= N or J == 0:
        return None
    if basis.f_snapshot is None:
        logger.debug("basis has no conductivity snapshot; truncation complement skipped")
        return None
    K = fem.assemble_stiffness(mesh, basis.f_snapshot)
    M = fem.assemble_mass(mesh)
    E = basis.eigenvectors
    ME = np.asarray(M @ E)
    ex = np.asarray(Px @ E[:, 1:])
    ey = np.asarray(Py @ E[:, 1:])
    R = np.asarray(Px.T @ (w[:, None] * ey) + Py.T @ (w[:, None] * ex)) * ws.decay
    R -= ME @ (E.T @ R)
    border = sp.csc_matrix(ME)
    rhs = np.zeros(N + E.shape[1])
    A = np.empty((N, J))
    for j in range(J):
        S = sp.bmat([[K - basis.eigenvalues[j + 1] * M, border], [border.T, None]], format="csc")
        try:
            lu = spla.splu(S)
        except RuntimeError as exc:
            raise SolverError(f"complement solve for eigenpair {j + 1} failed: {exc}") from exc
        rhs[:N] = R[:, j]
        A[:, j] = lu.solve(rhs)[:N]
    return np.einsum("tjd,tjd->t", fem.field_gradients(mesh, A), ws.eigen_gradients)


def _coupling_matrix(ws: LikelihoodWorkspace, h) -> np.ndarray:
    w = fem.element_integrals(ws.mesh, h)
    g = ws.eigen_gradients
    return np.einsum("t,tjd,tkd->jk", w, g, g)


def coupling_matrix(ws: LikelihoodWorkspace, h) -> np.ndarray:
    """``<h, grad e_j . grad e_j'>`` for ``j, j' = 1..J``."""
    h = np.asarray(h, dtype=float)
    if h.shape[0] != ws.mesh.n_nodes:
        raise DimensionError(f"direction has {h.shape[0]} values, mesh has {ws.mesh.n_nodes} nodes")
    return _coupling_matrix(ws, h)


def directional_derivative(ws: LikelihoodWorkspace, coeffs: FrechetCoefficients, h, x, y) -> float:
    """Derivative of ``f -> p_D(x, y)`` along the nodal direction ``h``."""
    J = ws.basis.J
    if coeffs.C.shape != (J, J):
        raise DimensionError(f"coefficients are {coeffs.C.shape}, basis has J={J}")
    G = coupling_matrix(ws, h)
    P, _ = interpolation_matrix(ws.mesh, np.array([x, y], dtype=float), snap=True)
    e = np.asarray(P @ ws.basis.eigenvectors)[:, 1:]
    value = float(e[1] @ (coeffs.C * G) @ e[0])
    q = _truncation_complement(ws, P[:1], P[1:], np.ones(1))
    if q is not None:
        value -= float(fem.element_integrals(ws.mesh, h) @ q)
    return value


def loglik_nodal_sensitivity(ws: LikelihoodWorkspace, coeffs: FrechetCoefficients) -> np.ndarray:
    """Nodal vector ``s`` with ``d loglik [h] = sum_v s_v h_v`` for P1 directions ``h``.

    Pairs whose density was clamped have zero derivative and are skipped.
    """
    n = ws.raw_density.size
    if n == 0:
        return np.zeros(ws.mesh.n_nodes)
    inv_p = np.where(ws.clamped, 0.0, 1.0 / ws.per_pair_density)
    if ws.clamp_count:
        idx = np.flatnonzero(ws.clamped)
        logger.warning("gradient-degenerate: clamped density at pair(s) %s", idx[:10].tolist())
    ex = ws.eval_table[:-1, 1:]
    ey = ws.eval_table[1:, 1:]
    A = ey.T @ (ex * inv_p[:, None])
    B = coeffs.C * (0.5 * (A + A.T))
    g = ws.eigen_gradients
    gB = np.einsum("tjd,jk->tkd", g, B)
    q = np.einsum("tkd,tkd->t", gB, g)
    if ws.interp is not None:
        qc = _truncation_complement(ws, ws.interp[:-1], ws.interp[1:], inv_p)
        if qc is not None:
            q = q - qc
    w = ws.mesh.areas * q / 3.0
    return np.bincount(ws.mesh.triangles.ravel(), weights=np.repeat(w, 3), minlength=ws.mesh.n_nodes)


def log_likelihood_gradient(ws: LikelihoodWorkspace, coeffs: FrechetCoefficients, param) -> np.ndarray:
    """Gradient of the log-likelihood in the coefficient vector of ``param``."""
    from .prior import apply_link

    _, dphi = apply_link(param, ws.mesh)
    s = loglik_nodal_sensitivity(ws, coeffs)
    return param.basis.transpose_apply(s * dphi)


def log_posterior_gradient(ws, coeffs, param, prior, obs: ObservationSet | None = None) -> np.ndarray:
    """Gradient of the log-posterior: likelihood part minus prior precision times theta.

    One eigensolve (held by ``ws``) and one coefficient table serve every
    component and every observation pair.
    """
    if obs is not None and obs.n != ws.raw_density.size:
        raise DimensionError("workspace was built for a different observation set")
    return log_likelihood_gradient(ws, coeffs, param) - prior.precision_times(param.theta)
