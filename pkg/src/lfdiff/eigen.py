"""Lowest eigenpairs of the generalized problem ``K v = lambda M v``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, SolverError
from .mesh import Mesh, interpolation_matrix

logger = logging.getLogger(__name__)

DENSE_THRESHOLD = 300
TRUNCATION_TAIL = 3.7267e-6  # e^{-D lambda_cut} tolerated for the first dropped term


def default_lambda_cut(D: float, tail: float = TRUNCATION_TAIL) -> float:
    """Cutoff with ``exp(-D * lambda_cut) == tail``; 250 for ``D = 0.05``."""
    return float(-np.log(tail) / D)


@dataclass(frozen=True, eq=False)
class EigenBasis:
    """Ascending eigenpairs, eigenvectors M-orthonormal and stored as columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    f_snapshot: np.ndarray | None = None
    lambda_cut: float = np.inf
    solver: str = ""
    info: dict = field(default_factory=dict)

    @property
    def n_pairs(self) -> int:
        return self.eigenvalues.size

    @property
    def J(self) -> int:
        """Number of non-constant eigenpairs."""
        return self.eigenvalues.size - 1


def _normalize_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    s = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    s[s == 0] = 1.0
    return vecs * s


def _dense(K, M, j_max):
    Kd = K.toarray() if sp.issparse(K) else np.asarray(K)
    Md = M.toarray() if sp.issparse(M) else np.asarray(M)
    hi = min(j_max, Kd.shape[0] - 1)
    try:
        vals, vecs = sla.eigh(Kd, Md, subset_by_index=[0, hi], driver="gvx")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"dense generalized eigensolve failed: {exc}") from exc
    return vals, vecs


def _shift(K, M) -> float:
    return -1e-3 * float(K.diagonal().mean() / M.diagonal().mean())


def _shift_invert(K, M, lambda_cut, j_max, k0, v0):
    n = K.shape[0]
    sigma = _shift(K, M)
    try:
        lu = spla.splu(sp.csc_matrix(K - sigma * M))
    except RuntimeError as exc:
        raise SolverError(f"factorization of shifted matrix failed: {exc}") from exc
    op = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
    k = min(max(k0, 2), j_max + 1, n - 2)
    while True:
        try:
            vals, vecs = spla.eigsh(K, k=k, M=M, sigma=sigma, which="LM", OPinv=op, v0=v0, tol=1e-12)
        except spla.ArpackNoConvergence:
            # cold restart with a wider Krylov subspace
            logger.info("Lanczos stalled for k=%d; restarting without warm start", k)
            ncv = min(n, max(2 * k + 20, 40))
            try:
                vals, vecs = spla.eigsh(
                    K, k=k, M=M, sigma=sigma, which="LM", OPinv=op, ncv=ncv, maxiter=20 * n, tol=1e-12
                )
            except spla.ArpackNoConvergence as exc:
                raise ConvergenceError(f"Lanczos did not converge ({len(exc.eigenvalues)} of {k} pairs)") from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        if vals[-1] > lambda_cut or k >= min(j_max + 1, n - 2):
            return vals, vecs
        k = min(int(np.ceil(1.5 * k)) + 4, j_max + 1, n - 2)


def solve_lowest(
    K,
    M,
    lambda_cut: float = np.inf,
    j_max: int = 200,
    *,
    f_snapshot=None,
    k_hint: int | None = None,
    v0: np.ndarray | None = None,
    dense: bool | None = None,
) -> EigenBasis:
    """Eigenpairs with ``lambda <= lambda_cut``, at most ``j_max + 1`` of them.

    Problems below ``DENSE_THRESHOLD`` unknowns are solved densely; larger
    ones by shift-invert Lanczos (ARPACK) around a small negative shift, which
    keeps ``K - sigma M`` positive definite despite the constant null mode.

    Parameters
    ----------
    k_hint : int, optional
        Initial number of pairs requested from the iterative solver, usually
        the size of the previous basis in a chain.
    v0 : array, optional
        Starting vector for the Lanczos iteration (warm start).
    """
    if not lambda_cut > 0:
        raise ValueError("lambda_cut must be positive")
    if j_max < 1:
        raise ValueError("j_max must be at least 1")
    n = K.shape[0]
    use_dense = n < DENSE_THRESHOLD if dense is None else dense
    if use_dense:
        vals, vecs = _dense(K, M, j_max)
        solver = "dense"
    else:
        vals, vecs = _shift_invert(K, M, lambda_cut, j_max, k_hint or 24, v0)
        solver = "shift-invert-lanczos"
    keep = vals <= lambda_cut
    keep[:2] = True
    vals, vecs = vals[keep], vecs[:, keep]
    if vals.size < 2:
        raise ConvergenceError("fewer than two eigenpairs available")
    scale = 1e3 * abs(_shift(K, M))
    # the first non-constant eigenvalue is positive on a connected mesh
    if vals[0] < -1e-8 * scale or vals[1] <= 0 or not np.all(np.isfinite(vals)):
        raise ConvergenceError(f"spurious eigenvalue {vals[0]:.3e}; the operator is too ill-conditioned")
    vecs = _normalize_signs(vecs)

    Mv = M @ vecs
    resid = np.linalg.norm(K @ vecs - Mv * vals, axis=0) / np.linalg.norm(Mv, axis=0)
    # the null mode's residual is pure rounding, which grows with the operator scale
    tol = 1e-6 * (1.0 + np.abs(vals)) + 1e-10 * scale
    if np.any(resid > tol):
        j = int(np.argmax(resid / tol))
        raise ConvergenceError(f"eigenpair {j} residual {resid[j]:.3e} exceeds tolerance")
    return EigenBasis(
        eigenvalues=vals,
        eigenvectors=vecs,
        f_snapshot=None if f_snapshot is None else np.asarray(f_snapshot),
        lambda_cut=float(lambda_cut),
        solver=solver,
        info={"max_residual": float(resid.max()), "requested": int(min(j_max + 1, n))},
    )


def dense_reference(K, M, count: int) -> np.ndarray:
    """Lowest ``count`` eigenvalues via Cholesky reduction to standard form.

    Independent of :func:`solve_lowest`: ``L^{-1} K L^{-T}`` is diagonalized
    with the plain symmetric solver.
    """
    Kd = K.toarray() if sp.issparse(K) else np.asarray(K)
    Md = M.toarray() if sp.issparse(M) else np.asarray(M)
    L = np.linalg.cholesky(Md)
    A = sla.solve_triangular(L, sla.solve_triangular(L, Kd, lower=True).T, lower=True)
    return np.linalg.eigvalsh(0.5 * (A + A.T))[:count]


def eigen_at_points(basis: EigenBasis, mesh: Mesh, points, snap: bool = True) -> np.ndarray:
    """Interpolated eigenfunction values, shape ``(len(points), J + 1)``.

    Points in the thin gap between the analytic circle and the boundary
    polygon are snapped to the polygon when ``snap`` is true; points outside
    the disk raise :class:`~lfdiff.errors.PointOutsideDomainError` carrying
    the offending index.
    """
    P, _ = interpolation_matrix(mesh, points, snap=snap)
    return np.asarray(P @ basis.eigenvectors)
