"""P1 finite elements for the divergence-form operator with Neumann conditions.

Matrices are returned as symmetric ``scipy.sparse.csr_matrix`` objects. The
conductivity enters the stiffness matrix only through its integral over each
triangle, because P1 basis gradients are constant per element; the
three-point mid-edge rule integrates a P1 conductivity exactly, so
``K(f) = sum_T (|T| * mean_T f) * G_T`` with ``G_T`` the unit-conductivity
element matrix.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import ConductivityPositivityError, DimensionError
from .mesh import Mesh, locate_points

QUADRATURE_RULE = "midedge-3"


class _Pattern:
    """CSR sparsity pattern of a mesh plus the scatter map from element entries."""

    def __init__(self, mesh: Mesh):
        t = mesh.triangles
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        n = mesh.n_nodes
        key = rows * n + cols
        uniq, self.scatter = np.unique(key, return_inverse=True)
        self.scatter = self.scatter.ravel()
        r, c = np.divmod(uniq, n)
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=n))])
        self.indices = c
        self.nnz = uniq.size
        self.n = n
        g = mesh.basis_gradients
        # |T| grad(eta_i).grad(eta_j), flattened row-major per element
        self.unit_local = (mesh.areas[:, None, None] * np.einsum("tid,tjd->tij", g, g)).reshape(len(t), 9)
        self.mass_local = (
            mesh.areas[:, None, None] / 12.0 * np.array([[2.0, 1, 1], [1, 2, 1], [1, 1, 2]])
        ).reshape(len(t), 9)

    def build(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.scatter, weights=local.ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


@lru_cache(maxsize=16)
def _pattern(mesh: Mesh) -> _Pattern:
    return _Pattern(mesh)


def element_means(mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
    """Mean of a P1 field over each triangle (exact integral divided by area)."""
    return np.asarray(nodal)[mesh.triangles].mean(axis=1)


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix ``M_ij = int eta_i eta_j``."""
    pat = _pattern(mesh)
    return pat.build(pat.mass_local)


def assemble_stiffness(mesh: Mesh, f) -> sp.csr_matrix:
    """Stiffness matrix ``K_ij = int f grad(eta_i).grad(eta_j)``.

    Parameters
    ----------
    f : float or (N,) array
        Nodal conductivity values (a scalar means a constant field).

    Raises
    ------
    ConductivityPositivityError
        If any nodal value is not strictly positive.
    """
    f = np.broadcast_to(np.asarray(f, dtype=float), (mesh.n_nodes,))
    if not np.all(f > 0):
        bad = int(np.argmin(f))
        raise ConductivityPositivityError(f"conductivity must be positive; node {bad} has {f[bad]}")
    pat = _pattern(mesh)
    return pat.build(pat.unit_local * element_means(mesh, f)[:, None])


def stiffness_from_element_weights(mesh: Mesh, weights: np.ndarray) -> sp.csr_matrix:
    """Assemble ``sum_T weights_T G_T`` for arbitrary per-element weights."""
    pat = _pattern(mesh)
    return pat.build(pat.unit_local * weights[:, None])


def _check_field(mesh: Mesh, v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[0] != mesh.n_nodes:
        raise DimensionError(f"{name} has {v.shape[0]} values, mesh has {mesh.n_nodes} nodes")
    return v


def evaluate_field(mesh: Mesh, field, x, snap: bool = False):
    """Barycentric interpolation of nodal values at one point or an (n, 2) array."""
    field = _check_field(mesh, field, "field")
    x = np.asarray(x, dtype=float)
    tri, bary, _ = locate_points(mesh, x.reshape(-1, 2), snap=snap)
    vals = np.einsum("nk,nk...->n...", bary, field[mesh.triangles[tri]])
    return vals[0] if x.ndim == 1 else vals


def field_gradients(mesh: Mesh, u) -> np.ndarray:
    """Piecewise-constant gradients of P1 fields.

    ``u`` may be (N,) or (N, m); the result is (T, 2) or (T, m, 2).
    """
    u = _check_field(mesh, u, "u")
    return np.einsum("tkd,tk...->t...d", mesh.basis_gradients, u[mesh.triangles])


def element_integrals(mesh: Mesh, h) -> np.ndarray:
    """Exact integral of a P1 field over each triangle."""
    h = _check_field(mesh, h, "h")
    return mesh.areas * element_means(mesh, h)


def gradient_coupling(mesh: Mesh, u, v, h) -> float:
    """``<h, grad u . grad v>`` for P1 fields ``u``, ``v``, ``h``."""
    gu = field_gradients(mesh, u)
    gv = field_gradients(mesh, v)
    w = element_integrals(mesh, h)
    return float(np.sum(w * np.einsum("td,td->t", gu, gv)))


def export_matrix_market(path, matrix, comment: str = "") -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment, symmetry="symmetric")
