"""Continuous Lagrange spaces with homogeneous Dirichlet conditions.

Global node numbering: vertices, then ``p - 1`` nodes per edge (ordered from
the lower to the higher vertex index), then interior nodes element by
element.  DOFs are the nodes off the boundary, numbered in node order.

Coefficient fields in :class:`PdeData` are constants or callables
``fn(x, elem)`` taking points ``x`` of shape (..., 2) and the element
index of each point (shape ``x.shape[:-1]``).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Any, Callable, Union

import numpy as np
import scipy.sparse.linalg as spla

from . import reference
from .linalg import SparseOperator
from .mesh import MeshError

__all__ = [
    "PdeData",
    "FeSpace",
    "assemble_B",
    "assemble_A",
    "assemble_rhs",
    "prolongation",
    "galerkin_solve_direct",
    "point_values",
]

Field = Union[float, np.ndarray, Callable[..., Any]]

CHUNK = 20000


def _chunks(n, size=CHUNK):
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


def evaluate_field(field, x, elem, shape):
    """Evaluate a coefficient field at points ``x`` with element ids ``elem``."""
    if callable(field):
        val = np.asarray(field(x, elem), dtype=float)
    else:
        val = np.asarray(field, dtype=float)
    return np.broadcast_to(val, x.shape[:-1] + shape)


@dataclass(frozen=True)
class PdeData:
    """Data of -div(K grad u) + b . grad u + c u = f - div fvec, u = 0 on the boundary.

    ``source_vec_div`` (the divergence of ``source_vec``) is needed by the
    estimator when ``source_vec`` is not constant.
    """

    diffusion: Field = 1.0
    convection: Field = (0.0, 0.0)
    reaction: Field = 0.0
    source: Field = 0.0
    source_vec: Field = (0.0, 0.0)
    source_vec_div: Field | None = None
    k_min: float = 1e-12

    def __post_init__(self):
        if callable(self.source_vec) and self.source_vec_div is None:
            raise ValueError("source_vec_div is required for a non-constant source_vec")
        if not callable(self.diffusion):
            K = self.diffusion_matrix(np.zeros((1, 2)), np.zeros(1, dtype=np.int64))[0]
            _check_spd(K, self.k_min)
        if not callable(self.reaction) and not callable(self.convection):
            # div b = 0 for constant b, so -div b + 2c >= 0 reduces to c >= 0
            if float(self.reaction) < 0:
                raise ValueError("constant reaction must be nonnegative")

    def diffusion_matrix(self, x, elem):
        K = self.diffusion
        if callable(K):
            K = np.asarray(K(x, elem), dtype=float)
        else:
            K = np.asarray(K, dtype=float)
        if K.ndim == 0 or K.shape[-2:] != (2, 2):
            K = K[..., None, None] * np.eye(2)
        return np.broadcast_to(K, x.shape[:-1] + (2, 2))

    def check(self, x, elem):
        """Spot-check symmetry and the ellipticity bound of K at the given points."""
        _check_spd(self.diffusion_matrix(x, elem), self.k_min)


def _check_spd(K, k_min):
    K = np.asarray(K)
    if not np.allclose(K, np.swapaxes(K, -1, -2), rtol=1e-12, atol=1e-14):
        raise ValueError("diffusion coefficient must be symmetric")
    if np.linalg.eigvalsh(K).min() < k_min:
        raise ValueError("diffusion coefficient below declared k_min")


class FeSpace:
    """Degree-p Lagrange space S^p_0 on a triangulation."""

    def __init__(self, mesh, p):
        if p not in (1, 2, 3, 4):
            raise ValueError("degree p must be in 1..4")
        self.mesh = mesh
        self.p = p
        self.nloc = reference.n_local(p)
        nv, ne, nedge = mesh.n_vertices, mesh.n_elements, mesh.n_edges
        nint = (p - 1) * (p - 2) // 2
        self.n_nodes = nv + nedge * (p - 1) + ne * nint

        nodes = np.empty((ne, self.nloc), dtype=np.int64)
        nodes[:, :3] = mesh.elements
        col = 3
        for k in range(3):
            va = mesh.elements[:, k]
            vb = mesh.elements[:, (k + 1) % 3]
            base = nv + mesh.elem_edges[:, k] * (p - 1)
            forward = va < vb
            for t in range(1, p):
                nodes[:, col] = base + np.where(forward, t - 1, p - 1 - t)
                col += 1
        if nint:
            first = nv + nedge * (p - 1)
            nodes[:, col:] = first + np.arange(ne)[:, None] * nint + np.arange(nint)[None, :]
        self.elem_nodes = nodes

        boundary = np.zeros(self.n_nodes, dtype=bool)
        boundary[:nv] = mesh.boundary_vertices
        if p > 1:
            bedges = np.flatnonzero(mesh.boundary_edges)
            boundary[(nv + bedges[:, None] * (p - 1) + np.arange(p - 1)).ravel()] = True
        self.boundary = boundary
        self.free = np.full(self.n_nodes, -1, dtype=np.int64)
        self.dof_nodes = np.flatnonzero(~boundary)
        self.free[self.dof_nodes] = np.arange(self.dof_nodes.size)
        self.elem_dofs = self.free[nodes]
        self.N = self.dof_nodes.size

    def __repr__(self):
        return f"FeSpace(p={self.p}, N={self.N}, ne={self.mesh.n_elements})"

    @cached_property
    def grad_lambda(self):
        """(ne, 3, 2) gradients of the barycentric coordinates."""
        v = self.mesh.vertices[self.mesh.elements]
        J = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
        Jinv = np.linalg.inv(J)
        g = np.empty((len(v), 3, 2))
        g[:, 1:] = Jinv
        g[:, 0] = -(Jinv[:, 0] + Jinv[:, 1])
        return g

    @cached_property
    def node_coords(self):
        lam = reference.lattice(self.p) / self.p
        xy = np.einsum("lm,emx->elx", lam, self.mesh.vertices[self.mesh.elements])
        out = np.empty((self.n_nodes, 2))
        out[self.elem_nodes.ravel()] = xy.reshape(-1, 2)
        return out

    def full_vector(self, x):
        """Coefficient vector over all nodes (zeros on the boundary)."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.N,):
            raise ValueError(f"coefficient vector must have length {self.N}")
        out = np.zeros(self.n_nodes)
        out[self.dof_nodes] = x
        return out

    def quadrature_points(self, lam, sl=slice(None)):
        """Physical points (ne, nq, 2) for barycentric points ``lam``."""
        v = self.mesh.vertices[self.mesh.elements[sl]]
        return np.matmul(lam, v)


def _element_matrices(space, data, sl, principal_only):
    lam, w, phi, dphi, _ = reference.triangle_tables(space.p, 2 * space.p + 2)
    glam = space.grad_lambda[sl]
    ne = glam.shape[0]
    nq, nloc = phi.shape
    W = 2.0 * space.mesh.areas[sl][:, None] * w[None, :]
    G = np.matmul(dphi.reshape(1, nq * nloc, 3), glam).reshape(ne, nq, nloc, 2)
    x = space.quadrature_points(lam, sl)
    elem = np.broadcast_to(np.arange(space.mesh.n_elements)[sl][:, None], x.shape[:-1])
    data = data if isinstance(data, PdeData) else PdeData(diffusion=data)
    if callable(data.diffusion):
        K = data.diffusion_matrix(x, elem)
        KG = np.matmul(G, np.swapaxes(K, -1, -2))
    else:
        K = data.diffusion_matrix(x[:1, :1], elem[:1, :1])[0, 0]
        KG = G @ K.T
    GW = (G * W[:, :, None, None]).transpose(0, 2, 1, 3).reshape(ne, nloc, nq * 2)
    M = np.matmul(GW, KG.transpose(0, 2, 1, 3).reshape(ne, nloc, nq * 2).transpose(0, 2, 1))
    if principal_only:
        return M
    if callable(data.convection) or np.any(np.asarray(data.convection) != 0):
        b = evaluate_field(data.convection, x, elem, (2,))
        bG = np.matmul(G, b[..., None])[..., 0]
        M += np.matmul(phi.T, W[:, :, None] * bG)
    if callable(data.reaction) or np.any(np.asarray(data.reaction) != 0):
        c = evaluate_field(data.reaction, x, elem, ())
        M += np.matmul(phi.T, (W * c)[:, :, None] * phi)
    return M


def _assemble(space, data, principal_only, dirichlet):
    mesh = space.mesh
    if (mesh.areas <= 0).any():
        raise MeshError("degenerate element")
    index = space.elem_dofs if dirichlet else space.elem_nodes
    n = space.N if dirichlet else space.n_nodes
    total = None
    for sl in _chunks(mesh.n_elements):
        M = _element_matrices(space, data, sl, principal_only)
        idx = index[sl]
        rows = np.broadcast_to(idx[:, :, None], M.shape)
        cols = np.broadcast_to(idx[:, None, :], M.shape)
        keep = (rows >= 0) & (cols >= 0)
        part = SparseOperator.from_coo(rows[keep], cols[keep], M[keep], (n, n)).csr
        total = part if total is None else total + part
    return SparseOperator(total)


def assemble_B(space, data, dirichlet=True):
    """Galerkin matrix of the full bilinear form, ``B[j, k] = b(phi_k, phi_j)``."""
    return _assemble(space, data, principal_only=False, dirichlet=dirichlet)


def assemble_A(space, diffusion, dirichlet=True):
    """Galerkin matrix of the principal part ``a(v, w) = (K grad v, grad w)``.

    ``diffusion`` is a :class:`PdeData` (its ``diffusion`` field is used) or a
    bare K field.
    """
    return _assemble(space, diffusion, principal_only=True, dirichlet=dirichlet)


def assemble_rhs(space, data, dirichlet=True):
    """Load vector ``F(phi_j) = (f, phi_j) + (fvec, grad phi_j)``."""
    mesh = space.mesh
    lam, w, phi, dphi, _ = reference.triangle_tables(space.p, 2 * space.p + 2)
    nq, nloc = phi.shape
    index = space.elem_dofs if dirichlet else space.elem_nodes
    n = space.N if dirichlet else space.n_nodes
    out = np.zeros(n)
    for sl in _chunks(mesh.n_elements):
        W = 2.0 * mesh.areas[sl][:, None] * w[None, :]
        x = space.quadrature_points(lam, sl)
        elem = np.broadcast_to(np.arange(mesh.n_elements)[sl][:, None], x.shape[:-1])
        f = evaluate_field(data.source, x, elem, ())
        fv = evaluate_field(data.source_vec, x, elem, (2,))
        loc = (W * f) @ phi
        if callable(data.source_vec) or np.any(np.asarray(data.source_vec) != 0):
            glam = space.grad_lambda[sl]
            G = np.matmul(dphi.reshape(1, nq * nloc, 3), glam).reshape(-1, nq, nloc, 2)
            loc += np.einsum("eqix,eqx->ei", G, fv * W[:, :, None])
        idx = index[sl]
        keep = idx >= 0
        out += np.bincount(idx[keep], weights=loc[keep], minlength=n)
    return out


def prolongation(coarse, fine):
    """Matrix of the embedding of ``coarse`` into ``fine`` (nodal interpolation).

    ``fine.mesh`` must equal ``coarse.mesh`` or descend from it through
    ``refine``; the fine degree must be at least the coarse degree.
    """
    if fine.p < coarse.p:
        raise ValueError("fine degree must not be lower than coarse degree")
    cm, fm = coarse.mesh, fine.mesh
    if coarse is fine:
        return SparseOperator.identity(fine.N)
    anc = fm.ancestors(cm)
    # one representative element per fine node
    flat = fine.elem_nodes.ravel()
    _, first = np.unique(flat, return_index=True)
    elem = first // fine.nloc
    dof_elem = elem[fine.dof_nodes]
    parent = anc[dof_elem]
    x = fine.node_coords[fine.dof_nodes]
    v = cm.vertices[cm.elements[parent]]
    J = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
    rhs = (x - v[:, 0])[:, :, None]
    l12 = np.linalg.solve(J, rhs)[:, :, 0]
    lam = np.column_stack([1.0 - l12.sum(axis=1), l12])
    lam[np.abs(lam) < 1e-14] = 0.0
    vals, _, _ = reference.evaluate_basis(coarse.p, lam, derivatives=0)
    cols = coarse.elem_dofs[parent]
    rows = np.broadcast_to(np.arange(fine.N)[:, None], cols.shape)
    keep = (cols >= 0) & (np.abs(vals) > 1e-14)
    return SparseOperator.from_coo(rows[keep], cols[keep], vals[keep], (fine.N, coarse.N))


def galerkin_solve_direct(B, d):
    """Sparse LU solve of ``B x = d`` with a relative residual check."""
    d = np.asarray(d, dtype=float)
    if B.shape[0] != B.shape[1] or B.shape[0] != d.shape[0]:
        raise ValueError("dimension mismatch")
    if d.size == 0:
        return d.copy()
    try:
        lu = spla.splu(B.csr.tocsc())
    except RuntimeError as exc:
        raise np.linalg.LinAlgError(f"singular system: {exc}") from exc
    x = lu.solve(d)
    res = np.linalg.norm(B.csr @ x - d)
    if not np.isfinite(res) or res > 1e-10 * max(np.linalg.norm(d), np.finfo(float).tiny):
        raise np.linalg.LinAlgError("direct solve failed the residual check")
    return x


def locate(mesh, points):
    """Element index and barycentric coordinates of each point (brute force)."""
    points = np.atleast_2d(points)
    v = mesh.vertices[mesh.elements]
    J = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
    Jinv = np.linalg.inv(J)
    elem = np.empty(len(points), dtype=np.int64)
    lam = np.empty((len(points), 3))
    for i, x in enumerate(points):
        l12 = np.einsum("eij,ej->ei", Jinv, x - v[:, 0])
        l = np.column_stack([1 - l12.sum(1), l12])
        worst = l.min(axis=1)
        e = int(np.argmax(worst))
        if worst[e] < -1e-10:
            raise ValueError(f"point {x} outside the mesh")
        elem[i] = e
        lam[i] = l[e]
    return elem, lam


def point_values(space, x, points):
    """Evaluate the FE function with DOF vector ``x`` at arbitrary points."""
    elem, lam = locate(space.mesh, points)
    vals, _, _ = reference.evaluate_basis(space.p, lam, derivatives=0)
    coeff = space.full_vector(x)[space.elem_nodes[elem]]
    return (vals * coeff).sum(axis=1)
