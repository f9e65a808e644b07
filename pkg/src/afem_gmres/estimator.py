"""Residual a-posteriori error estimator.

For an element T with area |T| the squared indicator is

    |T| ||R||_T^2 + |T|^{1/2} ||J||_{dT interior}^2,

with the element residual R = div(K grad v - fvec) - b . grad v - c v + f and
the normal jump J = [(K grad v - fvec) . n] over interior edges.  Each edge
jump is charged in full to both neighbouring elements.

``div(K grad v)`` uses exact second derivatives of v with K frozen at each
quadrature point, which is exact for element-wise constant K.
"""
from dataclasses import dataclass

import numpy as np

from . import reference
from .fespace import CHUNK, PdeData, evaluate_field

__all__ = ["EstimatorData", "estimate", "subset_norm"]


@dataclass(frozen=True)
class EstimatorData:
    """Squared element indicators of one discrete function."""

    indicators: np.ndarray
    mesh: object
    coefficients: np.ndarray

    @property
    def eta2(self):
        return float(self.indicators.sum())

    @property
    def eta(self):
        return float(np.sqrt(self.eta2))

    def __len__(self):
        return self.indicators.size


def subset_norm(data, U):
    """``(sum_{T in U} eta(T)^2)^{1/2}`` for element indices or a boolean mask."""
    U = np.asarray(U)
    n = data.indicators.size
    if U.dtype == bool:
        if U.shape != (n,):
            raise ValueError("mask length must equal the number of elements")
        return float(np.sqrt(data.indicators[U].sum()))
    U = U.astype(np.int64, copy=False).ravel()
    if U.size and (U.min() < 0 or U.max() >= n):
        raise IndexError("element index out of range")
    if np.unique(U).size != U.size:
        raise ValueError("duplicate element indices")
    return float(np.sqrt(data.indicators[U].sum()))


def _is_zero(field):
    return field is None or (not callable(field) and not np.any(np.asarray(field) != 0))


def _apply_K(data, x, elem, vec):
    """``K vec`` for vectors ``vec`` of shape (..., 2)."""
    if callable(data.diffusion):
        K = data.diffusion_matrix(x, elem)
        return np.matmul(K, vec[..., None])[..., 0]
    K = data.diffusion_matrix(x[:1, :1], elem[:1, :1])[0, 0]
    return vec @ K.T


def _volume_terms(space, data, coeff, out):
    p = space.p
    mesh = space.mesh
    lam, w, phi, dphi, d2phi = reference.triangle_tables(p, 2 * p + 2)
    nq, nloc = phi.shape
    dtab = dphi.transpose(1, 0, 2).reshape(nloc, nq * 3)
    htab = d2phi.transpose(1, 0, 2, 3).reshape(nloc, nq * 9)
    for sl in _slices(mesh.n_elements):
        glam = space.grad_lambda[sl]
        ne = glam.shape[0]
        c_loc = coeff[space.elem_nodes[sl]]
        x = space.quadrature_points(lam, sl)
        elem = np.broadcast_to(np.arange(mesh.n_elements)[sl][:, None], x.shape[:-1])
        R = evaluate_field(data.source, x, elem, ()).copy()
        if p > 1:
            d2lam = (c_loc @ htab).reshape(ne, nq, 3, 3)
            gl = glam[:, None]
            hess = np.matmul(np.matmul(np.swapaxes(gl, -1, -2), d2lam), gl)
            if callable(data.diffusion):
                R += np.einsum("eqxy,eqxy->eq", data.diffusion_matrix(x, elem), hess)
            else:
                K = data.diffusion_matrix(x[:1, :1], elem[:1, :1])[0, 0]
                R += hess.reshape(ne, nq, 4) @ K.ravel()
        if data.source_vec_div is not None:
            R -= evaluate_field(data.source_vec_div, x, elem, ())
        if not _is_zero(data.convection):
            grad = np.matmul((c_loc @ dtab).reshape(ne, nq, 3), glam)
            b = evaluate_field(data.convection, x, elem, (2,))
            R -= np.einsum("eqx,eqx->eq", b, grad)
        if not _is_zero(data.reaction):
            R -= evaluate_field(data.reaction, x, elem, ()) * (c_loc @ phi.T)
        area = mesh.areas[sl]
        out[sl] += 2.0 * area * area * ((R * R) @ w)


def _slices(n):
    for lo in range(0, n, CHUNK):
        yield slice(lo, min(lo + CHUNK, n))


def _flux_on_edge(space, data, coeff, elems, local, flip, x, dphi):
    """Values of (K grad v - fvec) at edge points ``x`` seen from ``elems``.

    ``dphi`` holds the tabulated basis derivatives per (local edge, flip).
    The local edge ``local`` runs from local vertex k to k + 1, reversed when
    ``flip`` is set.
    """
    ne, nq = elems.size, x.shape[1]
    nloc = dphi.shape[-2]
    c_loc = coeff[space.elem_nodes[elems]]
    dlam = np.empty((ne, nq, 3))
    combo = 2 * local + flip
    for k in np.unique(combo):
        sel = combo == k
        tab = dphi[k // 2, k % 2].transpose(1, 0, 2).reshape(nloc, nq * 3)
        dlam[sel] = (c_loc[sel] @ tab).reshape(-1, nq, 3)
    grad = np.matmul(dlam, space.grad_lambda[elems])
    elem_ids = np.broadcast_to(elems[:, None], (ne, nq))
    flux = _apply_K(data, x, elem_ids, grad)
    if not _is_zero(data.source_vec):
        flux -= evaluate_field(data.source_vec, x, elem_ids, (2,))
    return flux


def _jump_terms(space, data, coeff, out):
    mesh = space.mesh
    t, w, dphi = reference.edge_tables(space.p, 2 * space.p + 2)
    inner = np.flatnonzero(mesh.edge_elements[:, 1] >= 0)
    ends = mesh.edges
    for lo in range(0, inner.size, CHUNK):
        e = inner[lo:lo + CHUNK]
        a, b = ends[e, 0], ends[e, 1]
        va = mesh.vertices[a]
        d = mesh.vertices[b] - va
        x = va[:, None, :] + t[None, :, None] * d[:, None, :]
        length = np.hypot(d[:, 0], d[:, 1])
        normal = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
        jump = 0.0
        for side in (0, 1):
            el = mesh.edge_elements[e, side]
            loc = mesh.edge_local[e, side]
            flip = (mesh.elements[el, loc] != a).astype(np.int64)
            flux = _flux_on_edge(space, data, coeff, el, loc, flip, x, dphi)
            jump = jump + (1.0 - 2.0 * side) * np.matmul(flux, normal[:, :, None])[..., 0]
        sq = length * ((jump * jump) @ w)
        for side in (0, 1):
            el = mesh.edge_elements[e, side]
            out += np.bincount(el, weights=np.sqrt(mesh.areas[el]) * sq, minlength=out.size)


def estimate(space, data, v):
    """Squared element indicators of the discrete function with DOF vector ``v``."""
    if not isinstance(data, PdeData):
        raise TypeError("data must be a PdeData")
    v = np.asarray(v, dtype=float)
    if v.shape != (space.N,):
        raise ValueError(f"coefficient vector must have length {space.N}")
    coeff = space.full_vector(v)
    out = np.zeros(space.mesh.n_elements)
    _volume_terms(space, data, coeff, out)
    _jump_terms(space, data, coeff, out)
    return EstimatorData(out, space.mesh, v)
