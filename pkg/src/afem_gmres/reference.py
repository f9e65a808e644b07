"""Lagrange basis functions and quadrature on the reference triangle.

Everything is expressed in barycentric coordinates ``lam = (l0, l1, l2)``.
Local node order: the three vertices, then ``p - 1`` nodes per local edge
``k`` (running from vertex ``k`` to vertex ``k + 1``), then interior nodes.
"""
from functools import lru_cache

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.special import roots_jacobi, roots_legendre


@lru_cache(maxsize=None)
def lattice(p):
    """Multi-indices (i0, i1, i2), i0 + i1 + i2 = p, in local node order."""
    nodes = [(p, 0, 0), (0, p, 0), (0, 0, p)]
    for k in range(3):
        for t in range(1, p):
            idx = [0, 0, 0]
            idx[k] = p - t
            idx[(k + 1) % 3] = t
            nodes.append(tuple(idx))
    for i in range(1, p):
        for j in range(1, p - i):
            nodes.append((p - i - j, i, j))
    return np.array(nodes, dtype=np.int64)


def n_local(p):
    return (p + 1) * (p + 2) // 2


@lru_cache(maxsize=None)
def _factor_polys(p):
    # g_a(t) = prod_{s<a} (p t - s) / (s + 1) and its first two derivatives
    table = []
    for a in range(p + 1):
        c = np.array([1.0])
        for s in range(a):
            c = npoly.polymul(c, np.array([-s, p], dtype=float) / (s + 1))
        d1 = npoly.polyder(c) if c.size > 1 else np.array([0.0])
        d2 = npoly.polyder(d1) if d1.size > 1 else np.array([0.0])
        table.append((c, d1, d2))
    return table


def evaluate_basis(p, lam, derivatives=1):
    """Basis values and barycentric derivatives at points ``lam`` of shape (n, 3).

    Returns ``(phi, dphi, d2phi)`` with shapes (n, nloc), (n, nloc, 3) and
    (n, nloc, 3, 3); derivatives are with respect to the barycentric
    coordinates treated as independent variables.  ``d2phi`` is None when
    ``derivatives < 2``.
    """
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    nodes = lattice(p)
    polys = _factor_polys(p)
    n = lam.shape[0]
    g = np.empty((3, 3, n, p + 1))  # derivative order, coordinate, point, exponent
    for a, (c, d1, d2) in enumerate(polys):
        for m in range(3):
            g[0, m, :, a] = npoly.polyval(lam[:, m], c)
            g[1, m, :, a] = npoly.polyval(lam[:, m], d1)
            g[2, m, :, a] = npoly.polyval(lam[:, m], d2)
    # f[o][m] has shape (n, nloc): factor for coordinate m, derivative order o
    f = [[g[o, m][:, nodes[:, m]] for m in range(3)] for o in range(3)]
    phi = f[0][0] * f[0][1] * f[0][2]
    dphi = np.empty((n, len(nodes), 3))
    for m in range(3):
        others = [f[0][j] for j in range(3) if j != m]
        dphi[:, :, m] = f[1][m] * others[0] * others[1]
    d2phi = None
    if derivatives >= 2:
        d2phi = np.empty((n, len(nodes), 3, 3))
        for m in range(3):
            for k in range(3):
                if m == k:
                    others = [f[0][j] for j in range(3) if j != m]
                    d2phi[:, :, m, m] = f[2][m] * others[0] * others[1]
                else:
                    rest = 3 - m - k
                    d2phi[:, :, m, k] = f[1][m] * f[1][k] * f[0][rest]
    return phi, dphi, d2phi


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Collapsed Gauss rule exact for polynomials of total degree ``degree``.

    Returns barycentric points (nq, 3) and weights summing to 1/2 (the
    reference area).
    """
    n = max(1, (degree + 2) // 2)
    tj, wj = roots_jacobi(n, 1.0, 0.0)
    tl, wl = roots_legendre(n)
    u = 0.5 * (1.0 + tj)
    v = 0.5 * (1.0 + tl)
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wj * 0.25, wl * 0.5)
    xi = U.ravel()
    eta = (V * (1.0 - U)).ravel()
    lam = np.column_stack([1.0 - xi - eta, xi, eta])
    return lam, W.ravel()


@lru_cache(maxsize=None)
def line_rule(degree):
    """Gauss-Legendre points on [0, 1] with weights summing to 1."""
    n = max(1, (degree + 2) // 2)
    t, w = roots_legendre(n)
    return 0.5 * (1.0 + t), 0.5 * w


def _frozen(*arrays):
    for a in arrays:
        if a is not None:
            a.setflags(write=False)
    return arrays


@lru_cache(maxsize=None)
def triangle_tables(p, degree):
    """``(lam, w, phi, dphi, d2phi)`` of the degree-``degree`` rule (read-only)."""
    lam, w = triangle_rule(degree)
    phi, dphi, d2phi = evaluate_basis(p, lam, derivatives=2)
    return _frozen(lam, w, phi, dphi, d2phi)


@lru_cache(maxsize=None)
def edge_tables(p, degree):
    """Line rule ``(t, w)`` plus basis derivatives on each local edge.

    ``dphi[k, flip]`` has shape (nq, nloc, 3) and holds the barycentric
    derivatives at the points ``s = t`` (``flip = 0``) or ``s = 1 - t``
    (``flip = 1``) of local edge ``k``, parametrized from vertex k to k + 1.
    """
    t, w = line_rule(degree)
    nq = t.size
    dphi = np.empty((3, 2, nq, n_local(p), 3))
    for k in range(3):
        for flip in range(2):
            s = 1.0 - t if flip else t
            lam = np.zeros((nq, 3))
            lam[:, k] = 1.0 - s
            lam[:, (k + 1) % 3] = s
            dphi[k, flip] = evaluate_basis(p, lam)[1]
    return _frozen(t, w, dphi)
