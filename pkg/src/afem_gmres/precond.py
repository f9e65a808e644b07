"""Multilevel additive Schwarz and symmetric multigrid preconditioners.

Both act on the principal part only.  A :class:`Hierarchy` over meshes
``T_0, ..., T_L`` stores

* the exact coarse factorization of the P1 stiffness matrix on ``T_0``,
* P1 stiffness matrices and Jacobi weights on the changed vertices of the
  intermediate meshes ``T_1, ..., T_{L-1}``,
* consecutive transfers P1(T_{i-1}) -> P1(T_i) and P1(T_{L-1}) -> Pp(T_L),
* inverses of the degree-p vertex-patch matrices on the finest mesh.

The hierarchy grows one mesh at a time with :meth:`Hierarchy.push`, so the
adaptive loop only pays for the new level.
"""
import logging

import numpy as np

from . import kernels, reference
from .fespace import FeSpace, assemble_A, prolongation
from .linalg import DenseFactor
from .mesh import MeshError, changed_vertices

log = logging.getLogger(__name__)

__all__ = [
    "MU",
    "PatchSmoother",
    "Hierarchy",
    "Preconditioner",
    "IdentityPreconditioner",
    "DensePreconditioner",
    "build",
    "pinner",
]

MU = 1.0 / 3.0
"""Damping ``1 / (d + 1)`` of the multigrid sweep in two dimensions."""

_BLOCK = 4_000_000  # entries per batch of patch matrices


class PatchSmoother:
    """Sum of exact local solves on the degree-p vertex patches of one mesh.

    The patch of vertex ``z`` holds every free DOF whose Lagrange node has
    a positive barycentric weight at ``z`` in some element, i.e. all DOFs
    inside the open patch domain.
    """

    def __init__(self, space, A):
        nodes = reference.lattice(space.p)
        mesh = space.mesh
        z_parts, d_parts = [], []
        for k in range(3):
            local = np.flatnonzero(nodes[:, k] > 0)
            d = space.elem_dofs[:, local]
            z = np.broadcast_to(mesh.elements[:, k][:, None], d.shape)
            keep = d >= 0
            z_parts.append(z[keep])
            d_parts.append(d[keep])
        z = np.concatenate(z_parts)
        d = np.concatenate(d_parts)
        key = np.unique(z * max(space.N, 1) + d)
        z, d = key // max(space.N, 1), key % max(space.N, 1)
        counts = np.bincount(z, minlength=mesh.n_vertices)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        self.N = space.N
        self.groups = []
        for n in np.unique(counts[counts > 0]):
            verts = np.flatnonzero(counts == n)
            idx = d[offsets[verts][:, None] + np.arange(n)[None, :]]
            inv = np.empty((len(verts), n, n))
            step = max(1, _BLOCK // (n * n))
            for lo in range(0, len(verts), step):
                blk = idx[lo:lo + step]
                M = A.submatrix_entries(blk[:, :, None], blk[:, None, :])
                inv[lo:lo + step] = _spd_inverse(M)
            self.groups.append((np.ascontiguousarray(idx), inv))

    @property
    def n_patches(self):
        return sum(len(idx) for idx, _ in self.groups)

    @property
    def stored_entries(self):
        return sum(inv.size for _, inv in self.groups)

    def apply(self, r, out=None):
        if out is None:
            out = np.zeros(self.N)
        for idx, inv in self.groups:
            kernels.patch_apply(r, idx, inv, out)
        return out


def _spd_inverse(M):
    """Batched inverse through Cholesky factors, symmetric by construction."""
    L = np.linalg.cholesky(M)
    Linv = np.linalg.inv(L)
    return np.einsum("mki,mkj->mij", Linv, Linv)


class _Level:
    __slots__ = ("mesh", "space", "A", "transfer", "vplus", "dinv")

    def __init__(self, mesh, space, A):
        self.mesh = mesh
        self.space = space
        self.A = A
        self.transfer = None  # from the previous level's P1 space
        self.vplus = None
        self.dinv = None


class Hierarchy:
    """Nested mesh hierarchy with the data both preconditioners need.

    Parameters
    ----------
    diffusion : PdeData or K field
        Coefficient of the principal part.
    p : int
        Degree on the finest level.
    """

    def __init__(self, diffusion, p):
        self.diffusion = diffusion
        self.p = p
        self.levels = []  # P1 data for T_0, ..., T_{L-1}
        self.top = None  # (mesh, space, A, transfer, patches) for T_L
        self.coarse = None

    @property
    def L(self):
        return len(self.levels)

    @property
    def meshes(self):
        return [lv.mesh for lv in self.levels] + ([self.top["mesh"]] if self.top else [])

    @property
    def N(self):
        return self.top["space"].N

    def push(self, mesh):
        """Append a refinement of the current finest mesh (or the initial mesh)."""
        if self.top is not None:
            prev = self.top["mesh"]
            if mesh is prev:
                raise MeshError("pushed mesh equals the current finest mesh")
            mesh.ancestors(prev)  # raises for non-nested meshes
            if mesh.parent_mesh is not prev:
                raise MeshError("hierarchy levels must be consecutive refinements")
            space1 = self.top["space"] if self.p == 1 else FeSpace(prev, 1)
            A1 = self.top["A"] if self.p == 1 else assemble_A(space1, self.diffusion)
            lv = _Level(prev, space1, A1)
            if self.levels:
                below = self.levels[-1]
                lv.transfer = prolongation(below.space, space1)
                verts = changed_vertices(below.mesh, lv.mesh)
                dofs = space1.free[verts]
                dofs = dofs[dofs >= 0]
                diag = A1.diagonal()
                dinv = np.zeros(space1.N)
                dinv[dofs] = 1.0 / diag[dofs]
                lv.vplus, lv.dinv = dofs, dinv
            else:
                self.coarse = DenseFactor(A1.toarray())
            self.levels.append(lv)
        space = FeSpace(mesh, self.p)
        A = assemble_A(space, self.diffusion)
        top = {"mesh": mesh, "space": space, "A": A}
        if self.levels:
            top["transfer"] = prolongation(self.levels[-1].space, space)
        top["patches"] = PatchSmoother(space, A)
        if not self.levels and self.p > 1:
            # single mesh, p > 1: a P1 coarse space on the same mesh
            space1 = FeSpace(mesh, 1)
            A1 = assemble_A(space1, self.diffusion)
            self.coarse = DenseFactor(A1.toarray())
            top["coarse_space"] = space1
            top["coarse_A"] = A1
            top["transfer"] = prolongation(space1, space)
        elif not self.levels:
            self.coarse = DenseFactor(A.toarray())
        self.top = top
        return self

    def stored_sizes(self):
        """Per intermediate level: number of V+ DOFs with stored Jacobi weights."""
        return [0 if lv.vplus is None else lv.vplus.size for lv in self.levels]


class Preconditioner:
    """SPD preconditioner ``P ~ A^{-1}`` on the finest level of a hierarchy.

    ``variant`` is ``"as"`` (additive Schwarz) or ``"smg"`` (symmetric
    multigrid).  ``coarse_only`` drops every term except the coarse solve
    (for tests of the single-level case).
    """

    def __init__(self, hierarchy, variant="as", coarse_only=False):
        variant = variant.lower()
        if variant not in ("as", "smg"):
            raise ValueError("variant must be 'as' or 'smg'")
        if hierarchy.top is None:
            raise ValueError("empty hierarchy")
        self.h = hierarchy
        self.variant = variant
        self.coarse_only = coarse_only
        self.N = hierarchy.N
        self.n_applies = 0
        # snapshot: later pushes onto the hierarchy do not affect this instance
        self._top = hierarchy.top
        self._coarse = hierarchy.coarse
        self._levels = self._chain()

    def __repr__(self):
        return f"Preconditioner({self.variant}, levels={self.h.L + 1}, N={self.N})"

    def apply(self, r):
        r = np.asarray(r, dtype=float)
        if r.shape != (self.N,):
            raise ValueError(f"residual must have length {self.N}")
        self.n_applies += 1
        if self.variant == "as":
            return self._apply_as(r)
        return self._apply_smg(r)

    __call__ = apply

    def _chain(self):
        """Levels below the top as (A, transfer-to-next, jacobi weights)."""
        h = self.h
        top = h.top
        if not h.levels:
            if "coarse_A" in top:
                return [(top["coarse_A"], top["transfer"], None)]
            return []
        out = []
        for i, lv in enumerate(h.levels):
            T = h.levels[i + 1].transfer if i + 1 < h.L else top["transfer"]
            out.append((lv.A, T, lv.dinv))
        return out

    def _apply_as(self, r):
        chain = self._levels
        if not chain:
            s = self._coarse.solve(r)
            if not self.coarse_only:
                s = s + self._top["patches"].apply(r)
            return s
        # restrict through the chain
        g = [None] * len(chain)
        cur = r
        for i in range(len(chain) - 1, -1, -1):
            cur = chain[i][1].csr_t @ cur
            g[i] = cur
        corr = self._coarse.solve(g[0])
        for i in range(1, len(chain)):
            T_prev = chain[i - 1][1]
            corr = T_prev.csr @ corr
            if not self.coarse_only:
                corr += chain[i][2] * g[i]
        s = chain[-1][1].csr @ corr
        if not self.coarse_only:
            self._top["patches"].apply(r, s)
        return s

    def _apply_smg(self, r):
        chain = self._levels
        top = self._top
        if not chain:
            return self._coarse.solve(r)
        mu = MU
        n = len(chain)
        # level index: 0..n-1 chain levels, n = top
        mats = [c[0] for c in chain] + [top["A"]]
        smooth = [None] + [(lambda g, w=c[2]: w * g) for c in chain[1:]]
        smooth.append(lambda g: top["patches"].apply(g))
        T = [c[1] for c in chain]  # T[i]: level i -> i + 1
        c = [None] * (n + 1)
        gp = [None] * (n + 1)
        g = r
        for i in range(n, 0, -1):
            c[i] = smooth[i](g)
            gp[i] = g - mu * (mats[i].csr @ c[i])
            g = T[i - 1].csr_t @ gp[i]
        E = T[0].csr @ self._coarse.solve(g)
        for j in range(1, n + 1):
            res = gp[j] - mats[j].csr @ E
            u = smooth[j](res)
            acc = E + mu * (c[j] + u)
            if j < n:
                E = T[j].csr @ acc
        return acc


class IdentityPreconditioner:
    """``P = I`` (test fixture)."""

    variant = "identity"

    def __init__(self, n):
        self.N = n

    def apply(self, r):
        r = np.asarray(r, dtype=float)
        if r.shape != (self.N,):
            raise ValueError(f"residual must have length {self.N}")
        return r.copy()

    __call__ = apply


class DensePreconditioner:
    """Explicit SPD matrix ``P`` (test fixture, e.g. an exact inverse)."""

    variant = "dense"

    def __init__(self, P):
        self.P = np.asarray(P, dtype=float)
        self.N = self.P.shape[0]

    @classmethod
    def exact_inverse(cls, A):
        A = A.toarray() if hasattr(A, "toarray") else np.asarray(A, dtype=float)
        return cls(np.linalg.inv(A))

    def apply(self, r):
        r = np.asarray(r, dtype=float)
        if r.shape != (self.N,):
            raise ValueError(f"residual must have length {self.N}")
        return self.P @ r

    __call__ = apply


def build(meshes, diffusion, p, variant="as", coarse_only=False):
    """Build a preconditioner for degree ``p`` on the last of ``meshes``.

    ``meshes`` are consecutive refinements ``T_0, ..., T_L``.
    """
    if not meshes:
        raise ValueError("at least one mesh required")
    h = Hierarchy(diffusion, p)
    for m in meshes:
        h.push(m)
    return Preconditioner(h, variant, coarse_only=coarse_only)


def pinner(s, r, scale=None):
    """Weighted residual norm ``(s, r)^{1/2}`` for ``s = P r``.

    Raises if ``(s, r)`` is negative beyond a relative 1e-13 tolerance.
    """
    val = float(np.dot(s, r))
    if val < 0.0:
        ref = scale if scale is not None else np.linalg.norm(s) * np.linalg.norm(r)
        if val < -1e-13 * max(ref, np.finfo(float).tiny):
            raise np.linalg.LinAlgError("preconditioner is not positive definite")
        return 0.0
    return float(np.sqrt(val))
