"""Conforming triangulations and newest vertex bisection.

Elements are stored normalized: the reference edge is local edge 0, i.e.
the edge between local vertices 0 and 1, local vertex 2 is the newest
vertex, and every element is positively oriented.  Local edge ``k`` joins
local vertices ``k`` and ``(k + 1) % 3``.
"""
from __future__ import annotations

from functools import cached_property
from pathlib import Path

import numpy as np

from . import kernels

__all__ = [
    "Triangulation",
    "MeshError",
    "initial_mesh_lshape",
    "unit_square",
    "refine",
    "vertex_patch",
    "changed_vertices",
    "relink",
    "is_conforming",
    "read_mesh",
    "write_mesh",
]


class MeshError(ValueError):
    """Invalid mesh, marking or lineage."""


def _signed_area(vertices, elements):
    p0, p1, p2 = (vertices[elements[:, i]] for i in range(3))
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _rotate(elements, shift):
    """Rotate each row left by ``shift`` so that local edge ``shift`` becomes edge 0."""
    cols = (np.arange(3)[None, :] + shift[:, None]) % 3
    return np.take_along_axis(elements, cols, axis=1)


def _orient(vertices, elements):
    # swapping v0 and v1 keeps the reference edge in place
    neg = _signed_area(vertices, elements) < 0
    if neg.any():
        elements = elements.copy()
        elements[neg, 0], elements[neg, 1] = elements[neg, 1], elements[neg, 0].copy()
    return elements


def longest_edge_reference(vertices, elements):
    """Reference edge = longest edge, ties broken by smallest opposite vertex."""
    elements = np.asarray(elements, dtype=np.int64)
    lengths = np.empty((len(elements), 3))
    opposite = np.empty((len(elements), 3), dtype=np.int64)
    for k in range(3):
        a = vertices[elements[:, k]]
        b = vertices[elements[:, (k + 1) % 3]]
        lengths[:, k] = np.hypot(*(b - a).T)
        opposite[:, k] = elements[:, (k + 2) % 3]
    # lengths equal to rounding are treated as ties
    rel = lengths / lengths.max(axis=1, keepdims=True)
    longest = rel > 1.0 - 1e-12
    key = np.where(longest, opposite, np.iinfo(np.int64).max)
    return np.argmin(key, axis=1)


class Triangulation:
    """A conforming 2D triangulation with NVB bookkeeping.

    Parameters
    ----------
    vertices : (nv, 2) array
    elements : (ne, 3) int array, reference edge between columns 0 and 1.
    parent : (ne,) int array or None
        Index of the parent element in ``parent_mesh``.
    parent_mesh : Triangulation or None
        The mesh this one was refined from (one ``refine`` call).
    vertex_level : (nv,) int array
        Refinement level at which each vertex was created.
    new_vertex_edges : (n_new, 2) int array
        Endpoints (in ``parent_mesh``) of the edge bisected by each new vertex.
    level : int
        Number of ``refine`` calls since the initial mesh.

    Instances are treated as immutable; arrays are flagged read-only.
    """

    def __init__(self, vertices, elements, *, parent=None, parent_mesh=None,
                 vertex_level=None, new_vertex_edges=None, level=0):
        vertices = np.ascontiguousarray(vertices, dtype=float)
        elements = np.ascontiguousarray(elements, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (nv, 2)")
        if elements.ndim != 2 or elements.shape[1] != 3:
            raise MeshError("elements must have shape (ne, 3)")
        if elements.size and (elements.min() < 0 or elements.max() >= len(vertices)):
            raise MeshError("element refers to a missing vertex")
        self.vertices = vertices
        self.elements = elements
        self.parent = None if parent is None else np.asarray(parent, dtype=np.int64)
        self.parent_mesh = parent_mesh
        if vertex_level is None:
            vertex_level = np.zeros(len(vertices), dtype=np.int64)
        self.vertex_level = np.asarray(vertex_level, dtype=np.int64)
        if new_vertex_edges is None:
            new_vertex_edges = np.zeros((0, 2), dtype=np.int64)
        self.new_vertex_edges = np.asarray(new_vertex_edges, dtype=np.int64)
        self.level = level
        for arr in (self.vertices, self.elements, self.vertex_level, self.new_vertex_edges):
            arr.setflags(write=False)
        if self.parent is not None:
            self.parent.setflags(write=False)
        if (self.areas <= 0).any():
            raise MeshError("element with non-positive signed area")

    @classmethod
    def from_arrays(cls, vertices, elements, ref_edge=None):
        """Build an initial mesh; ``ref_edge`` defaults to the longest edge."""
        vertices = np.asarray(vertices, dtype=float)
        elements = np.asarray(elements, dtype=np.int64)
        if ref_edge is None:
            ref_edge = longest_edge_reference(vertices, elements)
        ref_edge = np.asarray(ref_edge, dtype=np.int64)
        if ((ref_edge < 0) | (ref_edge > 2)).any():
            raise MeshError("reference edge index must be 0, 1 or 2")
        elements = _orient(vertices, _rotate(elements, ref_edge))
        return cls(vertices, elements)

    def __repr__(self):
        return f"Triangulation(nv={self.n_vertices}, ne={self.n_elements}, level={self.level})"

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    @cached_property
    def areas(self):
        return _signed_area(self.vertices, self.elements)

    @cached_property
    def _edge_data(self):
        ne = self.n_elements
        a = self.elements
        b = np.roll(a, -1, axis=1)
        lo = np.minimum(a, b).ravel()
        hi = np.maximum(a, b).ravel()
        keys = lo * self.n_vertices + hi
        uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        edges = np.stack([lo[first], hi[first]], axis=1)
        elem_edges = inverse.reshape(ne, 3).astype(np.int64)
        counts = np.bincount(inverse, minlength=len(uniq))
        if (counts > 2).any():
            raise MeshError("edge shared by more than two elements")
        edge_elements = np.full((len(uniq), 2), -1, dtype=np.int64)
        owner = np.repeat(np.arange(ne), 3)
        order = np.argsort(inverse, kind="stable")
        sorted_edges = inverse[order]
        start = np.searchsorted(sorted_edges, np.arange(len(uniq)))
        slot = np.arange(3 * ne) - start[sorted_edges]
        edge_elements[sorted_edges, slot] = owner[order]
        edge_local = np.full((len(uniq), 2), -1, dtype=np.int64)
        edge_local[sorted_edges, slot] = np.tile(np.arange(3), ne)[order]
        return edges, elem_edges, edge_elements, edge_local

    @property
    def edges(self):
        """(n_edges, 2) vertex pairs, sorted within each pair."""
        return self._edge_data[0]

    @property
    def elem_edges(self):
        """(ne, 3) edge index of each local edge."""
        return self._edge_data[1]

    @property
    def edge_elements(self):
        """(n_edges, 2) adjacent elements; -1 marks the missing side of a boundary edge."""
        return self._edge_data[2]

    @property
    def edge_local(self):
        """(n_edges, 2) local edge index inside each adjacent element."""
        return self._edge_data[3]

    @property
    def n_edges(self):
        return len(self.edges)

    @cached_property
    def boundary_edges(self):
        return self.edge_elements[:, 1] < 0

    @cached_property
    def boundary_vertices(self):
        flag = np.zeros(self.n_vertices, dtype=bool)
        flag[self.edges[self.boundary_edges].ravel()] = True
        return flag

    @cached_property
    def vertex_elements(self):
        """CSR-style (offsets, elements) listing the elements around each vertex."""
        flat = self.elements.ravel()
        order = np.argsort(flat, kind="stable")
        offsets = np.zeros(self.n_vertices + 1, dtype=np.int64)
        np.cumsum(np.bincount(flat, minlength=self.n_vertices), out=offsets[1:])
        return offsets, order // 3

    @cached_property
    def diameters(self):
        v = self.vertices[self.elements]
        d = np.stack([np.hypot(*(v[:, (k + 1) % 3] - v[:, k]).T) for k in range(3)], axis=1)
        return d.max(axis=1)

    def ancestors(self, coarse):
        """Map each element to its ancestor in ``coarse`` (an earlier mesh of the lineage)."""
        anc = np.arange(self.n_elements, dtype=np.int64)
        mesh = self
        while mesh is not coarse:
            if mesh.parent_mesh is None:
                raise MeshError("meshes are not nested (no lineage link)")
            anc = mesh.parent[anc]
            mesh = mesh.parent_mesh
        return anc


def initial_mesh_lshape():
    """The 48-element criss-cross triangulation of (-1,1)^2 minus [0,1]x[-1,0]."""
    h = 0.5
    corners = np.arange(-1.0, 1.0, h)
    squares = [(x, y) for y in corners for x in corners if not (x >= 0 and y < 0)]
    grid = {}
    verts = []

    def vid(pt):
        key = (round(pt[0] / h), round(pt[1] / h))
        if key not in grid:
            grid[key] = len(verts)
            verts.append(pt)
        return grid[key]

    quads = [[vid((x, y)), vid((x + h, y)), vid((x + h, y + h)), vid((x, y + h))]
             for x, y in squares]
    elements = []
    for (x, y), (sw, se, ne_, nw) in zip(squares, quads):
        c = len(verts)
        verts.append((x + h / 2, y + h / 2))
        elements += [(sw, se, c), (se, ne_, c), (ne_, nw, c), (nw, sw, c)]
    return Triangulation.from_arrays(np.array(verts), np.array(elements))


def unit_square(n=1, criss_cross=False):
    """Triangulation of (0,1)^2 with an n-by-n grid of squares.

    Each square is split along its diagonal into two triangles, or into four
    around its centre when ``criss_cross`` is set.
    """
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs)
    verts = [np.column_stack([X.ravel(), Y.ravel()])]
    elements = []
    nxt = (n + 1) ** 2
    for j in range(n):
        for i in range(n):
            sw = j * (n + 1) + i
            se, nw = sw + 1, sw + n + 1
            ne_ = nw + 1
            if criss_cross:
                verts.append([[(xs[i] + xs[i + 1]) / 2, (xs[j] + xs[j + 1]) / 2]])
                c = nxt
                nxt += 1
                elements += [(sw, se, c), (se, ne_, c), (ne_, nw, c), (nw, sw, c)]
            else:
                elements += [(sw, se, ne_), (sw, ne_, nw)]
    return Triangulation.from_arrays(np.vstack(verts), np.array(elements))


def _as_markset(mesh, marked):
    marked = np.asarray(marked, dtype=np.int64).ravel()
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_elements):
        raise MeshError("marked element index out of range")
    if np.unique(marked).size != marked.size:
        raise MeshError("duplicate element in mark set")
    return marked


REFINE_MODES = ("bisec3", "bisec1")


def refine(mesh, marked, mode="bisec3"):
    """Coarsest NVB refinement of ``mesh`` in which every marked element is refined.

    ``mode="bisec3"`` bisects all three edges of each marked element (four
    children); ``mode="bisec1"`` only bisects the reference edge.  The
    closure then bisects further elements until the mesh is conforming.
    Returns ``mesh`` itself for an empty mark set.
    """
    if mode not in REFINE_MODES:
        raise ValueError(f"mode must be one of {REFINE_MODES}")
    marked = _as_markset(mesh, marked)
    if marked.size == 0:
        return mesh
    elem_edges = mesh.elem_edges
    edge_mark = np.zeros(mesh.n_edges, dtype=bool)
    if mode == "bisec3":
        edge_mark[elem_edges[marked].ravel()] = True
    else:
        edge_mark[elem_edges[marked, 0]] = True
    kernels.nvb_closure(elem_edges, mesh.edge_elements, edge_mark)
    return _bisect(mesh, edge_mark)


def _bisect(mesh, edge_mark):
    """Split every marked edge; the mark set must already be NVB-closed."""
    elem_edges = mesh.elem_edges
    nv = mesh.n_vertices
    split = np.flatnonzero(edge_mark)
    midpoint = np.full(mesh.n_edges, -1, dtype=np.int64)
    midpoint[split] = nv + np.arange(split.size)
    ends = mesh.edges[split]
    new_xy = 0.5 * (mesh.vertices[ends[:, 0]] + mesh.vertices[ends[:, 1]])
    vertices = np.vstack([mesh.vertices, new_xy])

    a, b, c = mesh.elements.T
    m0, m1, m2 = (midpoint[elem_edges[:, k]] for k in range(3))
    has1 = m1 >= 0
    has2 = m2 >= 0
    bis = m0 >= 0
    nchild = np.where(bis, 2 + has1 + has2, 1)
    offsets = np.concatenate([[0], np.cumsum(nchild)])
    out = np.empty((offsets[-1], 3), dtype=np.int64)
    parent = np.repeat(np.arange(mesh.n_elements), nchild)

    keep = ~bis
    out[offsets[:-1][keep]] = mesh.elements[keep]

    # children of (a, b, c) at midpoint m0 are (c, a, m0) and (b, c, m0);
    # a marked edge (c, a) resp. (b, c) bisects the first resp. second child
    pos = offsets[:-1]
    sel = bis & ~has1 & ~has2
    out[pos[sel]] = np.column_stack([c[sel], a[sel], m0[sel]])
    out[pos[sel] + 1] = np.column_stack([b[sel], c[sel], m0[sel]])

    sel = bis & has2 & ~has1
    out[pos[sel]] = np.column_stack([m0[sel], c[sel], m2[sel]])
    out[pos[sel] + 1] = np.column_stack([a[sel], m0[sel], m2[sel]])
    out[pos[sel] + 2] = np.column_stack([b[sel], c[sel], m0[sel]])

    sel = bis & has1 & ~has2
    out[pos[sel]] = np.column_stack([c[sel], a[sel], m0[sel]])
    out[pos[sel] + 1] = np.column_stack([m0[sel], b[sel], m1[sel]])
    out[pos[sel] + 2] = np.column_stack([c[sel], m0[sel], m1[sel]])

    sel = bis & has1 & has2
    out[pos[sel]] = np.column_stack([m0[sel], c[sel], m2[sel]])
    out[pos[sel] + 1] = np.column_stack([a[sel], m0[sel], m2[sel]])
    out[pos[sel] + 2] = np.column_stack([m0[sel], b[sel], m1[sel]])
    out[pos[sel] + 3] = np.column_stack([c[sel], m0[sel], m1[sel]])

    level = mesh.level + 1
    vertex_level = np.concatenate([mesh.vertex_level, np.full(split.size, level)])
    fine = Triangulation(vertices, out, parent=parent, parent_mesh=mesh,
                         vertex_level=vertex_level, new_vertex_edges=ends, level=level)
    if fine.edge_elements.shape[0] != mesh.n_edges + split.size + (fine.n_elements - mesh.n_elements):
        raise MeshError("refinement produced a non-conforming mesh")
    return fine


def vertex_patch(mesh, z):
    """Indices of the elements containing vertex ``z`` (sorted)."""
    z = int(z)
    if not 0 <= z < mesh.n_vertices:
        raise MeshError(f"vertex {z} out of range")
    offsets, elems = mesh.vertex_elements
    return np.sort(elems[offsets[z]:offsets[z + 1]])


def refined_elements(coarse, fine):
    """Boolean mask over ``coarse`` elements that were bisected on the way to ``fine``."""
    if fine is coarse:
        return np.zeros(coarse.n_elements, dtype=bool)
    if fine.parent_mesh is not coarse:
        raise MeshError("fine mesh is not a single refinement of the coarse mesh")
    return np.bincount(fine.parent, minlength=coarse.n_elements) > 1


def changed_vertices(prev, mesh):
    """New vertices of ``mesh`` plus old vertices whose element patch changed.

    An old vertex's patch changes exactly when one of its elements was
    bisected; these are the vertices adjacent to some new vertex.
    Returns a sorted int array.
    """
    if mesh is prev:
        return np.zeros(0, dtype=np.int64)
    mask = refined_elements(prev, mesh)
    flag = np.zeros(mesh.n_vertices, dtype=bool)
    flag[prev.n_vertices:] = True
    flag[prev.elements[mask].ravel()] = True
    return np.flatnonzero(flag)


def is_conforming(mesh):
    """Check edge incidence, orientation and the absence of hanging nodes."""
    try:
        edge_elements = mesh.edge_elements
    except MeshError:
        return False
    if (mesh.areas <= 0).any():
        return False
    bnd = np.flatnonzero(edge_elements[:, 1] < 0)
    ends = mesh.edges[bnd]
    cand = np.unique(ends)
    pts = mesh.vertices[cand]
    for lo in range(0, len(bnd), 256):
        e = ends[lo:lo + 256]
        a = mesh.vertices[e[:, 0]][:, None, :]
        b = mesh.vertices[e[:, 1]][:, None, :]
        d = b - a
        w = pts[None, :, :] - a
        cross = d[..., 0] * w[..., 1] - d[..., 1] * w[..., 0]
        t = (d[..., 0] * w[..., 0] + d[..., 1] * w[..., 1]) / (d[..., 0] ** 2 + d[..., 1] ** 2)
        scale = np.hypot(d[..., 0], d[..., 1])
        inside = (np.abs(cross) <= 1e-12 * scale ** 2) & (t > 1e-12) & (t < 1 - 1e-12)
        if inside.any():
            return False
    return True


def relink(coarse, fine):
    """Recover the lineage between two nested meshes read from disk.

    The edges of ``coarse`` bisected on the way to ``fine`` are those whose
    midpoints are new vertices of ``fine``; splitting them must reproduce
    ``fine`` exactly.  Returns the linked mesh.
    """
    nv = coarse.n_vertices
    if fine.n_vertices < nv or not np.array_equal(fine.vertices[:nv], coarse.vertices):
        raise MeshError("meshes are not nested")
    ends = coarse.edges
    mid = 0.5 * (coarse.vertices[ends[:, 0]] + coarse.vertices[ends[:, 1]])
    new = fine.vertices[nv:]
    edge_mark = np.isin(mid[:, 0] + 1j * mid[:, 1], new[:, 0] + 1j * new[:, 1])
    closed = kernels.nvb_closure(coarse.elem_edges, coarse.edge_elements, edge_mark.copy())
    if not np.array_equal(closed, edge_mark) or not edge_mark.any():
        raise MeshError("meshes are not related by a single NVB refinement")
    linked = _bisect(coarse, edge_mark)
    if (linked.n_vertices != fine.n_vertices
            or not np.array_equal(linked.elements, fine.elements)
            or not np.array_equal(linked.vertices, fine.vertices)):
        raise MeshError("meshes are not related by a single NVB refinement")
    return linked


def write_mesh(path, mesh):
    """Write the plain-text mesh format (reference edge always 0 after normalization)."""
    lines = [f"d=2 nv={mesh.n_vertices} ne={mesh.n_elements}"]
    bflag = mesh.boundary_vertices.astype(int)
    lines += [f"{x!r} {y!r} {f}" for (x, y), f in zip(mesh.vertices.tolist(), bflag)]
    lines += [f"{a} {b} {c} 0" for a, b, c in mesh.elements.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path):
    """Read the plain-text mesh format written by :func:`write_mesh`."""
    text = Path(path).read_text().split("\n")
    header = dict(tok.split("=") for tok in text[0].split())
    if header.get("d") != "2":
        raise MeshError("only d=2 meshes are supported")
    nv, ne = int(header["nv"]), int(header["ne"])
    body = [ln.split() for ln in text[1:] if ln.strip()]
    if len(body) != nv + ne:
        raise MeshError(f"expected {nv + ne} data lines, found {len(body)}")
    verts = np.array([[float(t[0]), float(t[1])] for t in body[:nv]])
    rows = np.array([[int(t) for t in ln[:4]] for ln in body[nv:]], dtype=np.int64).reshape(ne, 4)
    return Triangulation.from_arrays(verts, rows[:, :3], ref_edge=rows[:, 3])
