import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afem_gmres import mesh as meshmod, reference
from afem_gmres.fespace import (
    FeSpace,
    PdeData,
    assemble_A,
    assemble_B,
    assemble_rhs,
    galerkin_solve_direct,
    point_values,
    prolongation,
)
from afem_gmres.linalg import SparseOperator

from conftest import refine_chain


def interior_lagrange_nodes(mesh, p):
    """Oracle: distinct Lagrange node coordinates off the boundary, by brute force."""
    pts = set()
    lam = reference.lattice(p) / p
    for tri in mesh.elements:
        for x in lam @ mesh.vertices[tri]:
            pts.add((round(x[0], 12), round(x[1], 12)))
    bnd = mesh.edges[mesh.boundary_edges]
    a, b = mesh.vertices[bnd[:, 0]], mesh.vertices[bnd[:, 1]]
    inside = []
    for x in pts:
        x = np.array(x)
        d, w = b - a, x - a
        cross = d[:, 0] * w[:, 1] - d[:, 1] * w[:, 0]
        t = (d * w).sum(1) / (d * d).sum(1)
        on = (np.abs(cross) < 1e-10) & (t > -1e-10) & (t < 1 + 1e-10)
        inside.append(not on.any())
    return sum(inside)


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_dimension_counts(lshape, p):
    space = FeSpace(lshape, p)
    assert space.N == interior_lagrange_nodes(lshape, p)
    assert space.N == {1: 17, 2: 81, 3: 193, 4: 353}[p]


def test_p2_lshape_has_81_dofs(lshape):
    assert FeSpace(lshape, 2).N == 81


def test_invalid_degree(lshape):
    with pytest.raises(ValueError):
        FeSpace(lshape, 5)


def test_reference_triangle_stiffness():
    m = meshmod.Triangulation.from_arrays(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                                          np.array([[0, 1, 2]]))
    A = assemble_A(FeSpace(m, 1), 1.0, dirichlet=False).toarray()
    expect = np.array([[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]])
    np.testing.assert_allclose(A, expect, atol=1e-15)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_B_symmetric_without_convection(lshape, p):
    space = FeSpace(lshape, p)
    B = assemble_B(space, PdeData()).toarray()
    assert np.abs(B - B.T).max() <= 1e-12 * np.abs(B).max()
    A = assemble_A(space, PdeData())
    np.testing.assert_allclose(A.toarray(), B, rtol=0, atol=1e-14)


def test_B_coercive_on_benchmark(lshape, benchmark_data):
    B = assemble_B(FeSpace(lshape, 2), benchmark_data)
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.standard_normal(B.shape[0])
        assert x @ (B @ x) > 0


def test_A_positive_definite(lshape_chain):
    A = assemble_A(FeSpace(lshape_chain[1], 2), 1.0).toarray()
    assert np.linalg.eigvalsh(A).min() > 0


def _p2_energy_oracle(space, K, x):
    """Closed-form P2 basis, edge-midpoint rule (exact for the quadratic integrand)."""
    mesh = space.mesh
    coords = {}
    for node, xy in enumerate(space.node_coords):
        coords[(round(xy[0], 12), round(xy[1], 12))] = node
    full = space.full_vector(x)
    total = 0.0
    for tri in mesh.elements:
        V = mesh.vertices[tri]
        e1, e2 = V[1] - V[0], V[2] - V[0]
        area = 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
        grads = np.array([[V[(i + 1) % 3][1] - V[(i + 2) % 3][1],
                           V[(i + 2) % 3][0] - V[(i + 1) % 3][0]] for i in range(3)]) / (2 * area)
        vals_v = full[tri]
        mids = {}
        for i in range(3):
            for j in range(i + 1, 3):
                m = 0.5 * (V[i] + V[j])
                mids[(i, j)] = full[coords[(round(m[0], 12), round(m[1], 12))]]
        for i in range(3):
            for j in range(i + 1, 3):
                lam = np.zeros(3)
                lam[i] = lam[j] = 0.5
                g = sum(vals_v[k] * (4 * lam[k] - 1) * grads[k] for k in range(3))
                for (a, b), val in mids.items():
                    g = g + val * 4 * (lam[a] * grads[b] + lam[b] * grads[a])
                total += area / 3 * g @ K @ g
    return total


def test_energy_norm_against_independent_quadrature(lshape_chain):
    K = np.array([[2.0, 0.3], [0.3, 1.0]])
    space = FeSpace(lshape_chain[1], 2)
    A = assemble_A(space, K)
    x = np.random.default_rng(4).standard_normal(space.N)
    assert x @ (A @ x) == pytest.approx(_p2_energy_oracle(space, K, x), rel=1e-12)


def test_rhs_examples(lshape_chain):
    mesh = lshape_chain[1]
    space = FeSpace(mesh, 1)
    assert not assemble_rhs(space, PdeData()).any()
    d = assemble_rhs(space, PdeData(source=1.0))
    expect = np.zeros(mesh.n_vertices)
    for tri, area in zip(mesh.elements, mesh.areas):
        expect[tri] += area / 3
    np.testing.assert_allclose(d, expect[space.dof_nodes], rtol=1e-13)
    fv = np.array([0.7, -1.3])
    d = assemble_rhs(space, PdeData(source_vec=fv))
    expect = np.zeros(mesh.n_vertices)
    for tri, area in zip(mesh.elements, mesh.areas):
        V = mesh.vertices[tri]
        for i in range(3):
            a, b = V[(i + 1) % 3], V[(i + 2) % 3]
            grad = np.array([a[1] - b[1], b[0] - a[0]]) / (2 * area)
            expect[tri[i]] += area * fv @ grad
    np.testing.assert_allclose(d, expect[space.dof_nodes], rtol=1e-12, atol=1e-15)


def test_pde_data_validation():
    with pytest.raises(ValueError):
        PdeData(diffusion=np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        PdeData(diffusion=-1.0)
    with pytest.raises(ValueError):
        PdeData(reaction=-0.5)
    with pytest.raises(ValueError):
        PdeData(source_vec=lambda x, e: x)
    d = PdeData(diffusion=lambda x, e: np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)))
    d.check(np.zeros((3, 2)), np.zeros(3, dtype=int))


def test_callable_coefficients_match_constants(lshape_chain):
    space = FeSpace(lshape_chain[1], 3)
    K = np.array([[1.5, 0.2], [0.2, 0.8]])
    const = PdeData(diffusion=K, convection=(1.0, -2.0), reaction=0.5, source=2.0)
    field = PdeData(
        diffusion=lambda x, e: np.broadcast_to(K, x.shape[:-1] + (2, 2)),
        convection=lambda x, e: np.broadcast_to([1.0, -2.0], x.shape),
        reaction=lambda x, e: np.full(x.shape[:-1], 0.5),
        source=lambda x, e: np.full(x.shape[:-1], 2.0),
    )
    np.testing.assert_allclose(assemble_B(space, field).toarray(), assemble_B(space, const).toarray(),
                               atol=1e-14)
    np.testing.assert_allclose(assemble_rhs(space, field), assemble_rhs(space, const), atol=1e-15)


def _manufactured():
    K = np.array([[2.0, 0.5], [0.5, 1.0]])
    b, c = (1.0, 3.0), 2.0

    def u(x):
        return x[..., 0] * (1 - x[..., 0]) * x[..., 1] * (1 - x[..., 1])

    def f(x, e=None):
        X, Y = x[..., 0], x[..., 1]
        ux, uy = (1 - 2 * X) * Y * (1 - Y), (1 - 2 * Y) * X * (1 - X)
        uxx, uyy, uxy = -2 * Y * (1 - Y), -2 * X * (1 - X), (1 - 2 * X) * (1 - 2 * Y)
        return -(K[0, 0] * uxx + 2 * K[0, 1] * uxy + K[1, 1] * uyy) + b[0] * ux + b[1] * uy + c * u(x)

    return u, PdeData(diffusion=K, convection=b, reaction=c, source=f)


@pytest.mark.parametrize("p", [4])
def test_polynomial_solution_reproduced(p):
    u, data = _manufactured()
    space = FeSpace(meshmod.unit_square(3), p)
    x = galerkin_solve_direct(assemble_B(space, data), assemble_rhs(space, data))
    np.testing.assert_allclose(x, u(space.node_coords[space.dof_nodes]), atol=1e-13)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_convergence_order(p):
    """L2 error at random points decays like h^(p+1) under uniform refinement."""
    K = np.eye(2)

    def u(x):
        return np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])

    data = PdeData(diffusion=K, convection=(1.0, 2.0),
                   source=lambda x, e: 2 * np.pi ** 2 * u(x)
                   + np.pi * np.cos(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
                   + 2 * np.pi * np.sin(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1]))
    pts = np.random.default_rng(0).random((200, 2))
    errs, hs = [], []
    mesh = meshmod.unit_square(2)
    for _ in range(3):
        space = FeSpace(mesh, p)
        x = galerkin_solve_direct(assemble_B(space, data), assemble_rhs(space, data))
        errs.append(np.sqrt(np.mean((point_values(space, x, pts) - u(pts)) ** 2)))
        hs.append(mesh.diameters.max())
        mesh = meshmod.refine(mesh, np.arange(mesh.n_elements))
    rate = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert rate > p + 1 - 0.4


def test_galerkin_solve_direct_examples(lshape, benchmark_data):
    d = np.arange(3.0)
    np.testing.assert_array_equal(galerkin_solve_direct(SparseOperator.identity(3), d), d)
    assert galerkin_solve_direct(SparseOperator(np.array([[2.0]])), np.array([4.0]))[0] == 2.0
    space = FeSpace(lshape, 1)
    B, d = assemble_B(space, benchmark_data), assemble_rhs(space, benchmark_data)
    x = galerkin_solve_direct(B, d)
    assert np.linalg.norm(B @ x - d) <= 1e-10 * np.linalg.norm(d)
    assert np.abs(B @ x - d).max() <= 1e-9 * np.linalg.norm(d)
    with pytest.raises(np.linalg.LinAlgError):
        galerkin_solve_direct(SparseOperator(np.zeros((2, 2))), np.ones(2))


def test_prolongation_identity(lshape):
    space = FeSpace(lshape, 2)
    P = prolongation(space, space)
    np.testing.assert_array_equal(P.toarray(), np.eye(space.N))


@given(seed=st.integers(0, 10**6), pc=st.integers(1, 3), extra=st.integers(0, 1))
@settings(max_examples=15)
def test_prolongation_preserves_functions(seed, pc, extra, lshape_chain):
    rng = np.random.default_rng(seed)
    i = int(rng.integers(0, len(lshape_chain) - 1))
    j = int(rng.integers(i, len(lshape_chain)))
    coarse = FeSpace(lshape_chain[i], pc)
    fine = FeSpace(lshape_chain[j], pc + extra)
    x = rng.standard_normal(coarse.N)
    y = prolongation(coarse, fine) @ x
    pts = np.array([[-0.9, 0.9]]) + rng.random((50, 2)) * np.array([1.8, -1.8])
    pts = pts[~((pts[:, 0] > 0) & (pts[:, 1] < 0))]
    np.testing.assert_allclose(point_values(fine, y, pts), point_values(coarse, x, pts), atol=1e-12)


def test_p1_into_p2_nodal_identity(lshape_chain):
    mesh = lshape_chain[1]
    c, f = FeSpace(mesh, 1), FeSpace(mesh, 2)
    x = np.random.default_rng(5).standard_normal(c.N)
    y = f.full_vector(prolongation(c, f) @ x)
    xf = c.full_vector(x)
    np.testing.assert_allclose(y[:mesh.n_vertices], xf, atol=1e-15)
    edge_nodes = mesh.n_vertices + np.arange(mesh.n_edges)
    np.testing.assert_allclose(y[edge_nodes], xf[mesh.edges].mean(axis=1), atol=1e-15)


def test_prolongation_requires_nesting(lshape):
    a = FeSpace(meshmod.refine(lshape, [0]), 1)
    b = FeSpace(meshmod.refine(lshape, [1]), 1)
    with pytest.raises(meshmod.MeshError):
        prolongation(a, b)
    with pytest.raises(ValueError):
        prolongation(FeSpace(lshape, 2), FeSpace(lshape, 1))


def test_degenerate_element_rejected():
    with pytest.raises(meshmod.MeshError):
        meshmod.Triangulation(np.array([[0.0, 0], [1, 0], [2, 0]]), np.array([[0, 1, 2]]))


def test_chain_helper_is_nested(lshape):
    chain = refine_chain(lshape, 2)
    assert chain[2].ancestors(chain[0]).max() < lshape.n_elements
