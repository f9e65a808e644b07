"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--levels 12] [--repeat 5]

Inputs come from an adaptive L-shape hierarchy so the sizes are those seen
in practice.  Both backends are checked for identical output first.
"""
import argparse
import time

import numpy as np

from afem_gmres import kernels, mesh as meshmod
from afem_gmres.adaptive import AdaptiveParams, afem_run
from afem_gmres.fespace import FeSpace, PdeData, assemble_A
from afem_gmres.precond import PatchSmoother


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--levels", type=int, default=12)
    ap.add_argument("--p", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if "cython" not in kernels.BACKENDS:
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")
    py, cy = kernels.get_backend("python"), kernels.get_backend("cython")

    data = PdeData(convection=(1.0, 25.0), source=1.0)
    hist = afem_run(meshmod.initial_mesh_lshape(), data,
                    AdaptiveParams(p=args.p, max_levels=args.levels, max_dof=10**9))
    mesh = hist.mesh
    space = FeSpace(mesh, args.p)
    smoother = PatchSmoother(space, assemble_A(space, data))
    r = np.random.default_rng(0).standard_normal(space.N)
    eta = np.random.default_rng(1).random(mesh.n_elements) ** 4
    rng = np.random.default_rng(2)
    marked = rng.random(mesh.n_edges) < 0.05

    def patches(mod):
        out = np.zeros(space.N)
        for idx, inv in smoother.groups:
            mod.patch_apply(r, idx, inv, out)
        return out

    cases = {
        "patch_apply": patches,
        "nvb_closure": lambda mod: mod.nvb_closure(mesh.elem_edges, mesh.edge_elements,
                                                   marked.copy()),
        "minimal_bulk": lambda mod: np.asarray(mod.minimal_bulk(eta, 0.5 * eta.sum(),
                                                                1e-13 * eta.sum())),
    }
    print(f"mesh: {mesh.n_elements} elements, {mesh.n_edges} edges, N = {space.N} (p={args.p})")
    print(f"{'kernel':<14}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for name, fn in cases.items():
        a, b = fn(py), fn(cy)
        if name == "patch_apply":
            assert np.allclose(a, b, rtol=1e-12, atol=1e-14), name
        else:
            assert np.array_equal(a, b), name
        tp = best_of(lambda: fn(py), args.repeat)
        tc = best_of(lambda: fn(cy), args.repeat)
        print(f"{name:<14}{1e3 * tp:>12.3f}{1e3 * tc:>13.3f}{tp / tc:>9.1f}")


if __name__ == "__main__":
    main()
