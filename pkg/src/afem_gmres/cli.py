"""Command-line experiment driver.

Subcommands
-----------
run           adaptive run; writes ``history.csv`` and ``mesh_<ell>.txt``
solver-study  PGMRES on the finest of a stored mesh hierarchy
rates         rate and complexity diagnostics of a ``history.csv``

Parameters come from built-in defaults, then an optional ``--config`` file
of ``key=value`` lines, then command-line flags (flags win).  Log verbosity
is read from ``AFEM_GMRES_LOG``.
"""
import argparse
import csv
import logging
import os
import re
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import adaptive, mesh as meshmod
from .fespace import PdeData, assemble_B, assemble_rhs
from .gmres import GmresError, contraction_factors, pgmres
from .precond import Hierarchy, Preconditioner

log = logging.getLogger("afem_gmres")

LOG_ENV = "AFEM_GMRES_LOG"

EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_DATA = 4

SOLVER_COLUMNS = ("k", "K", "R", "res_norm", "ratio")
RATES_COLUMNS = ("s", "M_dof", "M_cost", "slope_dof", "slope_cost", "slope_wall")

_PARAM_KEYS = {f.name for f in fields(adaptive.AdaptiveParams)}
_PROBLEM_KEYS = {"diffusion", "convection", "reaction", "source"}
_RUN_KEYS = {"mesh_file", "out", "snapshot_every", "wall_time", "problem"}

# the L-shape benchmark
LSHAPE = {"diffusion": "1", "convection": "1,25", "reaction": "0", "source": "1"}


class ConfigError(ValueError):
    """Invalid configuration or command line."""


def read_config(path):
    """Parse ``key=value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, val = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _PARAM_KEYS | _PROBLEM_KEYS | _RUN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = val
    return out


def _floats(text, name):
    try:
        return [float(t) for t in str(text).replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{name}: expected numbers, got {text!r}") from None


def pde_data(opts):
    """Constant-coefficient :class:`PdeData` from option strings (L-shape defaults)."""
    vals = {k: opts.get(k) if opts.get(k) is not None else LSHAPE[k] for k in LSHAPE}
    K = _floats(vals["diffusion"], "diffusion")
    if len(K) == 1:
        K = K[0]
    elif len(K) == 4:
        K = np.array(K).reshape(2, 2)
    else:
        raise ConfigError("diffusion: give 1 or 4 numbers")
    b = _floats(vals["convection"], "convection")
    if len(b) != 2:
        raise ConfigError("convection: give 2 numbers")
    c = _floats(vals["reaction"], "reaction")
    f = _floats(vals["source"], "source")
    if len(c) != 1 or len(f) != 1:
        raise ConfigError("reaction and source take one number each")
    try:
        return PdeData(diffusion=K, convection=tuple(b), reaction=c[0], source=f[0])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _merge(args, names):
    """Config file values overridden by flags that were given."""
    opts = read_config(args.config) if getattr(args, "config", None) else {}
    for name in names:
        val = getattr(args, name, None)
        if val is not None:
            opts[name] = val
    return opts


def adaptive_params(opts):
    kw = {}
    for f in fields(adaptive.AdaptiveParams):
        if opts.get(f.name) is None:
            continue
        raw = opts[f.name]
        try:
            if f.name == "preconditioner":
                kw[f.name] = str(raw).lower()
            elif f.name in ("kmax", "max_dof", "max_levels", "p", "max_iter"):
                kw[f.name] = int(float(raw))
                if kw[f.name] != float(raw):
                    raise ValueError
            else:
                kw[f.name] = float(raw)
        except ValueError:
            raise ConfigError(f"{f.name}: invalid value {raw!r}") from None
    try:
        return adaptive.AdaptiveParams(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _as_bool(val):
    if isinstance(val, bool):
        return val
    s = str(val).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"expected a boolean, got {val!r}")


def _out_dir(path):
    if path is None:
        raise ConfigError("--out is required")
    out = Path(path)
    if not out.is_dir():
        raise ConfigError(f"output directory {out} does not exist")
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


class _Staging:
    """Files are written to a hidden directory and moved into place on success."""

    def __init__(self, out):
        self.out = out
        self.dir = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))

    def path(self, name):
        return self.dir / name

    def commit(self):
        for f in sorted(self.dir.iterdir()):
            os.replace(f, self.out / f.name)
        self.dir.rmdir()

    def discard(self):
        shutil.rmtree(self.dir, ignore_errors=True)


def cmd_run(args):
    opts = _merge(args, _PARAM_KEYS | _PROBLEM_KEYS | _RUN_KEYS)
    params = adaptive_params(opts)
    data = pde_data(opts)
    out = _out_dir(opts.get("out"))
    every = opts.get("snapshot_every")
    try:
        every = 1 if every is None else int(every)
    except ValueError:
        raise ConfigError(f"snapshot_every: invalid value {every!r}") from None
    if every < 0:
        raise ConfigError("snapshot_every must be nonnegative")
    wall = _as_bool(opts.get("wall_time", False))
    problem = opts.get("problem") or "lshape"
    if opts.get("mesh_file"):
        try:
            mesh0 = meshmod.read_mesh(opts["mesh_file"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read mesh {opts['mesh_file']}: {exc}") from None
    elif problem == "lshape":
        mesh0 = meshmod.initial_mesh_lshape()
    else:
        raise ConfigError(f"unknown problem {problem!r}")

    stage = _Staging(out)

    def snapshot(ell, mesh, space, x, est):
        if every and ell % every == 0:
            meshmod.write_mesh(stage.path(f"mesh_{ell}.txt"), mesh)

    try:
        hist = adaptive.afem_run(mesh0, data, params, on_level=snapshot)
        adaptive.write_history(stage.path("history.csv"), hist, wall_time=wall)
    except BaseException:
        stage.discard()
        raise
    stage.commit()
    last = hist.records[-1]
    print(f"status={hist.status} levels={len(hist.levels)} n_elem={last.n_elem} "
          f"n_dof={last.n_dof} H={last.H:.6e} triggers={hist.triggers}")
    return 0


def load_hierarchy(directory, levels=None):
    """Read ``mesh_<ell>.txt`` files and relink them into consecutive refinements."""
    directory = Path(directory)
    found = {}
    for f in directory.glob("mesh_*.txt"):
        m = re.fullmatch(r"mesh_(\d+)\.txt", f.name)
        if m:
            found[int(m.group(1))] = f
    if not found:
        raise FileNotFoundError(f"no mesh_<ell>.txt files in {directory}")
    ells = sorted(found)
    if ells != list(range(len(ells))):
        raise meshmod.MeshError("mesh snapshots must cover levels 0, 1, 2, ... without gaps")
    if levels is not None:
        ells = ells[:levels + 1]
    meshes = [meshmod.read_mesh(found[0])]
    for ell in ells[1:]:
        meshes.append(meshmod.relink(meshes[-1], meshmod.read_mesh(found[ell])))
    return meshes


def solver_study(meshes, data, p, kmax, variant="as", rtol=1e-5, max_iter=100_000):
    """PGMRES from a zero guess on the finest mesh; returns the :class:`GmresResult`."""
    h = Hierarchy(data, p)
    for m in meshes:
        h.push(m)
    space = h.top["space"]
    B = assemble_B(space, data)
    d = assemble_rhs(space, data)
    P = Preconditioner(h, variant)
    x0 = np.zeros(space.N)
    r0 = P.apply(d)
    s0 = float(np.sqrt(max(np.dot(r0, d), 0.0)))
    return pgmres(B, P, d, x0, rtol * s0, kmax, max_iter=max_iter)


def write_solver_csv(path, res):
    ratios, _ = (contraction_factors(res.history) if len(res.history) > 1
                 else (np.zeros(0), None))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SOLVER_COLUMNS)
        w.writerow([0, 0, 0, repr(float(res.history[0])), ""])
        for i in range(1, len(res.history)):
            w.writerow([i, res.K[i - 1], res.R[i - 1], repr(float(res.history[i])),
                        repr(float(ratios[i - 1]))])


def _study_job(job):
    directory, levels, opts, p, kmax, variant, rtol, target = job
    meshes = load_hierarchy(directory, levels)
    res = solver_study(meshes, pde_data(opts), p, kmax, variant, rtol)
    write_solver_csv(target, res)
    ratios = contraction_factors(res.history)[0] if res.k else np.zeros(0)
    return p, kmax, meshes[-1].n_elements, res.k, float(ratios.max()) if ratios.size else 0.0


def cmd_solver_study(args):
    opts = _merge(args, _PROBLEM_KEYS | {"out"})
    out = _out_dir(opts.get("out"))
    pde_data(opts)  # validate before any work
    directory = Path(args.hierarchy)
    if not directory.is_dir():
        raise FileNotFoundError(f"hierarchy directory {directory} does not exist")
    load_hierarchy(directory, args.levels)  # fail early on missing or broken files
    stage = _Staging(out)
    jobs = [(directory, args.levels, opts, p, k, args.preconditioner, args.rtol,
             stage.path(f"solver_p{p}_kmax{k}.csv"))
            for p in args.p for k in args.kmax]
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_study_job, jobs))
        else:
            results = [_study_job(j) for j in jobs]
    except BaseException:
        stage.discard()
        raise
    stage.commit()
    for p, kmax, n_elem, k, rmax in results:
        print(f"p={p} kmax={kmax} n_elem={n_elem} iterations={k} max_ratio={rmax:.4f}")
    return 0


def cmd_rates(args):
    try:
        recs = adaptive.read_history(args.history)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.history}: {exc.strerror}") from None
    rows = []
    for s in args.s:
        if not s > 0:
            raise ConfigError("rates s must be positive")
        M_dof, M_cost, slopes = adaptive.rate_diagnostics(recs, s, decade=args.decade)
        rows.append((s, M_dof, M_cost, slopes["dof"], slopes["cost"], slopes["wall"]))
        print(f"s={s:g} M_dof={M_dof:.6e} M_cost={M_cost:.6e} slope_dof={slopes['dof']:.4f} "
              f"slope_cost={slopes['cost']:.4f} slope_wall={slopes['wall']:.4f}")
    out = Path(args.out) if args.out else Path(args.history).parent
    out = _out_dir(out)
    with open(out / "rates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RATES_COLUMNS)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
    return 0


def _add_problem_flags(ap):
    g = ap.add_argument_group("problem (constant coefficients; defaults: L-shape benchmark)")
    g.add_argument("--diffusion", help="K as one number or four (row-major)")
    g.add_argument("--convection", help="b as two numbers, e.g. 1,25")
    g.add_argument("--reaction", help="c")
    g.add_argument("--source", help="f")


def build_parser():
    ap = argparse.ArgumentParser(prog="afem-gmres", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="adaptive run")
    run.add_argument("--config", help="key=value file; flags override it")
    run.add_argument("--theta", type=float)
    run.add_argument("--c-mark", dest="c_mark", type=float)
    run.add_argument("--c-alg", dest="c_alg", type=float)
    run.add_argument("--lambda-alg", dest="lambda_alg", type=float)
    run.add_argument("--kmax", type=int)
    run.add_argument("--tau", type=float)
    run.add_argument("--p", type=int)
    run.add_argument("--max-dof", dest="max_dof", type=int)
    run.add_argument("--max-levels", dest="max_levels", type=int)
    run.add_argument("--max-iter", dest="max_iter", type=int)
    run.add_argument("--preconditioner", choices=("as", "smg"))
    run.add_argument("--problem", choices=("lshape",))
    run.add_argument("--mesh-file", dest="mesh_file")
    run.add_argument("--out")
    run.add_argument("--snapshot-every", dest="snapshot_every", type=int,
                     help="write mesh_<ell>.txt every n levels (0: never; default 1)")
    run.add_argument("--wall-time", dest="wall_time", action="store_const", const=True,
                     help="fill the wall_ms column (makes the CSV run-dependent)")
    _add_problem_flags(run)
    run.set_defaults(func=cmd_run)

    st = sub.add_parser("solver-study", help="PGMRES on a stored mesh hierarchy")
    st.add_argument("--hierarchy", required=True, help="directory with mesh_<ell>.txt files")
    st.add_argument("--levels", type=int, help="use meshes 0..levels only")
    st.add_argument("--p", type=int, nargs="+", default=[1, 2, 3])
    st.add_argument("--kmax", type=int, nargs="+", default=[1, 5, 300])
    st.add_argument("--preconditioner", choices=("as", "smg"), default="as")
    st.add_argument("--rtol", type=float, default=1e-5)
    st.add_argument("--jobs", type=int, default=1, help="concurrent (p, kmax) cases")
    st.add_argument("--config")
    st.add_argument("--out")
    _add_problem_flags(st)
    st.set_defaults(func=cmd_solver_study)

    ra = sub.add_parser("rates", help="rate diagnostics of a history CSV")
    ra.add_argument("history")
    ra.add_argument("--s", type=float, nargs="+", default=[1.0])
    ra.add_argument("--decade", type=float, default=10.0,
                    help="fit slopes over N >= N_max / decade")
    ra.add_argument("--out", help="directory for rates.csv (default: next to the history)")
    ra.set_defaults(func=cmd_rates)
    return ap


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"afem-gmres: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GmresError as exc:
        print(f"afem-gmres: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ValueError) as exc:
        print(f"afem-gmres: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
