"""Adaptive loop with PGMRES, a-posteriori parameter control and cost bookkeeping.

Each level ``ell`` runs PGMRES from the prolonged previous solution and
stops at the first iterate with ``||s^k|| <= lambda_alg * eta(u^k)``.  The
quasi-error ``H = eta + ||s||`` of the final iterate drives termination and
the parameter control: ``S`` accumulates ``1 / H`` and, whenever
``S > C_alg / H`` on a level ``ell >= 1``, ``C_alg`` is doubled and
``lambda_alg`` halved.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from .estimator import EstimatorData, estimate
from .fespace import assemble_B, assemble_rhs, prolongation
from .gmres import pgmres
from .mesh import refine
from .precond import Hierarchy, Preconditioner

log = logging.getLogger(__name__)

__all__ = [
    "HISTORY_COLUMNS",
    "AdaptiveParams",
    "StepRecord",
    "LevelSummary",
    "RunHistory",
    "dorfler_mark",
    "parameter_control",
    "afem_run",
    "cumulative_cost",
    "rate_diagnostics",
    "loglog_slope",
    "theta_mark",
    "tail_summability_constant",
    "inverse_summability_constant",
    "r_linear_fit",
    "write_history",
    "read_history",
]

HISTORY_COLUMNS = ("ell", "k", "K", "R", "n_elem", "n_dof", "eta", "res_norm", "H",
                   "cost", "wall_ms", "C_alg", "lambda_alg")

BULK_SLACK = 1e-13


@dataclass
class AdaptiveParams:
    """Inputs of the adaptive loop.

    ``max_dof`` stops the run after the first level with at least that many
    DOFs; ``max_levels`` caps the number of solved levels.
    """

    theta: float = 0.5
    c_mark: float = 1.0
    c_alg: float = 1.0
    lambda_alg: float = 0.25
    kmax: int = 5
    tau: float = 0.0
    max_dof: int = 10_000
    max_levels: int | None = None
    preconditioner: str = "as"
    p: int = 2
    max_iter: int = 100_000

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if not self.c_mark >= 1.0:
            raise ValueError("c_mark must be at least 1")
        if not (self.c_alg > 0 and self.lambda_alg > 0):
            raise ValueError("c_alg and lambda_alg must be positive")
        if int(self.kmax) != self.kmax or self.kmax < 1:
            raise ValueError("kmax must be a positive integer")
        if not self.tau >= 0:
            raise ValueError("tau must be nonnegative")
        if self.max_dof < 0:
            raise ValueError("max_dof must be nonnegative")
        if self.max_levels is not None and self.max_levels < 1:
            raise ValueError("max_levels must be at least 1")
        if self.preconditioner.lower() not in ("as", "smg"):
            raise ValueError("preconditioner must be 'as' or 'smg'")
        if self.p not in (1, 2, 3, 4):
            raise ValueError("p must be in 1..4")
        return self


@dataclass(frozen=True)
class StepRecord:
    ell: int
    k: int
    K: int
    R: int
    n_elem: int
    n_dof: int
    eta: float
    res_norm: float
    H: float
    cost: int
    wall_ms: float
    C_alg: float
    lambda_alg: float


@dataclass(frozen=True)
class LevelSummary:
    ell: int
    n_elem: int
    n_dof: int
    k_final: int
    eta: float
    res_norm: float
    H: float
    n_marked: int
    triggered: bool


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    status: str = "running"
    triggers: int = 0
    mesh: object = None
    space: object = None
    x: np.ndarray = None

    def final_records(self):
        """The last record of every level (the iterates u_ell^{k_final})."""
        last = {}
        for rec in self.records:
            last[rec.ell] = rec
        return [last[e] for e in sorted(last)]

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])


def dorfler_mark(data, theta, c_mark=1.0):
    """Element set carrying at least ``theta`` of the squared estimator.

    ``c_mark < 2`` gives a set of minimal cardinality (elements ranked by
    indicator, ties to the smaller index); ``c_mark >= 2`` uses dyadic
    binning, which is linear and at most twice the minimum.  Returns sorted
    element indices.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    if c_mark < 1.0:
        raise ValueError("c_mark must be at least 1")
    values = data.indicators if isinstance(data, EstimatorData) else np.asarray(data, float)
    values = np.ascontiguousarray(values, dtype=float)
    if (values < 0).any() or not np.isfinite(values).all():
        raise ValueError("indicators must be finite and nonnegative")
    total = float(values.sum())
    if total == 0.0:
        return np.zeros(0, dtype=np.int64)
    if theta == 1.0:
        return np.flatnonzero(values > 0)
    target = theta * total
    slack = BULK_SLACK * total
    if c_mark < 2.0:
        return np.asarray(kernels.minimal_bulk(values, target, slack), dtype=np.int64)
    return _binned_bulk(values, target, slack)


def _binned_bulk(values, target, slack):
    idx = np.flatnonzero(values > 0)
    v = values[idx]
    _, expo = np.frexp(v)  # v in [2^(e-1), 2^e)
    order = np.lexsort((idx, -expo))
    csum = np.cumsum(v[order])
    # whole bins first, then the crossing bin in index order
    bins, starts = np.unique(-expo[order], return_index=True)
    ends = np.append(starts[1:], order.size)
    taken = []
    acc = 0.0
    for s, e in zip(starts, ends):
        bin_sum = csum[e - 1] - (csum[s - 1] if s else 0.0)
        if acc + bin_sum < target - slack:
            taken.append(order[s:e])
            acc += bin_sum
            continue
        part = np.cumsum(v[order[s:e]])
        n = int(np.searchsorted(part, target - slack - acc)) + 1
        taken.append(order[s:s + n])
        break
    return np.sort(idx[np.concatenate(taken)])


def parameter_control(S, c_alg, lambda_alg, ell, H):
    """One update of ``(S, C_alg, lambda_alg)``; returns ``(S', C', lambda', triggered)``."""
    if not H > 0:
        raise ValueError("quasi-error must be positive")
    triggered = bool(ell >= 1 and S > c_alg / H)
    if triggered:
        c_alg, lambda_alg = 2.0 * c_alg, 0.5 * lambda_alg
    return S + 1.0 / H, c_alg, lambda_alg, triggered


def afem_run(mesh0, data, params, on_level=None, clock=time.perf_counter):
    """Run the adaptive loop from ``mesh0``.

    ``on_level(ell, mesh, space, x, est)`` is called after each solve.
    Returns a :class:`RunHistory` whose status is ``"tau"``, ``"exact"``
    (quasi-error zero) or ``"budget"``.
    """
    params.validate()
    p = params.p
    start = clock()
    hierarchy = Hierarchy(data, p)
    mesh = mesh0
    hist = RunHistory()
    S, c_alg, lam = 0.0, float(params.c_alg), float(params.lambda_alg)
    cost = 0
    x0 = None
    prev_space = None
    ell = 0
    while True:
        hierarchy.push(mesh)
        space = hierarchy.top["space"]
        if x0 is None:
            x0 = np.zeros(space.N)
        else:
            x0 = prolongation(prev_space, space) @ x0
        B = assemble_B(space, data)
        d = assemble_rhs(space, data)
        P = Preconditioner(hierarchy, params.preconditioner)
        last = {}

        def stop(x, _space=space, _lam=lam):
            est = estimate(_space, data, x)
            last["est"] = est
            return _lam * est.eta

        def record(k, x, nrm, _ell=ell, _space=space, _lam=lam, _c=c_alg):
            nonlocal cost
            cost += _space.mesh.n_elements
            eta = last["est"].eta
            K = 0 if k == 0 else (k - 1) % params.kmax + 1
            hist.records.append(StepRecord(
                ell=_ell, k=k, K=K, R=k // params.kmax, n_elem=_space.mesh.n_elements,
                n_dof=int(_space.N), eta=float(eta), res_norm=float(nrm), H=float(eta) + float(nrm),
                cost=int(cost), wall_ms=1e3 * (clock() - start), C_alg=float(_c),
                lambda_alg=float(_lam)))

        res = pgmres(B, P, d, x0, stop, params.kmax, max_iter=params.max_iter, callback=record)
        est = last["est"]
        x = res.x
        rec = hist.records[-1]
        H = rec.H
        log.info("level %d: #T=%d N=%d k=%d eta=%.3e |s|=%.3e", ell, mesh.n_elements,
                 space.N, res.k, rec.eta, rec.res_norm)
        if on_level is not None:
            on_level(ell, mesh, space, x, est)
        hist.mesh, hist.space, hist.x = mesh, space, x

        def summary(n_marked, triggered):
            hist.levels.append(LevelSummary(ell, int(mesh.n_elements), int(space.N), int(res.k),
                                            rec.eta, rec.res_norm, H, int(n_marked),
                                            bool(triggered)))

        if H <= params.tau or H == 0.0:
            hist.status = "exact" if H == 0.0 else "tau"
            summary(0, False)
            break
        S, c_alg, lam, triggered = parameter_control(S, c_alg, lam, ell, H)
        hist.triggers += int(triggered)
        if space.N >= params.max_dof or (params.max_levels is not None
                                         and ell + 1 >= params.max_levels):
            hist.status = "budget"
            summary(0, triggered)
            break
        marked = dorfler_mark(est, params.theta, params.c_mark)
        summary(marked.size, triggered)
        mesh = refine(mesh, marked)
        x0, prev_space = x, space
        ell += 1
    return hist


def cumulative_cost(history):
    """``cost(ell, k)``: running sum of ``#T_ell'`` over all records up to (ell, k)."""
    recs = history.records if isinstance(history, RunHistory) else history
    if not len(recs):
        raise ValueError("empty history")
    return np.cumsum([r.n_elem for r in recs], dtype=np.int64)


def loglog_slope(x, y):
    """Least-squares slope of log(y) against log(x)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


def rate_diagnostics(history, s, decade=10.0):
    """Suprema ``M(s)`` of ``#T^s H`` and ``cost^s H`` plus fitted slopes.

    ``history`` is a :class:`RunHistory` or a list of :class:`StepRecord`.
    Slopes use the final iterate of each level with ``N`` in the last
    ``decade`` of DOFs.  Returns ``(M_dof, M_cost, slopes)`` where
    ``slopes`` maps ``"dof"``, ``"cost"`` and ``"wall"`` to fitted exponents.
    """
    recs = history.records if isinstance(history, RunHistory) else list(history)
    if not recs:
        raise ValueError("empty history")
    if not s > 0:
        raise ValueError("rate s must be positive")
    n_elem = np.array([r.n_elem for r in recs], float)
    H = np.array([r.H for r in recs], float)
    cost = np.array([r.cost for r in recs], float)
    M_dof = float(np.max(n_elem ** s * H))
    M_cost = float(np.max(cost ** s * H))
    last = {}
    for i, r in enumerate(recs):
        last[r.ell] = i
    fin = np.array(sorted(last.values()))
    N = np.array([recs[i].n_dof for i in fin], float)
    sel = fin[N >= N.max() / decade]
    wall = np.array([r.wall_ms for r in recs], float)
    slopes = {
        "dof": loglog_slope([recs[i].n_dof for i in sel], H[sel]),
        "cost": loglog_slope(cost[sel], H[sel]),
        "wall": loglog_slope(wall[sel], H[sel]) if np.isfinite(wall[sel]).all() else float("nan"),
    }
    return M_dof, M_cost, slopes


def theta_mark(theta, lambda_ratio):
    """``(theta^{1/2} + r)^2 / (1 - r)^2`` for ``r = lambda_alg / lambda_alg_star``."""
    if not 0.0 <= lambda_ratio < 1.0:
        raise ValueError("lambda_ratio must lie in [0, 1)")
    return (math.sqrt(theta) + lambda_ratio) ** 2 / (1.0 - lambda_ratio) ** 2


def tail_summability_constant(a, beta=1.0):
    """Smallest C with ``sum_{l' > l} a_l'^beta <= C a_l^beta`` on a finite sequence."""
    a = np.asarray(a, float) ** beta
    tail = np.cumsum(a[::-1])[::-1] - a
    pos = a > 0
    if (~pos & (tail > 0)).any():
        return float("inf")
    return float(np.max(tail[pos] / a[pos])) if pos.any() else 0.0


def inverse_summability_constant(a, gamma=1.0):
    """Smallest C with ``sum_{l' < l} a_l'^-gamma <= C a_l^-gamma`` on a positive sequence."""
    a = np.asarray(a, float)
    if (a <= 0).any():
        raise ValueError("sequence must be positive")
    inv = a ** -gamma
    head = np.cumsum(inv) - inv
    return float(np.max(head / inv))


def r_linear_fit(a):
    """Fit ``a_n <= C q^n``: q from a log-linear least-squares fit, C the smallest valid constant."""
    a = np.asarray(a, float)
    if (a <= 0).any():
        raise ValueError("sequence must be positive")
    n = np.arange(a.size)
    slope = np.polyfit(n, np.log(a), 1)[0]
    q = float(np.exp(slope))
    C = float(np.max(a / q ** n))
    return C, q


def write_history(path, history, wall_time=False):
    """Write one CSV row per record; ``wall_ms`` stays empty unless ``wall_time``."""
    recs = history.records if isinstance(history, RunHistory) else history
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in recs:
            row = asdict(r)
            out = []
            for name in HISTORY_COLUMNS:
                val = row[name]
                if name == "wall_ms":
                    out.append(f"{val:.3f}" if wall_time else "")
                elif isinstance(val, float):
                    out.append(repr(val))
                else:
                    out.append(str(val))
            w.writerow(out)


def read_history(path):
    """Parse a history CSV back into :class:`StepRecord` objects."""
    types = {f.name: f.type for f in fields(StepRecord)}
    recs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != HISTORY_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(HISTORY_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(HISTORY_COLUMNS)} fields")
            vals = {}
            for name, raw in zip(HISTORY_COLUMNS, row):
                try:
                    if types[name] == "int":
                        vals[name] = int(raw)
                    else:
                        vals[name] = float(raw) if raw != "" else float("nan")
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: bad value {raw!r} for {name}") from None
            recs.append(StepRecord(**vals))
    if not recs:
        raise ValueError(f"{path}: no records")
    return recs
