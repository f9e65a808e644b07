"""Restarted GMRES in the inner product weighted by an SPD preconditioner.

The preconditioner ``P ~ A^{-1}`` is applied on the left and also defines
the inner product ``(x, y)_{P^{-1}}``, so the method minimizes the residual
norm ``||P r||_{P^{-1}} = (P r, r)^{1/2}`` over each Krylov window without
ever forming ``P^{-1}``.  Two bases are kept per window: ``v`` (in the range
of P) and ``vt = P^{-1} v``.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .linalg import HessenbergLS
from .precond import pinner

log = logging.getLogger(__name__)

__all__ = ["GmresError", "GmresResult", "pgmres", "contraction_factors"]

MAX_ITER = 100_000
REORTH = 1e-3
BREAKDOWN = 1e-14


class GmresError(RuntimeError):
    """Iteration cap exceeded or non-finite arithmetic."""


@dataclass
class GmresResult:
    x: np.ndarray
    k: int
    history: list  # ||s^k|| for k = 0..k_final
    K: list = field(default_factory=list)
    R: list = field(default_factory=list)
    ls_residuals: list = field(default_factory=list)
    breakdowns: int = 0
    peak_vectors: int = 0
    orth_errors: list = field(default_factory=list)

    @property
    def res_norm(self):
        return self.history[-1]


def _check(*vals):
    for v in vals:
        if not np.all(np.isfinite(v)):
            raise GmresError("non-finite value encountered in PGMRES")


def pgmres(B, P, d, x0, stop, kmax, max_iter=MAX_ITER, callback=None, min_iter=0,
           check_orth=False):
    """Solve ``B x = d`` until ``||s^k||_{P^{-1}} <= stop(x^k)``.

    Parameters
    ----------
    B : SparseOperator or anything supporting ``B @ x``
    P : preconditioner with ``apply(r)``
    d, x0 : arrays
    stop : callable or float
        Tolerance function Lambda(x) >= 0; a number means a constant.
    kmax : int
        Restart length.
    min_iter : int
        Iterations performed before the stopping rule is consulted; a zero
        initial residual always returns immediately.
    callback : callable, optional
        ``callback(k, x, res_norm)`` after each iterate (including k = 0),
        called after ``stop`` has been evaluated at that iterate.
    check_orth : bool
        Record ``max |(vt_i, v_j) - delta_ij|`` over the active window after
        every iteration in ``orth_errors`` (costs O(K^2 N); testing only).

    Returns
    -------
    GmresResult
        ``k`` is the index of the first iterate meeting the stopping rule
        (0 when the initial guess already does).
    """
    kmax = int(kmax)
    if kmax < 1:
        raise ValueError("kmax must be at least 1")
    d = np.asarray(d, dtype=float)
    x = np.array(x0, dtype=float, copy=True)
    if d.shape != x.shape or d.shape[0] != B.shape[0]:
        raise ValueError("dimension mismatch")
    tol = stop if callable(stop) else (lambda _x, c=float(stop): c)

    r = d - B @ x
    s = P.apply(r)
    nrm = pinner(s, r)
    _check(nrm)
    out = GmresResult(x=x, k=0, history=[nrm])
    t = tol(x)
    if callback:
        callback(0, x, nrm)
    if nrm == 0.0 or (nrm <= t and min_iter <= 0):
        return out

    k = 0
    while True:
        # new window from the current residual
        beta = nrm
        x_start = x
        V = [s / beta]
        Vt = [r / beta]
        ls = HessenbergLS(beta, capacity=min(kmax, 64))
        for K in range(1, kmax + 1):
            k += 1
            wt = B @ V[-1]
            w = P.apply(wt)
            h = np.zeros(K + 1)
            ref = np.sqrt(max(np.dot(wt, w), 0.0))
            for j in range(K):
                h[j] = np.dot(wt, V[j])
                wt -= h[j] * Vt[j]
                w -= h[j] * V[j]
            hn = np.sqrt(max(np.dot(wt, w), 0.0))
            if hn < REORTH * ref:
                for j in range(K):
                    c = np.dot(wt, V[j])
                    h[j] += c
                    wt -= c * Vt[j]
                    w -= c * V[j]
                hn = np.sqrt(max(np.dot(wt, w), 0.0))
            h[K] = hn
            _check(h)
            y, lsres = ls.append(h)
            x = x_start + np.dot(y, V[:K]) if K > 1 else x_start + y[0] * V[0]
            r = d - B @ x
            s = P.apply(r)
            nrm = pinner(s, r)
            _check(x, nrm)
            out.peak_vectors = max(out.peak_vectors, 2 * len(V) + 2)
            out.history.append(nrm)
            out.K.append(K)
            out.R.append(k // kmax)
            out.ls_residuals.append(lsres)
            out.x, out.k = x, k
            t = tol(x)
            if callback:
                callback(k, x, nrm)
            if nrm <= t and k >= min_iter:
                return out
            if k >= max_iter:
                raise GmresError(f"PGMRES did not converge within {max_iter} iterations")
            if hn <= BREAKDOWN * max(ref, np.finfo(float).tiny):
                out.breakdowns += 1
                log.debug("lucky breakdown at k=%d", k)
                break
            if K == kmax:
                break
            V.append(w / hn)
            Vt.append(wt / hn)
            if check_orth:
                G = np.array(Vt) @ np.array(V).T
                out.orth_errors.append(float(np.abs(G - np.eye(len(V))).max()))
        if nrm == 0.0:  # cannot normalize; only reachable with a negative tolerance
            raise GmresError("zero residual does not meet the tolerance")


def contraction_factors(history):
    """Ratios ``||s^k|| / ||s^{k-1}||``; returns ``(ratios, breakdown_flags)``.

    A zero denominator gives ratio 0 with the flag set.
    """
    h = np.asarray(history, dtype=float)
    if h.size < 2:
        raise ValueError("history needs at least two entries")
    prev, cur = h[:-1], h[1:]
    zero = prev == 0.0
    ratios = np.divide(cur, prev, out=np.zeros_like(cur), where=~zero)
    return ratios, zero
