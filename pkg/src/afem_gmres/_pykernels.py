"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors them loop for
loop and must return identical results (up to summation order inside a
patch).
"""
import numpy as np

_SMALL = 32


def patch_apply(r, idx, inv, out):
    """Accumulate ``sum_p I_p inv_p I_p^T r`` into ``out`` for one size group.

    ``idx`` has shape (m, n) and holds the global DOFs of each patch,
    ``inv`` has shape (m, n, n).
    """
    if idx.shape[0] == 0:
        return out
    local = np.einsum("mij,mj->mi", inv, r[idx])
    out += np.bincount(idx.ravel(), weights=local.ravel(), minlength=out.shape[0])
    return out


def nvb_closure(elem_edges, edge_elements, edge_mark):
    """Close a set of marked edges under the NVB rule.

    Any element with a marked edge gets its reference edge (local edge 0)
    marked as well.  ``edge_mark`` is updated in place and returned.
    """
    ref = elem_edges[:, 0]
    while True:
        touched = edge_mark[elem_edges[:, 1]] | edge_mark[elem_edges[:, 2]]
        need = touched & ~edge_mark[ref]
        if not need.any():
            return edge_mark
        edge_mark[ref[need]] = True


def _take_prefix(order, values, remaining, slack):
    csum = np.cumsum(values[order])
    hit = np.flatnonzero(csum >= remaining - slack)
    if hit.size == 0:
        return order, remaining - (csum[-1] if csum.size else 0.0)
    return order[: hit[0] + 1], 0.0


def minimal_bulk(values, target, slack):
    """Smallest index set whose values sum to at least ``target``.

    Elements are taken in the strict total order "larger value first, then
    smaller index", so the answer is unique.  Expected linear cost via
    repeated median partitioning.
    """
    idx = np.flatnonzero(values > 0)
    chosen = []
    remaining = float(target)
    if remaining <= slack:
        return np.empty(0, dtype=np.int64)
    while idx.size:
        vals = values[idx]
        if idx.size <= _SMALL:
            order = idx[np.lexsort((idx, -vals))]
            part, remaining = _take_prefix(order, values, remaining, slack)
            chosen.append(part)
            break
        mid = idx.size // 2
        pivot = np.partition(vals, mid)[mid]
        upper = idx[vals > pivot]
        su = values[upper].sum()
        if su >= remaining - slack:
            idx = upper
            continue
        chosen.append(upper)
        remaining -= su
        equal = idx[vals == pivot]
        part, remaining = _take_prefix(equal, values, remaining, slack)
        chosen.append(part)
        if remaining <= 0.0:
            break
        idx = idx[vals < pivot]
    if not chosen:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(chosen)).astype(np.int64)
