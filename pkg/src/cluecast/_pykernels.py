"""Numpy fallback implementations of the hot query kernels.

Semantics here are the reference; the compiled extension in _ckernels.pyx
must match them exactly (the test suite cross-checks both backends).
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def admissible_actions(
    rel: np.ndarray,
    obj: np.ndarray,
    time: np.ndarray,
    t_lo: int,
    t_hi: int,
    t_prev: int,
    delta: int,
    apply_delta: bool,
    cap: int,
    dedup: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Filter one entity's time-sorted out-edges down to admissible actions.

    Inputs are the (relation, object, time) columns of a single subject's
    facts sorted by (time asc, relation asc, object asc). Keeps facts with
    t_lo <= t <= t_hi and, when apply_delta, |t - t_prev| <= delta. Output
    is ordered (time desc, relation asc, object asc), optionally
    de-duplicated, and truncated to the `cap` most recent (cap <= 0 means
    unlimited).
    """
    i0 = int(np.searchsorted(time, t_lo, side="left"))
    i1 = int(np.searchsorted(time, t_hi + 1, side="left"))
    r = rel[i0:i1]
    o = obj[i0:i1]
    t = time[i0:i1]
    if apply_delta:
        keep = np.abs(t - t_prev) <= delta
        r, o, t = r[keep], o[keep], t[keep]
    if r.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    order = np.lexsort((o, r, -t))
    r, o, t = r[order], o[order], t[order]
    if dedup and r.size > 1:
        keep = np.empty(r.size, dtype=bool)
        keep[0] = True
        keep[1:] = (r[1:] != r[:-1]) | (o[1:] != o[:-1]) | (t[1:] != t[:-1])
        r, o, t = r[keep], o[keep], t[keep]
    if cap > 0 and r.size > cap:
        r, o, t = r[:cap], o[:cap], t[:cap]
    return np.ascontiguousarray(r), np.ascontiguousarray(o), np.ascontiguousarray(t)


def two_hop_exists(
    nbr_ptr: np.ndarray,
    nbr_ids: np.ndarray,
    nbr_tmin: np.ndarray,
    qs: np.ndarray,
    qo: np.ndarray,
    qt: np.ndarray,
) -> np.ndarray:
    """For each query (s, o, t): is there an x with edges s->x and o->x
    both first occurring strictly before t?

    The neighbor structure is CSR over entities: unique neighbor ids sorted
    ascending with the minimum edge time per neighbor. On an
    inverse-augmented graph this is exactly 2-hop reachability s -> x -> o.
    """
    out = np.zeros(qs.shape[0], dtype=bool)
    for k in range(qs.shape[0]):
        s, o, t = int(qs[k]), int(qo[k]), int(qt[k])
        a0, a1 = int(nbr_ptr[s]), int(nbr_ptr[s + 1])
        b0, b1 = int(nbr_ptr[o]), int(nbr_ptr[o + 1])
        if a0 == a1 or b0 == b1:
            continue
        common, ia, ib = np.intersect1d(
            nbr_ids[a0:a1], nbr_ids[b0:b1], assume_unique=True, return_indices=True
        )
        if common.size and np.any((nbr_tmin[a0:a1][ia] < t) & (nbr_tmin[b0:b1][ib] < t)):
            out[k] = True
    return out


def two_hop_exists_delta(
    pair_ptr: np.ndarray,
    pair_nbr: np.ndarray,
    time_ptr: np.ndarray,
    time_vals: np.ndarray,
    qs: np.ndarray,
    qo: np.ndarray,
    qt: np.ndarray,
    delta: int,
) -> np.ndarray:
    """Delta-constrained 2-hop check (exploratory variant, python only).

    pair_ptr[e]..pair_ptr[e+1] indexes pair_nbr (unique neighbors of e,
    ascending); pair slot j owns the edge-time list time_vals[time_ptr[j]:
    time_ptr[j+1]] sorted ascending. A 2-hop path s->x->o counts when both
    hops are before t and their timestamps differ by at most delta.
    """
    out = np.zeros(qs.shape[0], dtype=bool)
    for k in range(qs.shape[0]):
        s, o, t = int(qs[k]), int(qo[k]), int(qt[k])
        ia, ea = int(pair_ptr[s]), int(pair_ptr[s + 1])
        ib, eb = int(pair_ptr[o]), int(pair_ptr[o + 1])
        hit = False
        while ia < ea and ib < eb and not hit:
            xa, xb = pair_nbr[ia], pair_nbr[ib]
            if xa < xb:
                ia += 1
            elif xb < xa:
                ib += 1
            else:
                ts = time_vals[time_ptr[ia] : time_ptr[ia + 1]]
                to = time_vals[time_ptr[ib] : time_ptr[ib + 1]]
                ts = ts[ts < t]
                to = to[to < t]
                for t1 in ts:
                    lo = int(np.searchsorted(to, t1 - delta, side="left"))
                    hi = int(np.searchsorted(to, t1 + delta, side="right"))
                    if lo < hi:
                        hit = True
                        break
                ia += 1
                ib += 1
        out[k] = hit
    return out
