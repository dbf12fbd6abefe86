# cython: language_level=3
"""Compiled versions of the hot query kernels (see _pykernels for the
reference semantics; both backends must agree exactly)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


def admissible_actions(
    cnp.int64_t[::1] rel,
    cnp.int64_t[::1] obj,
    cnp.int64_t[::1] time,
    long t_lo,
    long t_hi,
    long t_prev,
    long delta,
    bint apply_delta,
    long cap,
    bint dedup,
):
    cdef Py_ssize_t n = time.shape[0]
    cdef Py_ssize_t i0, i1, lo, hi, mid, run_start, run_end, i, m
    cdef cnp.int64_t tv, last_r, last_o, last_t

    # binary search for [t_lo, t_hi] within the time-ascending slice
    lo, hi = 0, n
    while lo < hi:
        mid = (lo + hi) // 2
        if time[mid] < t_lo:
            lo = mid + 1
        else:
            hi = mid
    i0 = lo
    lo, hi = i0, n
    while lo < hi:
        mid = (lo + hi) // 2
        if time[mid] <= t_hi:
            lo = mid + 1
        else:
            hi = mid
    i1 = lo

    cdef cnp.ndarray[cnp.int64_t, ndim=1] r_out = np.empty(i1 - i0 if i1 > i0 else 0, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] o_out = np.empty(i1 - i0 if i1 > i0 else 0, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] t_out = np.empty(i1 - i0 if i1 > i0 else 0, dtype=np.int64)
    cdef cnp.int64_t[::1] rv = r_out
    cdef cnp.int64_t[::1] ov = o_out
    cdef cnp.int64_t[::1] tv_out = t_out

    # walk time runs from most recent to oldest; within a run the slice is
    # already (relation asc, object asc), giving (t desc, r asc, o asc)
    m = 0
    last_r = last_o = last_t = -1
    run_end = i1
    while run_end > i0 and (cap <= 0 or m < cap):
        tv = time[run_end - 1]
        run_start = run_end
        while run_start > i0 and time[run_start - 1] == tv:
            run_start -= 1
        if not apply_delta or (tv - t_prev <= delta and t_prev - tv <= delta):
            for i in range(run_start, run_end):
                if cap > 0 and m >= cap:
                    break
                if dedup and m > 0 and rel[i] == last_r and obj[i] == last_o and tv == last_t:
                    continue
                rv[m] = rel[i]
                ov[m] = obj[i]
                tv_out[m] = tv
                last_r = rel[i]
                last_o = obj[i]
                last_t = tv
                m += 1
        run_end = run_start
    return r_out[:m].copy(), o_out[:m].copy(), t_out[:m].copy()


def two_hop_exists(
    cnp.int64_t[::1] nbr_ptr,
    cnp.int64_t[::1] nbr_ids,
    cnp.int64_t[::1] nbr_tmin,
    cnp.int64_t[::1] qs,
    cnp.int64_t[::1] qo,
    cnp.int64_t[::1] qt,
):
    cdef Py_ssize_t nq = qs.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] out = np.zeros(nq, dtype=np.uint8)
    cdef cnp.uint8_t[::1] ov = out
    cdef Py_ssize_t k, ia, ea, ib, eb
    cdef cnp.int64_t s, o, t, xa, xb

    for k in range(nq):
        s = qs[k]
        o = qo[k]
        t = qt[k]
        ia = nbr_ptr[s]
        ea = nbr_ptr[s + 1]
        ib = nbr_ptr[o]
        eb = nbr_ptr[o + 1]
        while ia < ea and ib < eb:
            xa = nbr_ids[ia]
            xb = nbr_ids[ib]
            if xa < xb:
                ia += 1
            elif xb < xa:
                ib += 1
            else:
                if nbr_tmin[ia] < t and nbr_tmin[ib] < t:
                    ov[k] = 1
                    break
                ia += 1
                ib += 1
    return out.astype(bool)
