# cython: language_level=3
"""Compiled telemetry kernels. Must stay arithmetically identical to
_kernels_py (same accumulation order) so backends agree bit-for-bit."""

from libc.math cimport sqrt

from ..model import InputKind

BACKEND = "compiled"

cdef object _KEY_DOWN = InputKind.KEY_DOWN
cdef object _KEY_ERASE = InputKind.KEY_ERASE
cdef object _MOUSE_MOVE = InputKind.MOUSE_MOVE


cpdef tuple scan_events(events):
    """One pass over a window: key-event timestamps, keystroke and erase
    counts, and the mouse trail. Dominates replay-time recomputation."""
    cdef list key_ts = []
    cdef list xs = []
    cdef list ys = []
    cdef Py_ssize_t keystrokes = 0, erases = 0
    cdef object ev, kind
    for ev in events:
        kind = ev.kind
        if kind is _KEY_DOWN:
            keystrokes += 1
            key_ts.append(ev.client_ts_ms)
        elif kind is _KEY_ERASE:
            erases += 1
            key_ts.append(ev.client_ts_ms)
        elif kind is _MOUSE_MOVE:
            xs.append(ev.x)
            ys.append(ev.y)
    return key_ts, keystrokes, erases, xs, ys


cpdef list iki_intervals(list ts):
    cdef Py_ssize_t i, n = len(ts)
    cdef long long a, b
    out = []
    for i in range(1, n):
        a = ts[i - 1]
        b = ts[i]
        out.append(b - a)
    return out


cpdef tuple mean_std(list values):
    cdef Py_ssize_t i, n = len(values)
    if n == 0:
        raise ValueError("mean_std of empty sequence")
    cdef double total = 0.0
    cdef double mean, acc = 0.0, d
    cdef long long v
    for i in range(n):
        v = values[i]
        total += v
    mean = total / n
    for i in range(n):
        v = values[i]
        d = v - mean
        acc += d * d
    return mean, sqrt(acc / n)


cpdef double path_length(list xs, list ys):
    cdef Py_ssize_t i, n = len(xs)
    cdef double total = 0.0, dx, dy
    for i in range(1, n):
        dx = <double> xs[i] - <double> xs[i - 1]
        dy = <double> ys[i] - <double> ys[i - 1]
        total += sqrt(dx * dx + dy * dy)
    return total
