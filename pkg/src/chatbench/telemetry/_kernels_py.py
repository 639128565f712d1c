"""Pure-Python telemetry kernels; fallback when the compiled extension
is unavailable. Keep the arithmetic order identical to _kernels.pyx so
both backends produce bit-identical doubles."""

from __future__ import annotations

from math import sqrt

from ..model import InputKind

BACKEND = "pure"

_KEY_DOWN = InputKind.KEY_DOWN
_KEY_ERASE = InputKind.KEY_ERASE
_MOUSE_MOVE = InputKind.MOUSE_MOVE


def scan_events(events) -> tuple[list[int], int, int, list[float], list[float]]:
    """One pass over a window: key-event timestamps, keystroke and erase
    counts, and the mouse trail. Dominates replay-time recomputation."""
    key_ts: list[int] = []
    keystrokes = 0
    erases = 0
    xs: list[float] = []
    ys: list[float] = []
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


def iki_intervals(ts: list[int]) -> list[int]:
    """Successive differences of an ordered timestamp list."""
    return [ts[i] - ts[i - 1] for i in range(1, len(ts))]


def mean_std(values: list[int]) -> tuple[float, float]:
    """Population mean and standard deviation."""
    n = len(values)
    if n == 0:
        raise ValueError("mean_std of empty sequence")
    total = 0.0
    for v in values:
        total += v
    mean = total / n
    acc = 0.0
    for v in values:
        d = v - mean
        acc += d * d
    return mean, sqrt(acc / n)


def path_length(xs: list[float], ys: list[float]) -> float:
    """Length of the polyline through (xs[i], ys[i])."""
    total = 0.0
    for i in range(1, len(xs)):
        dx = xs[i] - xs[i - 1]
        dy = ys[i] - ys[i - 1]
        total += sqrt(dx * dx + dy * dy)
    return total
