"""Per-message typing and mouse metrics over a window of input events.

All deltas use the participant's own client clock (client_ts_ms); server
timestamps never enter a subtraction here, so metrics are immune to
network jitter. Functions are pure and deterministic.

The numeric inner loops live in a small kernel module compiled with
Cython when available; set CBK_PURE_PY=1 to force the pure-Python
fallback (benchmarks/bench_kernels.py compares the two).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from ..model import InputEvent, InputKind, TelemetrySummary

from . import _kernels_py as _pure

try:
    from . import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:
    _compiled = None

_impl = _pure if (os.environ.get("CBK_PURE_PY") == "1" or _compiled is None) else _compiled


def active_backend() -> str:
    return _impl.BACKEND


def available_backends() -> list[str]:
    return ["pure"] if _compiled is None else ["pure", "compiled"]


def set_backend(name: str) -> None:
    """Switch kernels at runtime; used by tests and the benchmark."""
    global _impl
    if name == "pure":
        _impl = _pure
    elif name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels not built")
        _impl = _compiled
    else:
        raise ValueError(f"unknown backend {name!r}")


@dataclass(frozen=True)
class EventWindow:
    """One participant's input events between two of their submissions.

    window_start_ts_ms and submit_ts_ms are on the same clock axis as the
    events' client_ts_ms; events are sorted by client_ts_ms and fall
    within [window_start_ts_ms, submit_ts_ms].
    """

    events: tuple[InputEvent, ...]
    window_start_ts_ms: int
    submit_ts_ms: int


def key_event_times(window: EventWindow) -> list[int]:
    """Timestamps of key events (insertions and erasures both count)."""
    return [ev.client_ts_ms for ev in window.events
            if ev.kind in (InputKind.KEY_DOWN, InputKind.KEY_ERASE)]


def compute_pause(window: EventWindow) -> int:
    """Latency from the window start (last visible turn or join) to the
    first key event; span to submit when the window has no key events."""
    key_ts = key_event_times(window)
    if not key_ts:
        return window.submit_ts_ms - window.window_start_ts_ms
    return key_ts[0] - window.window_start_ts_ms


def compute_speed(window: EventWindow, submitted_text: str) -> tuple[int, int, float]:
    """(typing_duration_ms, char_count, speed_cps); speed is 0 when the
    duration is 0 (single key event or none)."""
    key_ts = key_event_times(window)
    duration = key_ts[-1] - key_ts[0] if len(key_ts) >= 2 else 0
    char_count = len(submitted_text)
    speed = char_count / (duration / 1000.0) if duration > 0 else 0.0
    return duration, char_count, speed


def compute_rhythm(window: EventWindow) -> tuple[tuple[int, ...], float | None, float | None, float | None]:
    """Inter-key intervals plus population mean/stddev/CV.

    Aggregates are None below two key events; CV is None when the mean
    interval is 0 (all key events on one timestamp).
    """
    key_ts = key_event_times(window)
    if len(key_ts) < 2:
        return (), None, None, None
    iki = _impl.iki_intervals(key_ts)
    mean, std = _impl.mean_std(iki)
    cv = std / mean if mean != 0 else None
    return tuple(iki), mean, std, cv


def compute_mouse(window: EventWindow) -> tuple[float, int]:
    """Total Euclidean path length over MOUSE_MOVE points, and their count."""
    xs: list[float] = []
    ys: list[float] = []
    for ev in window.events:
        if ev.kind == InputKind.MOUSE_MOVE:
            xs.append(ev.x)
            ys.append(ev.y)
    return _impl.path_length(xs, ys), len(xs)


def summarize(window: EventWindow, submitted_text: str) -> TelemetrySummary:
    """Assemble the full per-message summary. A k-character paste counts
    as one keystroke and k characters.

    Single scan plus the numeric kernels; field-for-field equal to the
    standalone compute_* operations (the tests hold it to that)."""
    key_ts, keystrokes, erases, xs, ys = _impl.scan_events(window.events)

    if key_ts:
        pause = key_ts[0] - window.window_start_ts_ms
    else:
        pause = window.submit_ts_ms - window.window_start_ts_ms

    duration = key_ts[-1] - key_ts[0] if len(key_ts) >= 2 else 0
    char_count = len(submitted_text)
    speed = char_count / (duration / 1000.0) if duration > 0 else 0.0

    if len(key_ts) >= 2:
        iki = _impl.iki_intervals(key_ts)
        mean, std = _impl.mean_std(iki)
        cv = std / mean if mean != 0 else None
        iki = tuple(iki)
    else:
        iki, mean, std, cv = (), None, None, None

    return TelemetrySummary(
        pause_before_ms=pause,
        typing_duration_ms=duration,
        char_count=char_count,
        keystroke_count=keystrokes,
        erase_count=erases,
        speed_cps=speed,
        iki_mean_ms=mean,
        iki_stddev_ms=std,
        iki_cv=cv,
        iki_list_ms=iki,
        mouse_path_px=_impl.path_length(xs, ys),
        mouse_event_count=len(xs),
    )
