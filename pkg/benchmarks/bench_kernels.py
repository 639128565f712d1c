#!/usr/bin/env python3
"""Compare the compiled telemetry kernels against the pure-Python
fallback on synthetic event windows.

    python benchmarks/bench_kernels.py [--events N] [--windows N]

The replay/verify/export paths recompute every message's metrics from
raw events, so these loops dominate when crunching a study's worth of
logs; interactive serving barely touches them.
"""

import argparse
import random
import time

from chatbench import telemetry
from chatbench.model import InputEvent, InputKind
from chatbench.telemetry import EventWindow, summarize


def synth_window(rng: random.Random, n_events: int) -> tuple[EventWindow, str]:
    ts = 0
    draft = 0
    events = []
    for _ in range(n_events):
        ts += rng.randrange(20, 250)
        if rng.random() < 0.75:
            draft += 1
            events.append(InputEvent(InputKind.KEY_DOWN, ts, draft, 1))
        else:
            events.append(InputEvent(InputKind.MOUSE_MOVE, ts, draft, 0, None,
                                     rng.uniform(0, 1920), rng.uniform(0, 1080)))
    return EventWindow(tuple(events), 0, ts + 100), "x" * max(draft, 1)


def bench(backend: str, windows) -> float:
    telemetry.set_backend(backend)
    t0 = time.perf_counter()
    for window, text in windows:
        summarize(window, text)
    return time.perf_counter() - t0


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--events", type=int, default=2000, help="events per window")
    parser.add_argument("--windows", type=int, default=200, help="windows per pass")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    rng = random.Random(7)
    windows = [synth_window(rng, args.events) for _ in range(args.windows)]
    backends = telemetry.available_backends()
    print(f"{args.windows} windows x {args.events} events, best of {args.repeats}:")

    results = {}
    for backend in backends:
        best = min(bench(backend, windows) for _ in range(args.repeats))
        per_window_us = best / args.windows * 1e6
        results[backend] = best
        print(f"  {backend:>8}: {best:.3f}s total, {per_window_us:8.1f} us/window")

    if "compiled" in results and "pure" in results:
        print(f"  speedup (pure/compiled): {results['pure'] / results['compiled']:.2f}x")
    else:
        print("  compiled kernels not built; only the fallback was measured")

    # the two backends must agree bit for bit
    telemetry.set_backend("pure")
    pure = [summarize(w, t) for w, t in windows[:20]]
    if "compiled" in backends:
        telemetry.set_backend("compiled")
        compiled = [summarize(w, t) for w, t in windows[:20]]
        assert pure == compiled, "backend results diverged"
        print("  parity check: identical results on 20 windows")


if __name__ == "__main__":
    main()
