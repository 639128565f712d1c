"""Metric computations against the brute-force oracle, plus invariants."""

import random

import pytest
from hypothesis import given, settings, strategies as st

from chatbench import telemetry
from chatbench.model import InputEvent, InputKind
from chatbench.telemetry import (
    EventWindow,
    compute_mouse,
    compute_pause,
    compute_rhythm,
    compute_speed,
    summarize,
)

from oracles import assert_summary_close, oracle_summary, random_window


def key(ts, draft=1):
    return InputEvent(InputKind.KEY_DOWN, ts, draft, 1)


def window(events, start=0, submit=None):
    events = tuple(events)
    if submit is None:
        submit = (events[-1].client_ts_ms if events else start) + 100
    return EventWindow(events, start, submit)


class TestPause:
    def test_first_keystroke_after_start(self):
        w = window([key(1200)], start=0)
        assert compute_pause(w) == 1200 - 0 == oracle_summary(w, "x").pause_before_ms

    def test_no_key_events_spans_to_submit(self):
        w = EventWindow((), 0, 500)
        assert compute_pause(w) == 500

    def test_keystroke_at_window_start(self):
        assert compute_pause(window([key(0)], start=0)) == 0

    def test_mouse_only_window_uses_submit(self):
        mouse = InputEvent(InputKind.MOUSE_MOVE, 100, 0, 0, None, 1.0, 1.0)
        assert compute_pause(EventWindow((mouse,), 0, 400)) == 400


class TestSpeed:
    def test_five_chars_over_2500ms(self):
        w = window([key(1000), key(2000), key(2300), key(3000), key(3500)])
        assert compute_speed(w, "abcde") == (2500, 5, 2.0)

    def test_single_keystroke_zero_duration(self):
        assert compute_speed(window([key(1000)]), "a") == (0, 1, 0.0)

    def test_empty_window_zero_speed(self):
        assert compute_speed(EventWindow((), 0, 100), "xy") == (0, 2, 0.0)


class TestRhythm:
    def test_known_intervals(self):
        w = window([key(0), key(100), key(300)])
        iki, mean, std, cv = compute_rhythm(w)
        assert iki == (100, 200)
        assert mean == 150
        assert std == 50
        assert abs(cv - 1 / 3) < 1e-12

    def test_single_key_event_absent(self):
        assert compute_rhythm(window([key(5)])) == ((), None, None, None)

    def test_evenly_spaced_zero_stddev(self):
        w = window([key(0), key(100), key(200), key(300)])
        iki, mean, std, cv = compute_rhythm(w)
        assert std == 0.0 and cv == 0.0 and mean == 100.0

    def test_erase_counts_as_key_event(self):
        erase = InputEvent(InputKind.KEY_ERASE, 250, 0, 1)
        iki, _, _, _ = compute_rhythm(window([key(0), key(100), erase]))
        assert iki == (100, 150)

    def test_all_same_timestamp_cv_absent(self):
        iki, mean, std, cv = compute_rhythm(window([key(7), key(7), key(7)]))
        assert iki == (0, 0) and mean == 0.0 and std == 0.0 and cv is None


class TestMouse:
    def test_three_four_five_triangle(self):
        moves = [InputEvent(InputKind.MOUSE_MOVE, 0, 0, 0, None, 0.0, 0.0),
                 InputEvent(InputKind.MOUSE_MOVE, 10, 0, 0, None, 3.0, 4.0)]
        assert compute_mouse(window(moves)) == (5.0, 2)

    def test_no_mouse_events(self):
        assert compute_mouse(EventWindow((), 0, 10)) == (0.0, 0)

    def test_random_walk_matches_pairwise_sum(self):
        rng = random.Random(42)
        moves = [InputEvent(InputKind.MOUSE_MOVE, i * 10, 0, 0, None,
                            rng.uniform(0, 100), rng.uniform(0, 100))
                 for i in range(50)]
        w = window(moves)
        path, count = compute_mouse(w)
        assert count == 50
        expected = oracle_summary(w, "x").mouse_path_px
        assert abs(path - expected) <= 1e-9 * max(1.0, expected)


class TestSummarize:
    def test_componentwise_assembly(self):
        events = [key(100), key(250),
                  InputEvent(InputKind.KEY_ERASE, 400, 1, 1),
                  InputEvent(InputKind.MOUSE_MOVE, 450, 1, 0, None, 0.0, 0.0),
                  InputEvent(InputKind.MOUSE_MOVE, 500, 1, 0, None, 3.0, 4.0)]
        w = window(events, start=0, submit=600)
        s = summarize(w, "a")
        assert s.pause_before_ms == compute_pause(w)
        assert (s.typing_duration_ms, s.char_count, s.speed_cps) == compute_speed(w, "a")
        assert (s.iki_list_ms, s.iki_mean_ms, s.iki_stddev_ms, s.iki_cv) == compute_rhythm(w)
        assert (s.mouse_path_px, s.mouse_event_count) == compute_mouse(w)
        assert s.keystroke_count == 2 and s.erase_count == 1

    def test_empty_window_with_injected_text(self):
        s = summarize(EventWindow((), 0, 300), "x")
        assert s.char_count == 1
        assert s.pause_before_ms == 300
        assert s.keystroke_count == 0 and s.erase_count == 0
        assert s.iki_mean_ms is None and s.iki_stddev_ms is None and s.iki_cv is None
        assert s.speed_cps == 0.0 and s.mouse_path_px == 0.0

    def test_deterministic(self):
        w, text = random_window(random.Random(7), max_events=200)
        assert summarize(w, text) == summarize(w, text)

    def test_paste_counts_once(self):
        paste = InputEvent(InputKind.KEY_DOWN, 100, 3, 3)
        s = summarize(window([paste]), "abc")
        assert s.keystroke_count == 1 and s.char_count == 3


class TestOracleEquivalence:
    def test_randomized_windows_match_oracle(self):
        rng = random.Random(20260810)
        for _ in range(250):
            w, text = random_window(rng, max_events=300)
            assert_summary_close(summarize(w, text), oracle_summary(w, text))


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(shift=st.integers(-10**6, 10**6), seed=st.integers(0, 10**6))
    def test_shift_invariance(self, shift, seed):
        w, text = random_window(random.Random(seed), max_events=60)
        if w.window_start_ts_ms + shift < 0:
            shift = -w.window_start_ts_ms
        shifted = EventWindow(
            tuple(InputEvent(e.kind, e.client_ts_ms + shift, e.draft_len_after,
                             e.char_count, e.chars, e.x, e.y) for e in w.events),
            w.window_start_ts_ms + shift, w.submit_ts_ms + shift)
        assert summarize(w, text) == summarize(shifted, text)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_iki_length_law(self, seed):
        w, text = random_window(random.Random(seed), max_events=80)
        s = summarize(w, text)
        key_events = s.keystroke_count + s.erase_count
        assert len(s.iki_list_ms) == max(0, key_events - 1)


@pytest.mark.skipif(len(telemetry.available_backends()) < 2,
                    reason="compiled kernels not built")
class TestBackendParity:
    def test_backends_agree_exactly(self):
        rng = random.Random(99)
        windows = [random_window(rng, max_events=400) for _ in range(50)]
        try:
            telemetry.set_backend("pure")
            pure = [summarize(w, t) for w, t in windows]
            telemetry.set_backend("compiled")
            compiled = [summarize(w, t) for w, t in windows]
        finally:
            telemetry.set_backend("compiled" if "compiled" in telemetry.available_backends()
                                  else "pure")
        assert pure == compiled
