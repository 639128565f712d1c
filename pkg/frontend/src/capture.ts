// Input capture: turn draft-box changes and pointer movement into raw
// input events. Pure logic over values so it can be tested without a
// browser; the DOM wiring in ui.ts only feeds it.
//
// The client never computes metrics, it only reports raw events; and in
// quasi-sync sessions the inserted characters themselves stay out of
// the payload, so drafts never cross the wire ("sendChars" is true only
// when the session mode transmits keystrokes).

import { InputEventPayload } from "./protocol.js";

/** Events for one draft-box change, derived by diffing the previous and
 * next textarea values. A plain keystroke yields one KEY_DOWN, a paste
 * one multi-character KEY_DOWN, a deletion one KEY_ERASE, and a
 * selection replacement an erase followed by an insert. */
export function draftEvents(
  prev: string,
  next: string,
  tsMs: number,
  sendChars: boolean,
): InputEventPayload[] {
  if (prev === next) {
    return [];
  }
  let prefix = 0;
  const maxPrefix = Math.min(prev.length, next.length);
  while (prefix < maxPrefix && prev[prefix] === next[prefix]) {
    prefix++;
  }
  let suffix = 0;
  const maxSuffix = Math.min(prev.length, next.length) - prefix;
  while (suffix < maxSuffix && prev[prev.length - 1 - suffix] === next[next.length - 1 - suffix]) {
    suffix++;
  }
  const erased = prev.length - prefix - suffix;
  const inserted = next.substring(prefix, next.length - suffix);

  const events: InputEventPayload[] = [];
  if (erased > 0) {
    events.push({
      kind: "KEY_ERASE", client_ts_ms: tsMs,
      draft_len_after: prev.length - erased,
      char_count: erased, chars: null, x: 0, y: 0,
    });
  }
  if (inserted.length > 0) {
    events.push({
      kind: "KEY_DOWN", client_ts_ms: tsMs,
      draft_len_after: next.length,
      char_count: inserted.length,
      chars: sendChars ? inserted : null,
      x: 0, y: 0,
    });
  }
  return events;
}

export function focusEvent(kind: "FOCUS" | "BLUR", tsMs: number, draftLen: number): InputEventPayload {
  return { kind, client_ts_ms: tsMs, draft_len_after: draftLen, char_count: 0, chars: null, x: 0, y: 0 };
}

/** Downsamples pointer movement to at most one event per interval, and
 * nothing at all while the pointer holds still. */
export class MouseSampler {
  private lastEmitTs = -Infinity;
  private lastX = NaN;
  private lastY = NaN;

  constructor(private intervalMs: number) {}

  sample(x: number, y: number, tsMs: number, draftLen: number): InputEventPayload | null {
    if (x === this.lastX && y === this.lastY) {
      return null;
    }
    if (tsMs - this.lastEmitTs < this.intervalMs) {
      return null;
    }
    this.lastEmitTs = tsMs;
    this.lastX = x;
    this.lastY = y;
    return {
      kind: "MOUSE_MOVE", client_ts_ms: tsMs, draft_len_after: draftLen,
      char_count: 0, chars: null, x, y,
    };
  }
}

/** Monotone client clock: milliseconds since page load, never decreasing. */
export class ClientClock {
  private last = 0;

  constructor(private readonly source: () => number = () => performance.now()) {}

  now(): number {
    const t = Math.round(this.source());
    this.last = Math.max(this.last, t);
    return this.last;
  }
}
