// Wire protocol mirror: frame types and the canonical encoding
// (UTF-8 JSON, sorted keys, no insignificant whitespace). Field-by-field
// documentation lives in protocol.md at the repo root.

export const PROTOCOL_VERSION = 1;

export type ClientKind =
  | "HELLO" | "INPUT" | "SUBMIT" | "SWITCH_IDENTITY"
  | "ANNOTATE" | "SET_INDICATOR" | "BYE";

export type ServerKind =
  | "WELCOME" | "PEER_JOINED" | "PEER_LEFT" | "TYPING_STATE"
  | "PEER_KEYSTROKE" | "MESSAGE_POSTED" | "MESSAGE_UPDATED"
  | "INDICATOR_CHANGED" | "ERROR";

export interface Identity {
  display_name: string;
  role_label: string;
  presented_as_machine: boolean;
}

export interface InputEventPayload {
  kind: "KEY_DOWN" | "KEY_ERASE" | "MOUSE_MOVE" | "FOCUS" | "BLUR";
  client_ts_ms: number;
  draft_len_after: number;
  char_count: number;
  chars: string | null;
  x: number;
  y: number;
}

export interface ClientFrame {
  kind: ClientKind;
  client_seq: number;
  body: Record<string, unknown>;
}

export interface ServerFrame {
  kind: ServerKind;
  record_seq: number;
  body: any;
}

const SERVER_KINDS: ReadonlySet<string> = new Set([
  "WELCOME", "PEER_JOINED", "PEER_LEFT", "TYPING_STATE", "PEER_KEYSTROKE",
  "MESSAGE_POSTED", "MESSAGE_UPDATED", "INDICATOR_CHANGED", "ERROR",
]);

/** JSON with lexicographically sorted object keys, matching the server's
 * canonical form byte for byte. */
export function canonicalJson(value: unknown): string {
  if (value === null || typeof value !== "object") {
    return JSON.stringify(value);
  }
  if (Array.isArray(value)) {
    return "[" + value.map(canonicalJson).join(",") + "]";
  }
  const entries = Object.entries(value as Record<string, unknown>)
    .sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0))
    .map(([k, v]) => JSON.stringify(k) + ":" + canonicalJson(v));
  return "{" + entries.join(",") + "}";
}

export function encodeFrame(frame: ClientFrame): string {
  return canonicalJson({
    v: PROTOCOL_VERSION,
    kind: frame.kind,
    client_seq: frame.client_seq,
    body: frame.body,
  });
}

export function decodeServerFrame(text: string): ServerFrame {
  const obj = JSON.parse(text);
  if (typeof obj !== "object" || obj === null || obj.v !== PROTOCOL_VERSION) {
    throw new Error("unsupported frame");
  }
  if (!SERVER_KINDS.has(obj.kind)) {
    throw new Error(`unknown server frame kind ${obj.kind}`);
  }
  return { kind: obj.kind as ServerKind, record_seq: obj.record_seq ?? 0, body: obj.body ?? {} };
}

export function identityKey(identity: Identity): string {
  return identity.display_name;
}
