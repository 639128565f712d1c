// View state: a pure projection of received server frames plus the
// local draft. Nothing in here survives that the server cannot
// reconstruct, so a reconnect (fresh WELCOME) rebuilds the view exactly.

import { Identity, ServerFrame, identityKey } from "./protocol.js";

export interface MessageView {
  message_id: string;
  session_seq: number;
  author: Identity;
  text: string;
  submit_ts_server_ms: number;
  edit_count: number;
  rating_latest: number | null;
  annotations: AnnotationNote[];
}

export interface AnnotationNote {
  kind: string;
  body: string | number;
  study_internal: boolean;
}

export interface PeerView {
  identity: Identity;
  connected: boolean;
}

export interface SessionView {
  session_id: string;
  title: string;
  mode: "QUASI_SYNC" | "SYNC";
  rating_scale_max: number;
  mouse_sample_interval_ms: number;
  indicator: {
    session_default: string;
    idle_timeout_ms: number;
    leader_locked: boolean;
    your_variant: string;
  };
}

export interface YouView {
  participant_id: string;
  kind: "SUBJECT" | "WIZARD" | "LEADER" | "BOT";
  identities: Identity[];
  active_identity_index: number;
}

export type Connection = "connecting" | "online" | "offline";

export interface ViewState {
  connection: Connection;
  session: SessionView | null;
  you: YouView | null;
  messages: MessageView[];
  peers: Record<string, PeerView>;           // keyed by display name
  indicators: Record<string, "TYPING" | "PAUSED">;
  panes: Record<string, string>;             // SYNC live text per peer
  lastError: { code: string; message: string } | null;
}

export function initialState(): ViewState {
  return {
    connection: "connecting",
    session: null,
    you: null,
    messages: [],
    peers: {},
    indicators: {},
    panes: {},
    lastError: null,
  };
}

function messageFromBody(body: any): MessageView {
  return {
    message_id: body.message_id,
    session_seq: body.session_seq,
    author: body.author,
    text: body.text,
    submit_ts_server_ms: body.submit_ts_server_ms,
    edit_count: 0,
    rating_latest: null,
    annotations: (body.annotations ?? []).map((a: any) => ({
      kind: a.kind, body: a.body, study_internal: a.study_internal,
    })),
  };
}

/** Fold one server frame into the view. Mutates and returns the state;
 * rendering happens separately from the folded value. */
export function applyFrame(state: ViewState, frame: ServerFrame): ViewState {
  const body = frame.body;
  switch (frame.kind) {
    case "WELCOME": {
      state.connection = "online";
      state.session = body.session;
      state.you = body.you;
      state.messages = body.messages.map(messageFromBody);
      state.peers = {};
      for (const peer of body.peers) {
        state.peers[identityKey(peer.identity)] = {
          identity: peer.identity, connected: peer.connected,
        };
        if (peer.typing_state === "TYPING" || peer.typing_state === "PAUSED") {
          state.indicators[identityKey(peer.identity)] = peer.typing_state;
        }
      }
      state.indicators = { ...state.indicators };
      state.panes = {};
      break;
    }
    case "PEER_JOINED": {
      state.peers[identityKey(body.identity)] = { identity: body.identity, connected: true };
      break;
    }
    case "PEER_LEFT": {
      const key = identityKey(body.identity);
      const peer = state.peers[key];
      if (peer) {
        peer.connected = false;
      }
      delete state.indicators[key];
      delete state.panes[key];
      break;
    }
    case "TYPING_STATE": {
      const key = identityKey(body.who);
      if (body.state === "TYPING" || body.state === "PAUSED") {
        state.indicators[key] = body.state;
      } else {
        delete state.indicators[key];
      }
      break;
    }
    case "PEER_KEYSTROKE": {
      const key = identityKey(body.author);
      const pane = state.panes[key] ?? "";
      if (body.event_kind === "KEY_DOWN") {
        state.panes[key] = pane + (body.chars ?? "");
      } else if (body.event_kind === "KEY_ERASE") {
        state.panes[key] = pane.slice(0, pane.length - body.char_count);
      }
      break;
    }
    case "MESSAGE_POSTED": {
      if (!state.messages.some((m) => m.message_id === body.message_id)) {
        state.messages.push(messageFromBody(body));
        state.messages.sort((a, b) => a.session_seq - b.session_seq);
      }
      // the turn is durable now: its author is no longer composing
      const key = identityKey(body.author);
      delete state.indicators[key];
      delete state.panes[key];
      break;
    }
    case "MESSAGE_UPDATED": {
      const message = state.messages.find((m) => m.message_id === body.message_id);
      if (message) {
        message.text = body.text;
        message.edit_count = body.edit_count;
        if (body.rating_latest !== undefined) {
          message.rating_latest = body.rating_latest;
        }
        if (body.annotation) {
          message.annotations.push({
            kind: body.annotation.kind,
            body: body.annotation.body,
            study_internal: body.annotation.study_internal,
          });
        }
      }
      break;
    }
    case "INDICATOR_CHANGED": {
      if (state.session) {
        state.session.indicator = body;
      }
      if (body.your_variant === "OFF" || body.session_default === "OFF") {
        state.indicators = {};
      }
      break;
    }
    case "ERROR": {
      state.lastError = { code: body.code, message: body.message };
      break;
    }
  }
  return state;
}

/** Indicator line for one peer, per the display convention:
 * composing fresh input vs. holding a stalled draft. */
export function indicatorText(name: string, s: "TYPING" | "PAUSED"): string {
  return s === "TYPING" ? `${name} is typing…` : `${name} started typing…`;
}
