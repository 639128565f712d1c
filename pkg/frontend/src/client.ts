// Connection management: HELLO handshake, frame sequencing, reconnect
// with backoff, and ordered buffering of input events across brief
// disconnects.

import { ClientClock } from "./capture.js";
import {
  ClientFrame,
  ClientKind,
  InputEventPayload,
  ServerFrame,
  decodeServerFrame,
  encodeFrame,
} from "./protocol.js";

export interface ChatClientOptions {
  url: string;
  sessionId: string;
  token: string;
  onFrame: (frame: ServerFrame) => void;
  onConnection: (state: "connecting" | "online" | "offline") => void;
  clock?: ClientClock;
  reconnectDelayMs?: number;
  maxReconnectDelayMs?: number;
}

export class ChatClient {
  readonly clock: ClientClock;
  private ws: WebSocket | null = null;
  private seq = 0;
  private closed = false;
  private delay: number;
  private readonly inputBuffer: InputEventPayload[] = [];

  constructor(private readonly options: ChatClientOptions) {
    this.clock = options.clock ?? new ClientClock();
    this.delay = options.reconnectDelayMs ?? 500;
  }

  connect(): void {
    this.options.onConnection("connecting");
    this.ws = new WebSocket(this.options.url);
    this.ws.onopen = () => {
      this.seq = 0;
      this.sendFrame("HELLO", {
        token: this.options.token,
        session_id: this.options.sessionId,
        client_ts_ms: this.clock.now(),
      });
      this.flushBuffered();
      this.delay = this.options.reconnectDelayMs ?? 500;
      this.options.onConnection("online");
    };
    this.ws.onmessage = (event) => {
      try {
        this.options.onFrame(decodeServerFrame(String(event.data)));
      } catch (error) {
        console.error("undecodable frame", error);
      }
    };
    this.ws.onclose = () => {
      this.ws = null;
      if (this.closed) {
        return;
      }
      this.options.onConnection("offline");
      const wait = this.delay;
      this.delay = Math.min(this.delay * 2, this.options.maxReconnectDelayMs ?? 8000);
      setTimeout(() => {
        if (!this.closed) {
          this.connect();
        }
      }, wait);
    };
  }

  close(): void {
    this.closed = true;
    if (this.ws && this.ws.readyState === WebSocket.OPEN) {
      this.sendFrame("BYE", {});
      this.ws.close();
    }
  }

  private online(): boolean {
    return this.ws !== null && this.ws.readyState === WebSocket.OPEN;
  }

  private sendFrame(kind: ClientKind, body: Record<string, unknown>): void {
    const frame: ClientFrame = { kind, client_seq: ++this.seq, body };
    this.ws!.send(encodeFrame(frame));
  }

  private flushBuffered(): void {
    while (this.inputBuffer.length > 0 && this.online()) {
      this.sendFrame("INPUT", { event: this.inputBuffer.shift()! });
    }
  }

  /** Input events are buffered while offline and flushed in order on
   * reconnect, so short drops don't punch holes in the telemetry. */
  sendInput(event: InputEventPayload): void {
    if (this.online()) {
      this.sendFrame("INPUT", { event });
    } else {
      this.inputBuffer.push(event);
    }
  }

  submit(text: string): void {
    if (this.online()) {
      this.sendFrame("SUBMIT", { text, client_ts_ms: this.clock.now() });
    }
  }

  switchIdentity(index: number): void {
    if (this.online()) {
      this.sendFrame("SWITCH_IDENTITY", { identity_index: index });
    }
  }

  annotate(kind: "EDIT" | "RATING" | "COMMENT", messageId: string, body: string | number): void {
    if (this.online()) {
      this.sendFrame("ANNOTATE", { kind, target_message_id: messageId, body });
    }
  }

  setIndicator(variant: "OFF" | "TYPING_ONLY" | "TYPING_AND_PAUSE"): void {
    if (this.online()) {
      this.sendFrame("SET_INDICATOR", { variant });
    }
  }
}
