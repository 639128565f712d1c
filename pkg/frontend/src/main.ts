// Entry point: a join form, then the chat UI bound to one connection.

import { ChatClient } from "./client.js";
import { mountUi } from "./ui.js";
import { ViewState, applyFrame, initialState } from "./view.js";

function wsUrl(): string {
  const scheme = location.protocol === "https:" ? "wss" : "ws";
  return `${scheme}://${location.host}/ws`;
}

function boot(root: HTMLElement, sessionId: string, token: string): void {
  const state: ViewState = initialState();
  let ui: ReturnType<typeof mountUi> | null = null;
  const client = new ChatClient({
    url: wsUrl(),
    sessionId,
    token,
    onFrame: (frame) => {
      applyFrame(state, frame);
      ui?.render(state);
    },
    onConnection: (connection) => {
      state.connection = connection;
      ui?.render(state);
    },
  });
  ui = mountUi(root, client);
  ui.render(state);
  client.connect();
  addEventListener("beforeunload", () => client.close());
}

function joinForm(root: HTMLElement): void {
  const params = new URLSearchParams(location.search);
  const presetSession = params.get("session") ?? "";
  const presetToken = params.get("token") ?? "";
  if (presetSession && presetToken) {
    boot(root, presetSession, presetToken);
    return;
  }
  root.innerHTML = `
    <form id="join" class="join">
      <h1>Join a session</h1>
      <label>Session id <input name="session" required value=""></label>
      <label>Join token <input name="token" required value=""></label>
      <button type="submit">Join</button>
    </form>
  `;
  const form = root.querySelector<HTMLFormElement>("#join")!;
  (form.elements.namedItem("session") as HTMLInputElement).value = presetSession;
  (form.elements.namedItem("token") as HTMLInputElement).value = presetToken;
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const data = new FormData(form);
    boot(root, String(data.get("session")), String(data.get("token")));
  });
}

joinForm(document.getElementById("app")!);
