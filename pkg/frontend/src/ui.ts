// DOM rendering and event wiring. All state lives in the ViewState fold
// and the textarea; this module only projects them onto elements and
// feeds captured events to the client.

import { ChatClient } from "./client.js";
import { MouseSampler, draftEvents, focusEvent } from "./capture.js";
import { ViewState, indicatorText } from "./view.js";

const CANNED_RESPONSES = [
  "Could you tell me a bit more about that?",
  "One moment please.",
  "I did not understand that. Could you rephrase?",
];

export interface UiHandles {
  root: HTMLElement;
  render: (state: ViewState) => void;
}

export function mountUi(root: HTMLElement, client: ChatClient): UiHandles {
  root.innerHTML = `
    <header id="topbar">
      <span id="session-title"></span>
      <span id="conn-badge" class="badge"></span>
    </header>
    <main>
      <section id="chat">
        <ol id="messages"></ol>
        <div id="panes"></div>
        <div id="indicators"></div>
        <form id="composer">
          <textarea id="draft" rows="2" autocomplete="off"
                    placeholder="Type a message…"></textarea>
          <button type="submit">Send</button>
        </form>
      </section>
      <aside id="console" hidden>
        <h2>Operator console</h2>
        <label>Speak as
          <select id="identity-picker"></select>
        </label>
        <div id="canned"></div>
        <p id="console-note"></p>
      </aside>
    </main>
    <div id="error-bar" hidden></div>
  `;

  const draft = root.querySelector<HTMLTextAreaElement>("#draft")!;
  const composer = root.querySelector<HTMLFormElement>("#composer")!;
  const picker = root.querySelector<HTMLSelectElement>("#identity-picker")!;

  let prevDraft = "";
  let sendChars = false;
  let sampler = new MouseSampler(200);

  function flushDraftDiff() {
    for (const event of draftEvents(prevDraft, draft.value, client.clock.now(), sendChars)) {
      client.sendInput(event);
    }
    prevDraft = draft.value;
  }

  draft.addEventListener("input", flushDraftDiff);
  draft.addEventListener("focus", () =>
    client.sendInput(focusEvent("FOCUS", client.clock.now(), draft.value.length)));
  draft.addEventListener("blur", () =>
    client.sendInput(focusEvent("BLUR", client.clock.now(), draft.value.length)));
  root.addEventListener("mousemove", (event) => {
    const sampled = sampler.sample(event.clientX, event.clientY, client.clock.now(),
                                   draft.value.length);
    if (sampled) {
      client.sendInput(sampled);
    }
  });
  composer.addEventListener("submit", (event) => {
    event.preventDefault();
    if (draft.value.trim().length === 0) {
      return;
    }
    client.submit(draft.value);
    draft.value = "";
    prevDraft = "";
  });
  picker.addEventListener("change", () => {
    client.switchIdentity(Number(picker.value));
  });

  function render(state: ViewState) {
    const badge = root.querySelector<HTMLElement>("#conn-badge")!;
    badge.textContent = state.connection;
    badge.className = `badge ${state.connection}`;
    if (state.session) {
      sendChars = state.session.mode === "SYNC";
      sampler = new MouseSampler(state.session.mouse_sample_interval_ms);
      root.querySelector("#session-title")!.textContent =
        `${state.session.title || state.session.session_id} · ${state.session.mode}`;
    }

    const list = root.querySelector<HTMLOListElement>("#messages")!;
    list.innerHTML = "";
    const ownName = state.you
      ? state.you.identities[state.you.active_identity_index].display_name : "";
    for (const message of state.messages) {
      const item = document.createElement("li");
      item.className = message.author.display_name === ownName ? "mine" : "theirs";
      const who = document.createElement("span");
      who.className = "who";
      who.textContent = message.author.display_name +
        (message.author.role_label ? ` (${message.author.role_label})` : "");
      const text = document.createElement("p");
      text.textContent = message.text;
      item.append(who, text);
      if (message.edit_count > 0) {
        const edited = document.createElement("span");
        edited.className = "edited";
        edited.textContent = "edited";
        item.append(edited);
      }
      if (state.you && state.you.kind !== "SUBJECT") {
        item.append(buildAnnotationControls(state, message.message_id,
                                            message.rating_latest));
      }
      list.append(item);
    }

    // live peer panes exist only in SYNC sessions
    const panes = root.querySelector<HTMLElement>("#panes")!;
    panes.innerHTML = "";
    if (state.session?.mode === "SYNC") {
      for (const [name, text] of Object.entries(state.panes)) {
        if (!text) continue;
        const pane = document.createElement("div");
        pane.className = "pane";
        pane.innerHTML = `<span class="who"></span><pre></pre>`;
        pane.querySelector(".who")!.textContent = name;
        pane.querySelector("pre")!.textContent = text;
        panes.append(pane);
      }
    }

    const indicators = root.querySelector<HTMLElement>("#indicators")!;
    indicators.innerHTML = "";
    if (state.session && state.session.indicator.session_default !== "OFF") {
      for (const [name, s] of Object.entries(state.indicators)) {
        const line = document.createElement("div");
        line.className = "indicator";
        line.textContent = indicatorText(name, s);
        indicators.append(line);
      }
    }

    const consolePane = root.querySelector<HTMLElement>("#console")!;
    if (state.you && (state.you.kind === "WIZARD" || state.you.kind === "LEADER")) {
      consolePane.hidden = false;
      if (picker.options.length !== state.you.identities.length) {
        picker.innerHTML = "";
        state.you.identities.forEach((identity, index) => {
          const option = document.createElement("option");
          option.value = String(index);
          option.textContent = identity.display_name +
            (identity.presented_as_machine ? " [machine]" : "");
          picker.append(option);
        });
      }
      picker.value = String(state.you.active_identity_index);
      const canned = root.querySelector<HTMLElement>("#canned")!;
      if (!canned.childElementCount) {
        for (const phrase of CANNED_RESPONSES) {
          const button = document.createElement("button");
          button.type = "button";
          button.textContent = phrase;
          button.addEventListener("click", () => {
            // inserting through the draft box keeps the telemetry honest:
            // the insertion is captured as one paste-like KEY_DOWN
            draft.value += phrase;
            flushDraftDiff();
            draft.focus();
          });
          canned.append(button);
        }
      }
    } else {
      consolePane.hidden = true;
    }

    const errorBar = root.querySelector<HTMLElement>("#error-bar")!;
    if (state.lastError) {
      errorBar.hidden = false;
      errorBar.textContent = `${state.lastError.code}: ${state.lastError.message}`;
    } else {
      errorBar.hidden = true;
    }
  }

  function buildAnnotationControls(state: ViewState, messageId: string,
                                   rating: number | null): HTMLElement {
    const controls = document.createElement("span");
    controls.className = "annotate";
    const scale = state.session?.rating_scale_max ?? 5;
    const stars = document.createElement("span");
    stars.className = "stars";
    for (let value = 1; value <= scale; value++) {
      const star = document.createElement("button");
      star.type = "button";
      star.textContent = rating !== null && value <= rating ? "★" : "☆";
      star.title = `rate ${value}/${scale}`;
      star.addEventListener("click", () => client.annotate("RATING", messageId, value));
      stars.append(star);
    }
    const edit = document.createElement("button");
    edit.type = "button";
    edit.textContent = "edit";
    edit.addEventListener("click", () => {
      const current = state.messages.find((m) => m.message_id === messageId)?.text ?? "";
      const replacement = window.prompt("Replace message text", current);
      if (replacement !== null && replacement !== current) {
        client.annotate("EDIT", messageId, replacement);
      }
    });
    const comment = document.createElement("button");
    comment.type = "button";
    comment.textContent = "comment";
    comment.addEventListener("click", () => {
      const note = window.prompt("Study-internal comment");
      if (note) {
        client.annotate("COMMENT", messageId, note);
      }
    });
    controls.append(stars, edit, comment);
    return controls;
  }

  return { root, render };
}
