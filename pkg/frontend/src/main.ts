/**
 * Browser entry point: wires the start form to a SessionStore and renders
 * the store into #app on every change. All interactivity goes through
 * data-action attributes and one delegated click handler.
 */

import { ApiClient } from "./api.js";
import type { Verdict } from "./api.js";
import { SessionStore } from "./state.js";
import type { VerdictField } from "./state.js";
import { render } from "./view.js";

export function mount(root: HTMLElement, store: SessionStore): () => void {
  const draw = (): void => {
    root.innerHTML = render(store.model);
  };
  const off = store.onChange(draw);
  root.onclick = (event) => {
    const el = (event.target as HTMLElement).closest<HTMLElement>("[data-action]");
    if (el === null) return;
    const action = el.dataset["action"];
    if (action === "verdict") {
      store.setVerdict(
        el.dataset["field"] as VerdictField,
        Number(el.dataset["slot"]),
        el.dataset["verdict"] as Verdict,
      );
    } else if (action === "satisfied") {
      store.setSatisfied((el as HTMLInputElement).checked);
    } else if (action === "submit") {
      void store.submit();
    } else if (action === "retry") {
      void store.retry();
    }
  };
  draw();
  return () => {
    off();
    root.onclick = null;
  };
}

function inputValue(selector: string, fallback: string): string {
  const el = document.querySelector<HTMLInputElement>(selector);
  const value = el !== null ? el.value.trim() : "";
  return value !== "" ? value : fallback;
}

function boot(): void {
  const app = document.querySelector<HTMLElement>("#app");
  const form = document.querySelector<HTMLFormElement>("#start-form");
  if (app === null || form === null) return;
  let unmount: (() => void) | null = null;
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const url = inputValue("#service-url", "http://127.0.0.1:8000");
    const policy = inputValue("#policy", "bunt-learn");
    const rawUser = inputValue("#user-id", "fresh");
    const rawTarget = inputValue("#target", "");
    const user = Number.isFinite(Number(rawUser)) && rawUser !== "" && rawUser !== "fresh"
      ? Number(rawUser)
      : ("fresh" as const);
    const target =
      rawTarget === ""
        ? undefined
        : rawTarget
            .split(",")
            .map((piece) => Number(piece.trim()))
            .filter((n) => Number.isFinite(n));
    const store = new SessionStore(new ApiClient(url));
    if (unmount !== null) unmount();
    unmount = mount(app, store);
    void store.start({ policy, user_id: user, target });
  });
}

if (typeof document !== "undefined") boot();
