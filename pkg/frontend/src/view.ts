/**
 * Pure rendering: ConsoleModel in, HTML string out.
 *
 * Interactive elements carry data-action attributes for event delegation,
 * and structural elements carry machine-readable data-* attributes so tests
 * can compare the rendered state against the service snapshot. Controls are
 * disabled while a request is in flight. Reject controls exist only on tag
 * questions; item cards offer accept/ignore.
 */

import type { AskSlotCard, RecommendSlotCard, SessionSummary, Verdict } from "./api.js";
import type { ConsoleModel, VerdictField } from "./state.js";

function esc(value: unknown): string {
  return String(value)
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}

function verdictButton(
  field: VerdictField,
  slot: number,
  verdict: Verdict,
  selected: boolean,
  disabled: boolean,
): string {
  return (
    `<button type="button" data-action="verdict" data-field="${field}"` +
    ` data-slot="${slot}" data-verdict="${verdict}"` +
    ` aria-pressed="${selected}"${disabled ? " disabled" : ""}>` +
    `${verdict.toLowerCase()}</button>`
  );
}

function verdictGroup(
  field: VerdictField,
  slot: number,
  choices: Verdict[],
  current: Verdict,
  disabled: boolean,
): string {
  const buttons = choices
    .map((v) => verdictButton(field, slot, v, v === current, disabled))
    .join("");
  return `<span class="verdicts" data-field="${field}">${buttons}</span>`;
}

function banner(model: ConsoleModel): string {
  const parts: string[] = [];
  if (model.connectionError !== null) {
    parts.push(
      `<div class="banner" data-banner="connection">${esc(model.connectionError)}` +
        ` <button type="button" data-action="retry">retry</button></div>`,
    );
  }
  if (model.formError !== null) {
    parts.push(`<div class="banner" data-banner="form">${esc(model.formError)}</div>`);
  }
  return parts.join("");
}

function header(model: ConsoleModel): string {
  if (model.sessionId === null) return "";
  return (
    `<header class="session-line">session ${esc(model.sessionId)}` +
    ` | policy ${esc(model.policy)} | user ${esc(model.userId)}</header>`
  );
}

function budget(round: number, maxRounds: number): string {
  const pct = Math.round((100 * Math.min(round, maxRounds)) / maxRounds);
  return (
    `<div class="budget" data-round="${round}" data-max="${maxRounds}">` +
    `<span class="budget-fill" style="width: ${pct}%"></span>` +
    `<span class="budget-text">round ${round} of ${maxRounds}</span></div>`
  );
}

function recommendCard(
  card: RecommendSlotCard,
  current: Verdict,
  disabled: boolean,
): string {
  const title = card.item_label !== undefined ? esc(card.item_label) : `item ${card.item}`;
  const tags =
    `attrs [${card.attrs.join(", ")}]` + ` | cats [${card.cats.join(", ")}]`;
  return (
    `<article class="card" data-kind="RECOMMEND" data-slot="${card.slot}"` +
    ` data-item="${card.item}">` +
    `<h3>slot ${card.slot}: ${title}</h3>` +
    `<p class="tags">${tags}</p>` +
    verdictGroup("item", card.slot, ["ACCEPT", "IGNORE"], current, disabled) +
    `</article>`
  );
}

function askCard(
  card: AskSlotCard,
  currentAttr: Verdict,
  currentCat: Verdict,
  disabled: boolean,
): string {
  const attrName = card.attr_label !== undefined ? esc(card.attr_label) : `attribute ${card.attr}`;
  const catName = card.cat_label !== undefined ? esc(card.cat_label) : `category ${card.cat}`;
  const all: Verdict[] = ["ACCEPT", "REJECT", "IGNORE"];
  return (
    `<article class="card" data-kind="ASK" data-slot="${card.slot}"` +
    ` data-attr="${card.attr}" data-cat="${card.cat}">` +
    `<h3>slot ${card.slot}</h3>` +
    `<div class="question"><span>${attrName}?</span>` +
    verdictGroup("attribute", card.slot, all, currentAttr, disabled) +
    `</div>` +
    `<div class="question"><span>${catName}?</span>` +
    verdictGroup("category", card.slot, all, currentCat, disabled) +
    `</div>` +
    `</article>`
  );
}

function turnSection(model: ConsoleModel): string {
  const turn = model.turn;
  if (turn === null) return "";
  const disabled = model.phase === "submitting";
  let cards: string;
  let extras = "";
  if (turn.kind === "RECOMMEND") {
    cards = turn.slots
      .map((card) =>
        recommendCard(card, model.itemVerdicts[card.slot] ?? "IGNORE", disabled),
      )
      .join("");
    extras =
      `<label class="satisfied"><input type="checkbox" data-action="satisfied"` +
      `${model.satisfied ? " checked" : ""}${disabled ? " disabled" : ""}>` +
      ` this completes my bundle</label>`;
  } else {
    cards = turn.slots
      .map((card) =>
        askCard(
          card,
          model.attributeVerdicts[card.slot] ?? "IGNORE",
          model.categoryVerdicts[card.slot] ?? "IGNORE",
          disabled,
        ),
      )
      .join("");
  }
  const submit =
    `<button type="button" class="submit" data-action="submit"` +
    `${disabled ? " disabled" : ""}>` +
    `${disabled ? "sending..." : "send feedback"}</button>`;
  return (
    `<section class="turn" data-kind="${turn.kind}">` +
    `<div class="cards">${cards}</div>${extras}${submit}</section>`
  );
}

function tray(bundle: number[]): string {
  const body =
    bundle.length > 0
      ? bundle.map((i) => `<span class="chip" data-item="${i}">item ${i}</span>`).join("")
      : `<p class="empty">empty</p>`;
  return `<section class="tray"><h2>accepted bundle</h2>${body}</section>`;
}

function timeline(results: string[]): string {
  const body =
    results.length > 0
      ? results.map((r) => `<span class="badge" data-result="${esc(r)}">${esc(r)}</span>`).join("")
      : `<p class="empty">no rounds yet</p>`;
  return `<section class="timeline"><h2>result log</h2>${body}</section>`;
}

function summaryPanel(summary: SessionSummary): string {
  const bundle =
    summary.accepted_bundle.length > 0 ? summary.accepted_bundle.join(", ") : "(empty)";
  let metrics = "";
  if (summary.metrics !== null) {
    const rows = Object.entries(summary.metrics)
      .map(
        ([key, value]) =>
          `<tr data-metric="${esc(key)}"><td>${esc(key)}</td><td>${value.toFixed(4)}</td></tr>`,
      )
      .join("");
    metrics = `<table class="metrics"><tbody>${rows}</tbody></table>`;
  }
  return (
    `<section class="summary" data-success="${summary.success}">` +
    `<h2>${summary.success ? "bundle complete" : "conversation over"}</h2>` +
    `<p>${esc(summary.reason)}, ${summary.rounds} rounds used</p>` +
    `<p>bundle: ${bundle}</p>${metrics}</section>`
  );
}

export function render(model: ConsoleModel): string {
  const parts: string[] = [banner(model), header(model)];
  if (model.turn !== null) {
    parts.push(budget(model.turn.round, model.maxRounds));
  }
  if (model.phase === "idle") {
    parts.push(`<p class="hint">No session yet. Start one to begin a conversation.</p>`);
  } else if (model.phase === "starting") {
    parts.push(`<p class="hint">Starting session...</p>`);
  }
  parts.push(turnSection(model));
  parts.push(tray(model.acceptedBundle));
  parts.push(timeline(model.resultLog));
  if (model.summary !== null) {
    parts.push(summaryPanel(model.summary));
  }
  return `<div class="console" data-phase="${model.phase}">${parts.join("")}</div>`;
}
