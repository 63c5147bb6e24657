/**
 * Client-side session state machine.
 *
 * One store drives one conversation. The store owns the pending turn, the
 * per-slot verdict selections (default IGNORE, mirroring the simulator's
 * residual case), and the submission lifecycle. Feedback bodies are built
 * from the pending turn's kind, so no interaction path can send verdicts
 * that mismatch the turn. Each submission gets a fresh idempotency token;
 * the token is only retired once the service confirms the application, so
 * retrying after a lost response replays instead of double-applying.
 */

import { ApiClient, ApiError } from "./api.js";
import type {
  FeedbackBody,
  FeedbackResult,
  SessionSummary,
  StartRequest,
  Turn,
  Verdict,
} from "./api.js";

export type Phase =
  | "idle"
  | "starting"
  | "awaiting_feedback"
  | "submitting"
  | "finished"
  | "error";

export type VerdictField = "item" | "attribute" | "category";

export interface ConsoleModel {
  phase: Phase;
  sessionId: string | null;
  userId: number | string | null;
  policy: string | null;
  maxRounds: number;
  turn: Turn | null;
  itemVerdicts: Record<number, Verdict>;
  attributeVerdicts: Record<number, Verdict>;
  categoryVerdicts: Record<number, Verdict>;
  satisfied: boolean;
  acceptedBundle: number[];
  resultLog: string[];
  summary: SessionSummary | null;
  formError: string | null;
  connectionError: string | null;
}

function freshModel(maxRounds: number): ConsoleModel {
  return {
    phase: "idle",
    sessionId: null,
    userId: null,
    policy: null,
    maxRounds,
    turn: null,
    itemVerdicts: {},
    attributeVerdicts: {},
    categoryVerdicts: {},
    satisfied: false,
    acceptedBundle: [],
    resultLog: [],
    summary: null,
    formError: null,
    connectionError: null,
  };
}

export class SessionStore {
  model: ConsoleModel;

  private readonly api: ApiClient;
  private readonly listeners: Array<(model: ConsoleModel) => void> = [];
  private pendingToken: string | null = null;
  private inflight: Promise<void> | null = null;
  private lastStart: StartRequest | null = null;
  private tokenSeq = 0;

  constructor(api: ApiClient) {
    this.api = api;
    this.model = freshModel(10);
  }

  onChange(listener: (model: ConsoleModel) => void): () => void {
    this.listeners.push(listener);
    return () => {
      const at = this.listeners.indexOf(listener);
      if (at >= 0) this.listeners.splice(at, 1);
    };
  }

  private emit(): void {
    for (const listener of [...this.listeners]) listener(this.model);
  }

  async start(req: StartRequest = {}): Promise<void> {
    if (this.model.phase === "starting" || this.model.phase === "submitting") return;
    this.lastStart = req;
    this.pendingToken = null;
    this.model = freshModel(req.max_rounds ?? 10);
    this.model.phase = "starting";
    this.emit();
    try {
      const created = await this.api.createSession(req);
      this.model.sessionId = created.session_id;
      this.model.userId = created.user_id;
      this.model.policy = created.policy;
      this.applyTurn(created.first_turn);
    } catch (err) {
      this.model.phase = "error";
      this.model.connectionError = err instanceof Error ? err.message : String(err);
    }
    this.emit();
  }

  setVerdict(field: VerdictField, slot: number, verdict: Verdict): void {
    const turn = this.model.turn;
    if (this.model.phase !== "awaiting_feedback" || turn === null) {
      throw new Error("no pending turn to give feedback on");
    }
    if (field === "item") {
      if (turn.kind !== "RECOMMEND") {
        throw new Error("this turn asked questions; item verdicts do not apply");
      }
      if (verdict === "REJECT") {
        throw new Error("items take ACCEPT or IGNORE verdicts only");
      }
    } else if (turn.kind !== "ASK") {
      throw new Error("this turn proposed items; tag verdicts do not apply");
    }
    if (!turn.slots.some((card) => card.slot === slot)) {
      throw new Error(`no active slot ${slot} in this turn`);
    }
    const verdicts =
      field === "item"
        ? this.model.itemVerdicts
        : field === "attribute"
          ? this.model.attributeVerdicts
          : this.model.categoryVerdicts;
    verdicts[slot] = verdict;
    this.model.formError = null;
    this.emit();
  }

  /** Mark the bundle as complete with this round's accepted items. */
  setSatisfied(flag: boolean): void {
    const turn = this.model.turn;
    if (this.model.phase !== "awaiting_feedback" || turn === null || turn.kind !== "RECOMMEND") {
      throw new Error("bundle completion toggles only on recommendation turns");
    }
    this.model.satisfied = flag;
    this.emit();
  }

  /**
   * Send the current selections. Calling again while a request is in flight
   * returns the same promise, so a double click cannot post twice.
   */
  submit(): Promise<void> {
    if (this.inflight !== null) return this.inflight;
    if (
      this.model.phase !== "awaiting_feedback" ||
      this.model.turn === null ||
      this.model.sessionId === null
    ) {
      return Promise.resolve();
    }
    this.inflight = this.doSubmit().finally(() => {
      this.inflight = null;
    });
    return this.inflight;
  }

  /** Recover from a banner: re-start if no session yet, else re-submit. */
  async retry(): Promise<void> {
    if (this.model.phase === "error" && this.model.sessionId === null && this.lastStart !== null) {
      await this.start(this.lastStart);
      return;
    }
    if (this.model.phase === "awaiting_feedback" && this.model.connectionError !== null) {
      await this.submit();
    }
  }

  /** Re-read the server snapshot and adopt it (used after a 409). */
  async refresh(): Promise<void> {
    await this.adoptSnapshot();
    this.emit();
  }

  private async doSubmit(): Promise<void> {
    const turn = this.model.turn as Turn;
    const sessionId = this.model.sessionId as string;
    if (this.pendingToken === null) this.pendingToken = this.newToken();
    const token = this.pendingToken;
    const body = this.buildBody(turn);
    this.model.phase = "submitting";
    this.model.formError = null;
    this.model.connectionError = null;
    this.emit();
    try {
      const result = await this.api.postFeedback(sessionId, body, token);
      this.pendingToken = null;
      this.applyOutcome(turn, result);
    } catch (err) {
      if (err instanceof ApiError && err.status === 422) {
        // rejected before any server-side state change; keep the token
        this.model.phase = "awaiting_feedback";
        this.model.formError = err.detail;
      } else if (err instanceof ApiError && err.status === 409) {
        // finished under us; the server view is authoritative
        await this.adoptSnapshot();
      } else {
        // no confirmed application; keep the token so a retry replays
        this.model.phase = "awaiting_feedback";
        this.model.connectionError = err instanceof Error ? err.message : String(err);
      }
    }
    this.emit();
  }

  private buildBody(turn: Turn): FeedbackBody {
    if (turn.kind === "RECOMMEND") {
      const items: Record<number, Verdict> = {};
      for (const card of turn.slots) {
        items[card.slot] = this.model.itemVerdicts[card.slot] ?? "IGNORE";
      }
      return { items, satisfied: this.model.satisfied };
    }
    const attributes: Record<number, Verdict> = {};
    const categories: Record<number, Verdict> = {};
    for (const card of turn.slots) {
      attributes[card.slot] = this.model.attributeVerdicts[card.slot] ?? "IGNORE";
      categories[card.slot] = this.model.categoryVerdicts[card.slot] ?? "IGNORE";
    }
    return { attributes, categories };
  }

  private applyOutcome(turn: Turn, result: FeedbackResult): void {
    // mirror the environment's bookkeeping so the rendered state can be
    // compared against GET /sessions/{id} at any point
    if (turn.kind === "RECOMMEND") {
      const accepted = turn.slots
        .filter((card) => (this.model.itemVerdicts[card.slot] ?? "IGNORE") === "ACCEPT")
        .map((card) => card.item);
      const bundle = new Set(this.model.acceptedBundle);
      for (const item of accepted) bundle.add(item);
      this.model.acceptedBundle = [...bundle].sort((a, b) => a - b);
      const outcome = this.model.satisfied
        ? "BUNDLE_SUC"
        : accepted.length > 0
          ? "REC_SUC"
          : "REC_FAIL";
      this.model.resultLog = [...this.model.resultLog, outcome];
    } else {
      const anyAccept = turn.slots.some(
        (card) =>
          (this.model.attributeVerdicts[card.slot] ?? "IGNORE") === "ACCEPT" ||
          (this.model.categoryVerdicts[card.slot] ?? "IGNORE") === "ACCEPT",
      );
      this.model.resultLog = [...this.model.resultLog, anyAccept ? "ASK_SUC" : "ASK_FAIL"];
    }
    if (result.done) {
      // the closing summary is authoritative
      this.model.summary = result.summary;
      this.model.acceptedBundle = [...result.summary.accepted_bundle];
      this.model.resultLog = [...result.summary.result_log];
      this.model.turn = null;
      this.model.phase = "finished";
    } else {
      this.applyTurn(result.turn);
    }
  }

  private applyTurn(turn: Turn): void {
    this.model.turn = turn;
    this.model.itemVerdicts = {};
    this.model.attributeVerdicts = {};
    this.model.categoryVerdicts = {};
    for (const card of turn.slots) {
      if (turn.kind === "RECOMMEND") {
        this.model.itemVerdicts[card.slot] = "IGNORE";
      } else {
        this.model.attributeVerdicts[card.slot] = "IGNORE";
        this.model.categoryVerdicts[card.slot] = "IGNORE";
      }
    }
    this.model.satisfied = false;
    this.model.formError = null;
    this.model.phase = "awaiting_feedback";
  }

  private async adoptSnapshot(): Promise<void> {
    if (this.model.sessionId === null) return;
    const snap = await this.api.getSession(this.model.sessionId);
    this.model.acceptedBundle = [...snap.accepted_bundle];
    this.model.resultLog = [...snap.result_log];
    this.model.summary = snap.summary;
    this.model.connectionError = null;
    if (snap.done || snap.pending_turn === null) {
      this.model.turn = null;
      this.model.phase = "finished";
    } else {
      this.applyTurn(snap.pending_turn);
    }
  }

  private newToken(): string {
    this.tokenSeq += 1;
    const noise = Math.random().toString(36).slice(2, 10);
    return `tok-${Date.now().toString(36)}-${this.tokenSeq}-${noise}`;
  }
}
