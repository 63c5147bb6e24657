/**
 * In-memory stand-in for the session service, speaking the documented HTTP
 * contract at the fetch level: same paths, bodies, status codes, idempotency
 * replay, and validation rules. Tests point an ApiClient at `fake.fetch`, so
 * the whole client stack is exercised over the real wire shapes.
 *
 * The turn schedule is deterministic (odd rounds recommend, even rounds ask,
 * unless overridden) and item ids are handed out sequentially, which keeps
 * expected states easy to compute in tests.
 */

import type {
  AskSlotCard,
  FeedbackBody,
  RecommendSlotCard,
  SessionSummary,
  StartRequest,
  Turn,
  Verdict,
} from "../src/api.js";

const POLICIES = ["random", "freq", "oracle", "fm-all", "fm-learn", "bunt-all", "bunt-learn"];
const VERDICTS: ReadonlySet<string> = new Set(["ACCEPT", "REJECT", "IGNORE"]);

export type TurnKind = "RECOMMEND" | "ASK";

class FakeHttpError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(detail);
  }
}

interface SlotState {
  id: number;
  active: boolean;
  acceptedItem: number | null;
  acceptedAttributes: Set<number>;
  acceptedCategories: Set<number>;
}

interface FakeSession {
  id: string;
  userId: number | string;
  policy: string;
  k: number;
  maxRounds: number;
  round: number;
  done: boolean;
  slots: Map<number, SlotState>;
  activeSlots: number[];
  bundle: number[];
  resultLog: string[];
  trajectory: Array<{ round: number; kind: TurnKind; result: string }>;
  pending: Turn | null;
  summary: SessionSummary | null;
  replays: Map<string, unknown>;
  itemSeq: number;
}

export interface FakeOptions {
  k?: number;
  nAttrs?: number;
  nCats?: number;
  /** Which kind of turn the policy produces at a given round. */
  kindFor?: (round: number) => TurnKind;
}

interface LoggedRequest {
  method: string;
  path: string;
  token: string | null;
  body: unknown;
}

function headerValue(init: RequestInit | undefined, name: string): string | null {
  const headers = init?.headers;
  if (headers === undefined) return null;
  if (headers instanceof Headers) return headers.get(name);
  if (Array.isArray(headers)) {
    const hit = headers.find(([key]) => key.toLowerCase() === name.toLowerCase());
    return hit !== undefined ? (hit[1] ?? null) : null;
  }
  const record = headers as Record<string, string>;
  for (const key of Object.keys(record)) {
    if (key.toLowerCase() === name.toLowerCase()) return record[key] ?? null;
  }
  return null;
}

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

export class FakeService {
  /** Number of state advances actually applied (replays do not count). */
  applied = 0;
  /** Every request seen, in order, for wire-level assertions. */
  requests: LoggedRequest[] = [];
  readonly fetch: (url: string, init?: RequestInit) => Promise<Response>;

  private sessions = new Map<string, FakeSession>();
  private seq = 0;
  private readonly k: number;
  private readonly nAttrs: number;
  private readonly nCats: number;
  private readonly kindFor: (round: number) => TurnKind;

  constructor(options: FakeOptions = {}) {
    this.k = options.k ?? 2;
    this.nAttrs = options.nAttrs ?? 6;
    this.nCats = options.nCats ?? 3;
    this.kindFor = options.kindFor ?? ((round) => (round % 2 === 1 ? "RECOMMEND" : "ASK"));
    this.fetch = (url, init) => this.route(url, init);
  }

  private async route(url: string, init?: RequestInit): Promise<Response> {
    const method = (init?.method ?? "GET").toUpperCase();
    const path = new URL(url, "http://fake.test").pathname;
    const token = headerValue(init, "Idempotency-Token");
    const body: unknown = typeof init?.body === "string" ? JSON.parse(init.body) : null;
    this.requests.push({ method, path, token, body });
    try {
      if (method === "GET" && path === "/healthz") {
        return jsonResponse(200, { status: "ok", sessions: this.sessions.size });
      }
      if (method === "POST" && path === "/sessions") {
        return this.createSession((body ?? {}) as StartRequest);
      }
      const feedback = path.match(/^\/sessions\/([^/]+)\/feedback$/);
      if (method === "POST" && feedback !== null) {
        return this.postFeedback(feedback[1] as string, (body ?? {}) as FeedbackBody, token);
      }
      const single = path.match(/^\/sessions\/([^/]+)$/);
      if (single !== null && method === "GET") {
        return jsonResponse(200, this.snapshot(this.session(single[1] as string)));
      }
      if (single !== null && method === "DELETE") {
        const id = single[1] as string;
        this.session(id);
        this.sessions.delete(id);
        return jsonResponse(200, { deleted: id });
      }
      throw new FakeHttpError(404, "not found");
    } catch (err) {
      if (err instanceof FakeHttpError) return jsonResponse(err.status, { detail: err.detail });
      throw err;
    }
  }

  private session(id: string): FakeSession {
    const found = this.sessions.get(id);
    if (found === undefined) throw new FakeHttpError(404, `no session '${id}'`);
    return found;
  }

  private createSession(body: StartRequest): Response {
    const policy = body.policy ?? "bunt-learn";
    if (!POLICIES.includes(policy)) {
      throw new FakeHttpError(
        422,
        `unknown policy '${policy}'; choose one of ${POLICIES.join(", ")}`,
      );
    }
    const k = body.k ?? this.k;
    const session: FakeSession = {
      id: `fake-${++this.seq}`,
      userId: body.user_id ?? "fresh",
      policy,
      k,
      maxRounds: body.max_rounds ?? 10,
      round: 1,
      done: false,
      slots: new Map(),
      activeSlots: [],
      bundle: [],
      resultLog: [],
      trajectory: [],
      pending: null,
      summary: null,
      replays: new Map(),
      itemSeq: 0,
    };
    for (let slot = 0; slot < k; slot++) {
      session.slots.set(slot, {
        id: slot,
        active: true,
        acceptedItem: null,
        acceptedAttributes: new Set(),
        acceptedCategories: new Set(),
      });
      session.activeSlots.push(slot);
    }
    session.pending = this.makeTurn(session);
    this.sessions.set(session.id, session);
    return jsonResponse(201, {
      session_id: session.id,
      user_id: session.userId,
      policy: session.policy,
      first_turn: session.pending,
    });
  }

  private makeTurn(session: FakeSession): Turn {
    const kind = this.kindFor(session.round);
    if (kind === "RECOMMEND") {
      const slots: RecommendSlotCard[] = session.activeSlots.map((slot) => {
        const item = session.itemSeq++;
        const attrs = [...new Set([item % this.nAttrs, (item + 1) % this.nAttrs])].sort(
          (a, b) => a - b,
        );
        return { slot, item, attrs, cats: [item % this.nCats] };
      });
      return { kind: "RECOMMEND", round: session.round, slots };
    }
    const slots: AskSlotCard[] = session.activeSlots.map((slot, at) => ({
      slot,
      attr: (session.round * 2 + at) % this.nAttrs,
      cat: (session.round + at) % this.nCats,
    }));
    return { kind: "ASK", round: session.round, slots };
  }

  private parseVerdicts(
    raw: Record<number, string> | undefined,
    session: FakeSession,
    kindName: string,
  ): Map<number, Verdict> {
    if (raw === undefined || raw === null) {
      throw new FakeHttpError(422, `${kindName} verdicts are required for this turn`);
    }
    const parsed = new Map<number, Verdict>();
    for (const [slotKey, value] of Object.entries(raw)) {
      const verdict = String(value).toUpperCase();
      if (!VERDICTS.has(verdict)) {
        throw new FakeHttpError(422, `'${String(value)}' is not a valid Verdict`);
      }
      parsed.set(Number(slotKey), verdict as Verdict);
    }
    const active = [...session.activeSlots].sort((a, b) => a - b);
    const covered = [...parsed.keys()].sort((a, b) => a - b);
    if (active.length !== covered.length || active.some((slot, at) => slot !== covered[at])) {
      throw new FakeHttpError(
        422,
        `${kindName} verdicts must cover exactly the active slots [${active.join(", ")}]`,
      );
    }
    return parsed;
  }

  private postFeedback(id: string, body: FeedbackBody, token: string | null): Response {
    const session = this.session(id);
    if (token === null) {
      throw new FakeHttpError(422, "missing Idempotency-Token header");
    }
    if (session.replays.has(token)) {
      return jsonResponse(200, session.replays.get(token));
    }
    if (session.done) throw new FakeHttpError(409, "session already finished");
    const turn = session.pending as Turn;
    let result: string;
    let satisfied = false;
    if (turn.kind === "RECOMMEND") {
      if (body.attributes != null || body.categories != null) {
        throw new FakeHttpError(
          422,
          "this turn proposed items; send item verdicts, not tag verdicts",
        );
      }
      const items = this.parseVerdicts(body.items, session, "item");
      for (const verdict of items.values()) {
        if (verdict === "REJECT") {
          throw new FakeHttpError(422, "items take ACCEPT/IGNORE verdicts only");
        }
      }
      satisfied = body.satisfied === true;
      let anyAccept = false;
      for (const card of turn.slots) {
        if (items.get(card.slot) === "ACCEPT") {
          anyAccept = true;
          const slot = session.slots.get(card.slot) as SlotState;
          slot.active = false;
          slot.acceptedItem = card.item;
          session.bundle.push(card.item);
        }
      }
      result = satisfied ? "BUNDLE_SUC" : anyAccept ? "REC_SUC" : "REC_FAIL";
    } else {
      if (body.items != null) {
        throw new FakeHttpError(
          422,
          "this turn asked questions; send tag verdicts, not item verdicts",
        );
      }
      const attrs = this.parseVerdicts(body.attributes, session, "attribute");
      const cats = this.parseVerdicts(body.categories, session, "category");
      let anyAccept = false;
      for (const card of turn.slots) {
        const slot = session.slots.get(card.slot) as SlotState;
        if (attrs.get(card.slot) === "ACCEPT") {
          anyAccept = true;
          slot.acceptedAttributes.add(card.attr);
        }
        if (cats.get(card.slot) === "ACCEPT") {
          anyAccept = true;
          slot.acceptedCategories.add(card.cat);
        }
      }
      result = anyAccept ? "ASK_SUC" : "ASK_FAIL";
    }

    session.resultLog.push(result);
    session.trajectory.push({ round: session.round, kind: turn.kind, result });
    session.round += 1;
    session.activeSlots = session.activeSlots.filter(
      (slot) => (session.slots.get(slot) as SlotState).active,
    );
    const done = satisfied || session.round > session.maxRounds;
    this.applied += 1;

    let response: unknown;
    if (done) {
      session.done = true;
      session.pending = null;
      session.summary = {
        reason: "finished",
        rounds: session.round - 1,
        accepted_bundle: [...session.bundle].sort((a, b) => a - b),
        result_log: [...session.resultLog],
        success: session.resultLog[session.resultLog.length - 1] === "BUNDLE_SUC",
        metrics: null,
      };
      response = { done: true, summary: session.summary };
    } else {
      while (session.activeSlots.length < session.k) {
        const nextId = Math.max(...session.slots.keys()) + 1;
        session.slots.set(nextId, {
          id: nextId,
          active: true,
          acceptedItem: null,
          acceptedAttributes: new Set(),
          acceptedCategories: new Set(),
        });
        session.activeSlots.push(nextId);
      }
      session.pending = this.makeTurn(session);
      response = { done: false, turn: session.pending };
    }
    session.replays.set(token, response);
    return jsonResponse(200, response);
  }

  private snapshot(session: FakeSession): unknown {
    return {
      session_id: session.id,
      user_id: session.userId,
      policy: session.policy,
      round: session.round,
      done: session.done,
      active_slots: session.activeSlots.map((id) => {
        const slot = session.slots.get(id) as SlotState;
        return {
          slot: id,
          accepted_attributes: [...slot.acceptedAttributes].sort((a, b) => a - b),
          accepted_categories: [...slot.acceptedCategories].sort((a, b) => a - b),
        };
      }),
      accepted_bundle: [...session.bundle].sort((a, b) => a - b),
      result_log: [...session.resultLog],
      trajectory: [...session.trajectory],
      pending_turn: session.pending,
      summary: session.summary,
    };
  }
}
