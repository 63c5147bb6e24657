/**
 * Typed client for the bundle session service HTTP API.
 *
 * Endpoints: POST /sessions, POST /sessions/{id}/feedback (Idempotency-Token
 * header), GET /sessions/{id}, DELETE /sessions/{id}, GET /healthz. All
 * bodies are JSON; errors carry a {"detail": ...} payload.
 */

export type Verdict = "ACCEPT" | "REJECT" | "IGNORE";

/** One proposed item; the card carries the item's tags for display. */
export interface RecommendSlotCard {
  slot: number;
  item: number;
  attrs: number[];
  cats: number[];
  item_label?: string;
}

/** One (attribute, category) question pair for a slot. */
export interface AskSlotCard {
  slot: number;
  attr: number;
  cat: number;
  attr_label?: string;
  cat_label?: string;
}

export interface RecommendTurn {
  kind: "RECOMMEND";
  round: number;
  slots: RecommendSlotCard[];
}

export interface AskTurn {
  kind: "ASK";
  round: number;
  slots: AskSlotCard[];
}

export type Turn = RecommendTurn | AskTurn;

export interface SessionSummary {
  reason: string;
  rounds: number;
  accepted_bundle: number[];
  result_log: string[];
  success: boolean;
  metrics: Record<string, number> | null;
}

export interface SessionCreated {
  session_id: string;
  user_id: number | string;
  policy: string;
  first_turn: Turn;
}

export type FeedbackResult =
  | { done: false; turn: Turn }
  | { done: true; summary: SessionSummary };

export interface ActiveSlotView {
  slot: number;
  accepted_attributes: number[];
  accepted_categories: number[];
}

export interface SessionSnapshot {
  session_id: string;
  user_id: number | string;
  policy: string;
  round: number;
  done: boolean;
  active_slots: ActiveSlotView[];
  accepted_bundle: number[];
  result_log: string[];
  trajectory: unknown[];
  pending_turn: Turn | null;
  summary: SessionSummary | null;
}

export interface StartRequest {
  user_id?: number | "fresh";
  policy?: string;
  checkpoint?: string;
  target?: number[];
  k?: number;
  max_rounds?: number;
}

/** Exactly one of items / (attributes + categories) per the pending turn. */
export interface FeedbackBody {
  items?: Record<number, Verdict>;
  attributes?: Record<number, Verdict>;
  categories?: Record<number, Verdict>;
  satisfied?: boolean;
  auto?: boolean;
}

/** status 0 means the service was unreachable (no HTTP response at all). */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(status === 0 ? detail : `HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

function asDetail(payload: unknown): string {
  if (typeof payload === "string") return payload;
  if (payload !== null && typeof payload === "object" && "detail" in payload) {
    const detail = (payload as { detail: unknown }).detail;
    return typeof detail === "string" ? detail : JSON.stringify(detail);
  }
  return JSON.stringify(payload);
}

export class ApiClient {
  private readonly baseUrl: string;
  private readonly fetchFn: FetchLike;

  constructor(baseUrl: string, fetchFn?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  health(): Promise<{ status: string; sessions: number }> {
    return this.request("GET", "/healthz");
  }

  createSession(req: StartRequest = {}): Promise<SessionCreated> {
    return this.request("POST", "/sessions", req);
  }

  postFeedback(
    sessionId: string,
    body: FeedbackBody,
    token: string,
  ): Promise<FeedbackResult> {
    return this.request("POST", `/sessions/${sessionId}/feedback`, body, {
      "Idempotency-Token": token,
    });
  }

  getSession(sessionId: string): Promise<SessionSnapshot> {
    return this.request("GET", `/sessions/${sessionId}`);
  }

  deleteSession(sessionId: string): Promise<{ deleted: string }> {
    return this.request("DELETE", `/sessions/${sessionId}`);
  }

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    headers: Record<string, string> = {},
  ): Promise<T> {
    const init: RequestInit = { method, headers: { ...headers } };
    if (body !== undefined) {
      (init.headers as Record<string, string>)["Content-Type"] = "application/json";
      init.body = JSON.stringify(body);
    }
    let res: Response;
    try {
      res = await this.fetchFn(this.baseUrl + path, init);
    } catch (err) {
      const why = err instanceof Error ? err.message : String(err);
      throw new ApiError(0, `service unreachable: ${why}`);
    }
    const text = await res.text();
    let payload: unknown = null;
    if (text !== "") {
      try {
        payload = JSON.parse(text);
      } catch {
        payload = text;
      }
    }
    if (!res.ok) throw new ApiError(res.status, asDetail(payload));
    return payload as T;
  }
}
