/**
 * Typed client for the run-store HTTP API. Every number shown in the UI
 * comes from these payloads; the client never recomputes scores, rankings,
 * or entropy.
 */

export interface AttributeRef {
  table: string;
  attribute: string;
}

export interface RunSummary {
  run_id: string;
  status: string;
  created_at: string;
}

export interface CandidateRow {
  letter: string;
  target: AttributeRef;
  key: string;
  description: string;
  score: number;
}

export interface DeferredItem {
  query: AttributeRef & { text: string };
  entropy: number;
  abstained: boolean;
  candidates: CandidateRow[];
}

export interface DeferredResponse {
  p: number;
  items: DeferredItem[];
}

export interface TargetAttribute {
  table: string;
  attribute: string;
  key: string;
  description: string;
}

export interface DecisionPayload {
  query: AttributeRef;
  decision:
    | { kind: "accept_top1" }
    | { kind: "no_match" }
    | { kind: "choose"; target: AttributeRef };
  reviewer?: string;
  overwrite?: boolean;
}

export interface RunRecord {
  run_id: string;
  status: string;
  created_at: string;
  error: string | null;
  has_gold: boolean;
  run: { queries: unknown[] } | null;
  decisions: Array<{ query: AttributeRef; kind: string }>;
  target_attributes: TargetAttribute[];
}

export interface MetricsPayload {
  n_queries: number;
  n_abstained: number;
  n_decided: number;
  with_decisions: boolean;
  accuracy_at?: Record<string, number>;
  entropy_histogram?: { bin_edges: number[]; counts: number[] };
  warnings: Record<string, number>;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      let code = "http_error";
      let message = `${response.status}`;
      try {
        const body = (await response.json()) as {
          error?: { code?: string; message?: string };
        };
        code = body.error?.code ?? code;
        message = body.error?.message ?? message;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, code, message);
    }
    return (await response.json()) as T;
  }

  listRuns(): Promise<RunSummary[]> {
    return this.request<RunSummary[]>("/api/v1/runs");
  }

  getRun(runId: string): Promise<RunRecord> {
    return this.request<RunRecord>(`/api/v1/runs/${runId}`);
  }

  getDeferred(runId: string, p: number): Promise<DeferredResponse> {
    return this.request<DeferredResponse>(
      `/api/v1/runs/${runId}/deferred?p=${p}`,
    );
  }

  submitDecision(
    runId: string,
    payload: DecisionPayload,
  ): Promise<{ ok: boolean; effective_target: AttributeRef | null }> {
    return this.request(`/api/v1/runs/${runId}/decisions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  getMetrics(runId: string, withDecisions: boolean): Promise<MetricsPayload> {
    return this.request<MetricsPayload>(
      `/api/v1/runs/${runId}/metrics?with_decisions=${withDecisions}`,
    );
  }
}
