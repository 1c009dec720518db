/** Thin typed client over the engine's HTTP API.
 *
 * The console never mutates run state client-side: every view is re-derivable
 * from these reads, and approval resolution is the only write path.
 */

import type {
  Approval,
  EventRecord,
  PlanDoc,
  RunSnapshot,
  RunSummary,
  TraceEntry,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export interface StartRunRequest {
  objective: string;
  mode?: string;
  run_id?: string;
  plan?: PlanDoc;
  step_programs?: Record<string, Array<{ tool: string; args: Record<string, string> }>>;
  hierarchical?: boolean;
}

export interface ResolveApprovalRequest {
  decision: "approve" | "reject";
  actor?: string;
  note?: string;
  replacement_plan?: PlanDoc;
}

export class ConsoleApi {
  constructor(
    readonly baseUrl: string,
    private readonly token?: string,
  ) {}

  private headers(json: boolean): Record<string, string> {
    const headers: Record<string, string> = {};
    if (json) headers["content-type"] = "application/json";
    if (this.token) headers["authorization"] = `Bearer ${this.token}`;
    return headers;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = (await response.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        /* non-JSON error body: keep the status text */
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  startRun(request: StartRunRequest): Promise<RunSummary> {
    return this.request("/runs", {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify(request),
    });
  }

  listRuns(): Promise<RunSummary[]> {
    return this.request("/runs", { headers: this.headers(false) });
  }

  getRun(runId: string): Promise<RunSummary> {
    return this.request(`/runs/${encodeURIComponent(runId)}`, {
      headers: this.headers(false),
    });
  }

  getState(runId: string): Promise<RunSnapshot> {
    return this.request(`/runs/${encodeURIComponent(runId)}/state`, {
      headers: this.headers(false),
    });
  }

  getPlan(runId: string): Promise<PlanDoc> {
    return this.request(`/runs/${encodeURIComponent(runId)}/plan`, {
      headers: this.headers(false),
    });
  }

  getTrace(runId: string): Promise<TraceEntry[]> {
    return this.request(`/runs/${encodeURIComponent(runId)}/trace`, {
      headers: this.headers(false),
    });
  }

  listPendingApprovals(): Promise<Approval[]> {
    return this.request("/approvals?pending=true", { headers: this.headers(false) });
  }

  resolveApproval(approvalId: string, request: ResolveApprovalRequest): Promise<RunSummary> {
    return this.request(`/approvals/${encodeURIComponent(approvalId)}:resolve`, {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify(request),
    });
  }

  /** Raw streaming response for the run's server-sent event feed. */
  openEventStream(runId: string, fromSeq = 0): Promise<Response> {
    const path = `/runs/${encodeURIComponent(runId)}/events?from=${fromSeq}`;
    return fetch(`${this.baseUrl}${path}`, { headers: this.headers(false) });
  }
}

export type { EventRecord };
