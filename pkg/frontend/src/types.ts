/** Documents the service API exchanges; mirrors the engine's JSON shapes. */

export interface PlanStepDoc {
  id: string;
  task: string;
  role: string;
  depends_on: string[];
  risk: "low" | "high";
  tools?: string[];
  on_failure?: { goto: string; max_activations: number };
  isolation?: string;
  agent?: string;
}

export interface PlanDoc {
  plan_id: string;
  objective: string;
  version: number;
  steps: PlanStepDoc[];
}

export interface RunSummary {
  run_id: string;
  objective: string;
  phase: string;
  mode: string;
  plan_version: number | null;
  pending_approvals: number;
  last_seq: number;
}

export interface RunSnapshot extends Record<string, unknown> {
  run_id: string;
  phase: string;
  plan: PlanDoc | null;
  statuses: Record<string, string>;
  last_seq: number;
}

export interface Approval {
  approval_id: string;
  run_id: string;
  subject_kind: "plan" | "step";
  subject: string;
  summary: string;
  created_ts: number;
  resolution: { decision: string; actor: string; note: string; ts: number } | null;
}

export interface EventRecord {
  seq: number;
  ts: number;
  kind: string;
  payload: Record<string, unknown>;
}

/** One (plan version, step id, tool) entry of the control-flow trace. */
export type TraceEntry = [number, string, string];

export interface PolicyViolation {
  kind: string;
  step_id: string;
  detail: string;
}
