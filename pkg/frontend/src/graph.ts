/** Plan document → renderable DAG view model.
 *
 * Nodes carry role / tool / risk badges (and policy violation badges when the
 * caller supplies them); dependency edges are solid, fallback edges dashed.
 * Layout is a simple dependency-depth leveling: steps at the same depth share
 * a column, matching the engine's wave scheduling.
 */

import type { PlanDoc, PlanStepDoc, PolicyViolation } from "./types.js";

export interface GraphNode {
  id: string;
  task: string;
  role: string;
  tools: string[];
  risk: "low" | "high";
  status: string;
  level: number;
  violations: string[];
}

export interface GraphEdge {
  from: string;
  to: string;
  kind: "dependency" | "fallback";
  dashed: boolean;
}

export interface PlanGraph {
  planId: string;
  version: number;
  objective: string;
  nodes: GraphNode[];
  edges: GraphEdge[];
  /** Steps grouped by dependency depth, each group sorted by id. */
  levels: string[][];
}

export class PlanSchemaError extends Error {}

function requireSteps(plan: PlanDoc): PlanStepDoc[] {
  if (!plan || !Array.isArray(plan.steps) || plan.steps.length === 0) {
    throw new PlanSchemaError("plan document has no steps");
  }
  const ids = new Set<string>();
  for (const step of plan.steps) {
    if (!step.id || !step.role) {
      throw new PlanSchemaError(`step is missing id or role: ${JSON.stringify(step)}`);
    }
    if (ids.has(step.id)) throw new PlanSchemaError(`duplicate step id ${step.id}`);
    ids.add(step.id);
  }
  for (const step of plan.steps) {
    for (const dep of step.depends_on ?? []) {
      if (!ids.has(dep)) {
        throw new PlanSchemaError(`step ${step.id} depends on unknown step ${dep}`);
      }
    }
    if (step.on_failure && !ids.has(step.on_failure.goto)) {
      throw new PlanSchemaError(
        `step ${step.id} falls back to unknown step ${step.on_failure.goto}`,
      );
    }
  }
  return plan.steps;
}

function levelOf(
  stepId: string,
  byId: Map<string, PlanStepDoc>,
  memo: Map<string, number>,
): number {
  const known = memo.get(stepId);
  if (known !== undefined) return known;
  memo.set(stepId, 0); // guard against malformed cycles: treated as roots
  const step = byId.get(stepId)!;
  const deps = step.depends_on ?? [];
  const level = deps.length
    ? 1 + Math.max(...deps.map((d) => levelOf(d, byId, memo)))
    : 0;
  memo.set(stepId, level);
  return level;
}

export function buildPlanGraph(
  plan: PlanDoc,
  statuses: Record<string, string> = {},
  violations: PolicyViolation[] = [],
): PlanGraph {
  const steps = requireSteps(plan);
  const byId = new Map(steps.map((s) => [s.id, s]));
  const memo = new Map<string, number>();
  const violationsByStep = new Map<string, string[]>();
  for (const violation of violations) {
    const existing = violationsByStep.get(violation.step_id) ?? [];
    existing.push(violation.kind);
    violationsByStep.set(violation.step_id, existing);
  }

  const nodes: GraphNode[] = steps.map((step) => ({
    id: step.id,
    task: step.task,
    role: step.role,
    tools: step.tools ?? [],
    risk: step.risk ?? "low",
    status: statuses[step.id] ?? "pending",
    level: levelOf(step.id, byId, memo),
    violations: violationsByStep.get(step.id) ?? [],
  }));

  const edges: GraphEdge[] = [];
  for (const step of steps) {
    for (const dep of step.depends_on ?? []) {
      edges.push({ from: dep, to: step.id, kind: "dependency", dashed: false });
    }
    if (step.on_failure) {
      edges.push({
        from: step.id,
        to: step.on_failure.goto,
        kind: "fallback",
        dashed: true,
      });
    }
  }

  const levels: string[][] = [];
  for (const node of nodes) {
    (levels[node.level] ??= []).push(node.id);
  }
  for (const group of levels) group.sort();

  return {
    planId: plan.plan_id,
    version: plan.version,
    objective: plan.objective,
    nodes,
    edges,
    levels,
  };
}

const STATUS_COLOR: Record<string, string> = {
  pending: "#8888a0",
  ready: "#3b82f6",
  awaiting_approval: "#eab308",
  running: "#06b6d4",
  succeeded: "#22c55e",
  failed: "#ef4444",
  skipped: "#6b7280",
};

export function statusColor(status: string): string {
  return STATUS_COLOR[status] ?? "#8888a0";
}

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Static HTML rendering of the graph: one column per dependency level. */
export function renderPlanGraphHtml(graph: PlanGraph): string {
  const nodesById = new Map(graph.nodes.map((n) => [n.id, n]));
  const columns = graph.levels
    .map((group) => {
      const cards = group
        .map((id) => {
          const node = nodesById.get(id)!;
          const badges = [
            `<span class="badge role">${escapeHtml(node.role)}</span>`,
            ...node.tools.map(
              (tool) => `<span class="badge tool">${escapeHtml(tool)}</span>`,
            ),
            `<span class="badge risk-${node.risk}">${node.risk} risk</span>`,
            ...node.violations.map(
              (kind) => `<span class="badge violation">${escapeHtml(kind)}</span>`,
            ),
          ].join("");
          return (
            `<div class="step-node status-${escapeHtml(node.status)}" data-step="${escapeHtml(node.id)}"` +
            ` style="border-color: ${statusColor(node.status)}">` +
            `<div class="step-id">${escapeHtml(node.id)}</div>` +
            `<div class="step-task">${escapeHtml(node.task)}</div>` +
            `<div class="step-badges">${badges}</div>` +
            `</div>`
          );
        })
        .join("");
      return `<div class="graph-column">${cards}</div>`;
    })
    .join("");

  const edgeList = graph.edges
    .map((edge) => {
      const cls = edge.dashed ? "edge fallback dashed" : "edge dependency";
      const arrow = edge.kind === "fallback" ? "⇢" : "→";
      return (
        `<li class="${cls}" data-from="${escapeHtml(edge.from)}" data-to="${escapeHtml(edge.to)}">` +
        `${escapeHtml(edge.from)} ${arrow} ${escapeHtml(edge.to)}</li>`
      );
    })
    .join("");

  return (
    `<div class="plan-graph" data-plan="${escapeHtml(graph.planId)}" data-version="${graph.version}">` +
    `<div class="graph-columns">${columns}</div>` +
    `<ul class="graph-edges">${edgeList}</ul>` +
    `</div>`
  );
}

/** Error panel shown instead of the graph when the document is malformed. */
export function renderSchemaErrorHtml(error: unknown): string {
  const message = error instanceof Error ? error.message : String(error);
  return `<div class="schema-error-panel">Plan document rejected: ${escapeHtml(message)}</div>`;
}
