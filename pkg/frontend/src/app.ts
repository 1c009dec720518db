/** The operator console: run list, plan DAG, approval queue, live event feed.
 *
 * Stateless with respect to truth — every render is derived from API reads
 * plus the contiguous event feed; submitting an approval resolution is the
 * only write. Refreshing the page reproduces the same view from the API.
 */

import { ConsoleApi } from "./api.js";
import {
  buildPlanGraph,
  renderPlanGraphHtml,
  renderSchemaErrorHtml,
  statusColor,
} from "./graph.js";
import { subscribe } from "./sse.js";
import type { Approval, EventRecord, PlanDoc, RunSummary } from "./types.js";

export interface ConsoleViewModel {
  runs: RunSummary[];
  selectedRunId: string | null;
  phase: string;
  plan: PlanDoc | null;
  statuses: Record<string, string>;
  pendingApprovals: Approval[];
  feed: EventRecord[];
  banner: string | null;
  error: string | null;
}

export function emptyViewModel(): ConsoleViewModel {
  return {
    runs: [],
    selectedRunId: null,
    phase: "planning",
    plan: null,
    statuses: {},
    pendingApprovals: [],
    feed: [],
    banner: null,
    error: null,
  };
}

/** Fold one feed event into the view model (pure; used by tests and the UI). */
export function applyFeedEvent(model: ConsoleViewModel, event: EventRecord): ConsoleViewModel {
  const feed = [...model.feed, event];
  const statuses = { ...model.statuses };
  const payload = event.payload as Record<string, any>;
  let plan = model.plan;
  let banner = model.banner;
  let phase = model.phase;

  switch (event.kind) {
    case "plan_proposed":
    case "plan_refined":
    case "plan_replaced":
      plan = payload["plan"] as PlanDoc;
      for (const step of plan.steps) statuses[step.id] = "pending";
      phase = "verifying";
      break;
    case "plan_approved":
      phase = "executing";
      break;
    case "plan_rejected":
    case "replan_started":
      phase = "replanning";
      break;
    case "step_ready":
      statuses[payload["step_id"]] = "ready";
      break;
    case "step_started":
      statuses[payload["step_id"]] = "running";
      break;
    case "step_succeeded":
      statuses[payload["step_id"]] = "succeeded";
      break;
    case "step_failed":
      statuses[payload["step_id"]] = "failed";
      break;
    case "fallback_activated":
      banner = `fallback: ${payload["failed_step"]} → ${payload["target"]}`;
      break;
    case "approval_requested":
      if (payload["subject_kind"] === "step") {
        statuses[payload["subject"]] = "awaiting_approval";
      } else {
        phase = "awaiting_plan_approval";
      }
      break;
    case "run_completed":
      phase = "completed";
      banner = "run completed";
      break;
    case "run_aborted":
      phase = "aborted";
      banner = `run aborted: ${payload["reason"] ?? ""}`;
      break;
  }
  return { ...model, feed, statuses, plan, banner, phase };
}

export function renderApprovalQueueHtml(approvals: Approval[]): string {
  if (approvals.length === 0) {
    return `<div class="approval-queue empty">No pending approvals</div>`;
  }
  const items = approvals
    .map(
      (a) =>
        `<li class="approval" data-approval="${a.approval_id}">` +
        `<span class="subject-kind">${a.subject_kind}</span> ` +
        `<span class="summary">${escapeText(a.summary)}</span>` +
        `<button data-action="approve" data-approval="${a.approval_id}">Approve</button>` +
        `<button data-action="reject" data-approval="${a.approval_id}">Reject</button>` +
        `</li>`,
    )
    .join("");
  return `<ul class="approval-queue">${items}</ul>`;
}

export function renderFeedHtml(feed: EventRecord[]): string {
  const rows = feed
    .map(
      (event) =>
        `<li class="feed-event kind-${event.kind}" data-seq="${event.seq}">` +
        `<span class="seq">#${event.seq}</span> ` +
        `<span class="kind" style="color: ${feedColor(event.kind)}">${event.kind}</span>` +
        `</li>`,
    )
    .join("");
  return `<ol class="event-feed">${rows}</ol>`;
}

function feedColor(kind: string): string {
  if (kind.startsWith("step_")) return statusColor(kind.replace("step_", ""));
  if (kind === "run_completed") return statusColor("succeeded");
  if (kind === "run_aborted" || kind === "tool_denied") return statusColor("failed");
  return "#8888a0";
}

function escapeText(text: string): string {
  return text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

export function renderConsoleHtml(model: ConsoleViewModel): string {
  let graphHtml: string;
  try {
    graphHtml = model.plan
      ? renderPlanGraphHtml(buildPlanGraph(model.plan, model.statuses))
      : `<div class="no-plan">No plan yet</div>`;
  } catch (error) {
    graphHtml = renderSchemaErrorHtml(error);
  }
  const runs = model.runs
    .map(
      (run) =>
        `<li class="run phase-${run.phase}" data-run="${run.run_id}">` +
        `${escapeText(run.run_id)} — ${run.phase}</li>`,
    )
    .join("");
  const banner = model.banner
    ? `<div class="banner">${escapeText(model.banner)}</div>`
    : "";
  const error = model.error
    ? `<div class="inline-error">${escapeText(model.error)}</div>`
    : "";
  const phase = model.selectedRunId
    ? `<div class="run-phase phase-${model.phase}">` +
      `${escapeText(model.selectedRunId)}: ${model.phase}</div>`
    : "";
  return (
    `<div class="console">` +
    banner +
    error +
    phase +
    `<ul class="run-list">${runs}</ul>` +
    graphHtml +
    renderApprovalQueueHtml(model.pendingApprovals) +
    renderFeedHtml(model.feed) +
    `</div>`
  );
}

/** Browser bootstrap: render into #app and keep it live off the event feed. */
export async function mountConsole(root: HTMLElement, api: ConsoleApi): Promise<void> {
  let model = emptyViewModel();
  const draw = () => {
    root.innerHTML = renderConsoleHtml(model);
    for (const button of root.querySelectorAll<HTMLButtonElement>("button[data-action]")) {
      button.addEventListener("click", async () => {
        const approvalId = button.dataset["approval"]!;
        const decision = button.dataset["action"] as "approve" | "reject";
        try {
          await api.resolveApproval(approvalId, { decision, actor: "console" });
          model = { ...model, error: null };
        } catch (error) {
          // optimistic UI rollback: surface the failure inline, state untouched
          model = { ...model, error: error instanceof Error ? error.message : String(error) };
        }
        await refresh();
      });
    }
    for (const item of root.querySelectorAll<HTMLLIElement>("li.run[data-run]")) {
      item.addEventListener("click", () => selectRun(item.dataset["run"]!));
    }
  };

  const refresh = async () => {
    model = { ...model, runs: await api.listRuns(), pendingApprovals: await api.listPendingApprovals() };
    draw();
  };

  let feedAbort: AbortController | null = null;
  const selectRun = async (runId: string) => {
    feedAbort?.abort();
    feedAbort = new AbortController();
    model = { ...emptyViewModel(), runs: model.runs, selectedRunId: runId };
    model.pendingApprovals = await api.listPendingApprovals();
    draw();
    void subscribe(
      (fromSeq) => api.openEventStream(runId, fromSeq),
      (event) => {
        model = applyFeedEvent(model, event);
        draw();
      },
      { signal: feedAbort.signal },
    ).then(refresh);
  };

  await refresh();
}

declare global {
  interface Window {
    planexecConsole?: { mount: typeof mountConsole; ConsoleApi: typeof ConsoleApi };
  }
}

if (typeof window !== "undefined") {
  window.planexecConsole = { mount: mountConsole, ConsoleApi };
}
