"""The run state machine:

    Plan → (Verify → Refine)* → [plan gate] → Execute waves
         → (Fallback | Replan | Approve)* → Complete

Event-sourced: every state mutation flows through apply_event over an
append-only, gapless per-run event log (write-ahead: the event is durably
persisted before the state changes). Replaying the log reproduces the state
byte-identically.

Control-flow integrity: the plan is frozen before any tool output is ingested;
executed (step, tool) pairs are always pairs the active plan version declared,
no matter what content tools return.
"""

from __future__ import annotations

import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from . import reasoners
from .errors import (
    AlreadyResolved,
    ApprovalPending,
    ConfigError,
    EmptyGrant,
    MalformedPlanOutput,
    PlanExecError,
    RefinementExhausted,
    ReplanLimitExceeded,
    RoleUnknown,
    ToolDenied,
    ToolFailed,
    UnknownApproval,
    UnknownRun,
    WeakeningForbidden,
)
from .plan import (
    IsolationTier,
    Plan,
    PlanStep,
    StepStatus,
    apply_fallback,
    parse_plan,
    ready_steps,
    serialize_plan,
    tier_rank,
)
from .policy import PolicySet, effective_tools, isolation_for
from .reasoners import Backend, ScriptedBackend
from .sandbox import SandboxManager
from .store import MemoryEventStore
from .tools import (
    FilterConfig,
    DEFAULT_FILTER_CONFIG,
    HIGH_RISK_SIDE_EFFECTS,
    Taint,
    TaintedText,
    ToolContext,
    ToolRegistry,
    builtin_registry,
    filter_output,
    sanitize_input,
    trusted,
)

EVENT_KINDS = frozenset(
    {
        "run_started", "plan_proposed", "plan_verified", "plan_refined",
        "plan_approved", "plan_rejected", "step_ready", "step_started",
        "tool_invoked", "tool_denied", "filter_flagged", "step_succeeded",
        "step_failed", "fallback_activated", "replan_started", "plan_replaced",
        "approval_requested", "approval_resolved", "run_completed", "run_aborted",
    }
)


class HitlMode(str, Enum):
    autonomous = "autonomous"
    step_approval = "step_approval"
    plan_validate = "plan_validate"
    plan_validate_and_step_approval = "plan_validate_and_step_approval"

    @property
    def gates_plan(self) -> bool:
        return self in (HitlMode.plan_validate, HitlMode.plan_validate_and_step_approval)

    @property
    def gates_steps(self) -> bool:
        return self in (HitlMode.step_approval, HitlMode.plan_validate_and_step_approval)


class Phase(str, Enum):
    planning = "planning"
    verifying = "verifying"
    awaiting_plan_approval = "awaiting_plan_approval"
    executing = "executing"
    replanning = "replanning"
    completed = "completed"
    aborted = "aborted"


TERMINAL_PHASES = (Phase.completed, Phase.aborted)


@dataclass
class ApprovalRequest:
    approval_id: str
    run_id: str
    subject_kind: str  # "plan" | "step"
    subject: str  # plan version (as text) or step id
    summary: str
    created_ts: float
    resolution: Optional[dict[str, Any]] = None

    def as_dict(self) -> dict[str, Any]:
        return {
            "approval_id": self.approval_id,
            "run_id": self.run_id,
            "subject_kind": self.subject_kind,
            "subject": self.subject,
            "summary": self.summary,
            "created_ts": self.created_ts,
            "resolution": self.resolution,
        }


class RunState:
    """Mutable per-run state; every mutation happens inside apply_event."""

    def __init__(self, run_id: str) -> None:
        self.run_id = run_id
        self.objective: str = ""
        self.mode: HitlMode = HitlMode.autonomous
        self.config: dict[str, Any] = {}
        self.phase: Phase = Phase.planning
        self.current_plan: Optional[Plan] = None
        self.statuses: dict[str, StepStatus] = {}
        self.step_records: list[dict[str, Any]] = []
        self.approvals: dict[str, ApprovalRequest] = {}
        self.final_response: Optional[str] = None
        self.abort_reason: Optional[str] = None
        self.last_seq: int = 0
        self.replan_count: int = 0
        self.refine_count: int = 0
        # derived execution bookkeeping (all reconstructed from events)
        self.step_outputs: dict[str, TaintedText] = {}
        self.dormant: set[str] = set()
        self.fallback_for: dict[str, str] = {}
        self.chain_origin: dict[str, str] = {}
        self.activations: dict[str, int] = {}
        self.pending_refine: bool = False
        self.replan_requested: bool = False
        self.pending_replacement: Optional[dict[str, Any]] = None
        # side-channel conveniences, not part of replayed state
        self.outbox: list[dict[str, str]] = []

    @property
    def pending_approvals(self) -> list[ApprovalRequest]:
        return [a for a in self.approvals.values() if a.resolution is None]

    def snapshot(self) -> dict[str, Any]:
        """Canonical state document; replaying the event log reproduces it exactly."""
        return {
            "run_id": self.run_id,
            "objective": self.objective,
            "mode": self.mode.value,
            "config": self.config,
            "phase": self.phase.value,
            "plan": serialize_plan(self.current_plan) if self.current_plan else None,
            "statuses": {k: v.value for k, v in sorted(self.statuses.items())},
            "step_records": self.step_records,
            "approvals": [
                self.approvals[k].as_dict() for k in sorted(self.approvals)
            ],
            "final_response": self.final_response,
            "abort_reason": self.abort_reason,
            "replan_count": self.replan_count,
            "refine_count": self.refine_count,
            "last_seq": self.last_seq,
        }

    def summary(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "objective": self.objective,
            "phase": self.phase.value,
            "mode": self.mode.value,
            "plan_version": self.current_plan.version if self.current_plan else None,
            "pending_approvals": len(self.pending_approvals),
            "last_seq": self.last_seq,
        }


def _install_plan(state: RunState, document: Mapping[str, Any]) -> None:
    plan = parse_plan(document)
    state.current_plan = plan
    state.statuses = {s: StepStatus.pending for s in plan.step_ids}
    state.dormant = set(plan.fallback_targets())
    state.fallback_for = {}
    state.chain_origin = {}
    state.activations = {}
    state.pending_refine = False


def apply_event(state: RunState, event: Mapping[str, Any]) -> RunState:
    """The single reducer: event log → state. Pure state mechanics, no I/O."""
    kind = event["kind"]
    payload = event.get("payload", {})
    assert kind in EVENT_KINDS, f"unknown event kind {kind!r}"
    assert event["seq"] == state.last_seq + 1, "reducer requires gapless events"
    state.last_seq = event["seq"]

    if kind == "run_started":
        state.objective = payload["objective"]
        state.mode = HitlMode(payload["mode"])
        state.config = dict(payload.get("config", {}))
        state.phase = Phase.planning
    elif kind == "plan_proposed":
        _install_plan(state, payload["plan"])
        state.phase = Phase.verifying
    elif kind == "plan_verified":
        if payload["verdict"]["verdict"] == "reject":
            state.pending_refine = True
    elif kind == "plan_refined":
        state.refine_count += 1
        _install_plan(state, payload["plan"])
        state.phase = Phase.verifying
    elif kind == "plan_approved":
        state.phase = Phase.executing
        state.replan_requested = False
    elif kind == "plan_rejected":
        state.phase = Phase.replanning
        state.pending_replacement = payload.get("replacement")
    elif kind == "step_ready":
        state.statuses[payload["step_id"]] = StepStatus.ready
    elif kind == "step_started":
        state.statuses[payload["step_id"]] = StepStatus.running
    elif kind == "tool_invoked":
        pass  # audit detail; state impact arrives with the step outcome event
    elif kind == "tool_denied":
        pass
    elif kind == "filter_flagged":
        pass
    elif kind == "step_succeeded":
        step_id = payload["step_id"]
        state.statuses[step_id] = StepStatus.succeeded
        state.step_records.append(payload["record"])
        output = payload["record"].get("output")
        if output is not None:
            state.step_outputs[step_id] = TaintedText(
                output["content"], Taint(output["taint"]), output["origin"]
            )
        superseded = state.fallback_for.get(step_id)
        while superseded is not None:
            state.statuses[superseded] = StepStatus.skipped
            superseded = state.fallback_for.get(superseded)
    elif kind == "step_failed":
        state.statuses[payload["step_id"]] = StepStatus.failed
        state.step_records.append(payload["record"])
    elif kind == "fallback_activated":
        target = payload["target"]
        origin = payload["origin"]
        state.dormant.discard(target)
        state.fallback_for[target] = payload["failed_step"]
        state.chain_origin[target] = origin
        state.activations[origin] = state.activations.get(origin, 0) + 1
    elif kind == "replan_started":
        state.replan_count += 1
        state.replan_requested = True
        state.phase = Phase.replanning
    elif kind == "plan_replaced":
        _install_plan(state, payload["plan"])
        state.replan_requested = False
        state.pending_replacement = None
        state.phase = Phase.verifying
    elif kind == "approval_requested":
        approval = ApprovalRequest(
            approval_id=payload["approval_id"],
            run_id=state.run_id,
            subject_kind=payload["subject_kind"],
            subject=payload["subject"],
            summary=payload["summary"],
            created_ts=event["ts"],
        )
        state.approvals[approval.approval_id] = approval
        if approval.subject_kind == "plan":
            state.phase = Phase.awaiting_plan_approval
        else:
            state.statuses[approval.subject] = StepStatus.awaiting_approval
    elif kind == "approval_resolved":
        approval = state.approvals[payload["approval_id"]]
        approval.resolution = {
            "decision": payload["decision"],
            "actor": payload["actor"],
            "note": payload.get("note", ""),
            "ts": event["ts"],
        }
        if approval.subject_kind == "step":
            step_id = approval.subject
            if payload["decision"] == "approve":
                state.statuses[step_id] = StepStatus.ready
            else:
                plan = state.current_plan
                has_fallback = plan is not None and plan.step(step_id).fallback is not None
                if not has_fallback and state.config.get("continue_on_reject") == "skip":
                    state.statuses[step_id] = StepStatus.skipped
                else:
                    state.statuses[step_id] = StepStatus.failed
    elif kind == "run_completed":
        state.final_response = payload.get("final_response", "")
        state.phase = Phase.completed
    elif kind == "run_aborted":
        state.abort_reason = payload.get("reason", "")
        state.phase = Phase.aborted
    return state


def replay(run_id: str, events: Sequence[Mapping[str, Any]]) -> RunState:
    state = RunState(run_id)
    for event in events:
        apply_event(state, event)
    return state


# --- step programs ------------------------------------------------------------

_TEMPLATE_RE = re.compile(r"\{(objective|dep:[A-Za-z0-9_.\-]+|extract:[A-Za-z0-9_]+:[A-Za-z0-9_.\-]+)\}")


@dataclass(frozen=True)
class _Instruction:
    tool: str
    args: Mapping[str, str]
    optional: bool = False


def _parse_program(raw: Sequence[Mapping[str, Any]]) -> list[_Instruction]:
    return [
        _Instruction(
            tool=str(item["tool"]),
            args={str(k): str(v) for k, v in (item.get("args") or {}).items()},
            optional=bool(item.get("optional", False)),
        )
        for item in raw
    ]


class Engine:
    """Owns runs end to end: state machine, approvals, events, step execution.

    Step bodies inside a wave run sequentially in lexicographic id order so
    that event logs — and therefore replays and harness reports — are fully
    deterministic. Wall-clock parallel dispatch lives in scheduler.run_waves.
    """

    def __init__(
        self,
        policy: PolicySet,
        planner: Backend,
        verifier: Backend,
        registry: Optional[ToolRegistry] = None,
        store: Optional[MemoryEventStore] = None,
        sandbox: Optional[SandboxManager] = None,
        quarantine: Optional[Backend] = None,
        filters: FilterConfig = DEFAULT_FILTER_CONFIG,
        filters_enabled: bool = True,
        workspace_root: Optional[Path] = None,
        width: int = 4,
        replan_limit: int = reasoners.REPLAN_LIMIT,
        refine_limit: int = reasoners.REFINE_LIMIT,
        continue_on_reject: str = "abort",  # or "skip"
        verify_plans: bool = True,  # testing hook: False bypasses plan validation
    ) -> None:
        if planner.identity == verifier.identity:
            raise ConfigError(
                "verifier backend identity must differ from the planner's "
                f"(both are {planner.identity!r})"
            )
        if continue_on_reject not in ("abort", "skip"):
            raise ConfigError("continue_on_reject must be 'abort' or 'skip'")
        self.policy = policy
        self.planner = planner
        self.verifier = verifier
        self.registry = registry or builtin_registry()
        self.store = store or MemoryEventStore()
        self.sandbox = sandbox or SandboxManager()
        self.quarantine = quarantine or ScriptedBackend("quarantined-extractor")
        self.filters = filters
        self.filters_enabled = filters_enabled
        self.workspace_root = Path(workspace_root) if workspace_root else None
        self.width = width
        self.replan_limit = replan_limit
        self.refine_limit = refine_limit
        self.continue_on_reject = continue_on_reject
        self.verify_plans = verify_plans
        self._runs: dict[str, RunState] = {}
        self._programs: dict[str, dict[str, list[_Instruction]]] = {}
        self._hierarchical: set[str] = set()
        self._locks: dict[str, threading.RLock] = {}
        self._global_lock = threading.Lock()

    # --- run lifecycle ---------------------------------------------------

    def start_run(
        self,
        objective: str,
        mode: HitlMode | str = HitlMode.autonomous,
        run_id: Optional[str] = None,
        plan_document: Optional[Mapping[str, Any]] = None,
        step_programs: Optional[Mapping[str, Sequence[Mapping[str, Any]]]] = None,
        hierarchical: bool = False,
    ) -> RunState:
        mode = HitlMode(mode)
        run_id = run_id or f"run-{uuid.uuid4().hex[:12]}"
        with self._global_lock:
            if run_id in self._runs:
                raise ConfigError(f"duplicate run id {run_id!r}")
            state = RunState(run_id)
            self._runs[run_id] = state
            self._locks[run_id] = threading.RLock()
        self._programs[run_id] = {
            step: _parse_program(program)
            for step, program in (step_programs or {}).items()
        }
        if hierarchical:
            self._hierarchical.add(run_id)
        config = {
            "width": self.width,
            "replan_limit": self.replan_limit,
            "refine_limit": self.refine_limit,
            "filters_enabled": self.filters_enabled,
            "continue_on_reject": self.continue_on_reject,
            "hierarchical": hierarchical,
            "step_programs": {k: [dict(i) for i in v] for k, v in (step_programs or {}).items()},
        }
        self._emit(state, "run_started", {
            "objective": objective, "mode": mode.value, "config": config,
        })
        if plan_document is not None:
            document = dict(serialize_plan(parse_plan(plan_document)))
            self._emit(state, "plan_proposed", {"plan": document, "source": "operator"})
        return state

    def run(self, run_id: str) -> RunState:
        try:
            return self._runs[run_id]
        except KeyError:
            raise UnknownRun(f"no run {run_id!r}") from None

    def run_ids(self) -> list[str]:
        with self._global_lock:
            return sorted(self._runs)

    def load_run(self, run_id: str) -> RunState:
        """Reconstruct a run purely from its event log (replay)."""
        return replay(run_id, self.store.read(run_id))

    def adopt_run(self, run_id: str) -> RunState:
        """Replay a persisted run and take ownership so it can keep advancing
        (approvals, further waves) in this process."""
        state = self.load_run(run_id)
        with self._global_lock:
            if run_id in self._runs:
                return self._runs[run_id]
            self._runs[run_id] = state
            self._locks[run_id] = threading.RLock()
        programs = state.config.get("step_programs") or {}
        self._programs[run_id] = {
            step: _parse_program(program) for step, program in programs.items()
        }
        if state.config.get("hierarchical"):
            self._hierarchical.add(run_id)
        return state

    # --- event plumbing ---------------------------------------------------

    def _emit(self, state: RunState, kind: str, payload: Mapping[str, Any]) -> None:
        event = {
            "seq": state.last_seq + 1,
            "ts": time.time(),
            "kind": kind,
            "payload": dict(payload),
        }
        self.store.append(state.run_id, event)  # write-ahead: persist first
        apply_event(state, event)

    # --- state machine ----------------------------------------------------

    def advance(self, run_id: str) -> RunState:
        """Perform one state-machine transition; ApprovalPending is a signal."""
        state = self.run(run_id)
        with self._locks[run_id]:
            if state.phase in TERMINAL_PHASES:
                return state
            handler = {
                Phase.planning: self._advance_planning,
                Phase.verifying: self._advance_verifying,
                Phase.awaiting_plan_approval: self._advance_awaiting_plan,
                Phase.executing: self._advance_executing,
                Phase.replanning: self._advance_replanning,
            }[state.phase]
            handler(state)
            return state

    def run_until_blocked(self, run_id: str) -> RunState:
        """Advance until completion, abort, or a pending approval."""
        state = self.run(run_id)
        with self._locks[run_id]:
            while state.phase not in TERMINAL_PHASES:
                try:
                    self.advance(run_id)
                except ApprovalPending:
                    break
            return state

    def _advance_planning(self, state: RunState) -> None:
        try:
            if state.run_id in self._hierarchical:
                produced = reasoners.hierarchical_plan(
                    state.objective, self.registry.catalog(), self.policy, self.planner
                )
            else:
                produced = reasoners.plan(
                    state.objective, self.registry.catalog(), self.policy, self.planner
                )
        except (MalformedPlanOutput, PlanExecError) as exc:
            self._emit(state, "run_aborted", {"reason": f"{type(exc).__name__}: {exc}"})
            return
        self._emit(state, "plan_proposed", {
            "plan": serialize_plan(produced), "source": "planner",
        })

    def _advance_verifying(self, state: RunState) -> None:
        assert state.current_plan is not None
        plan = state.current_plan
        if state.pending_refine:
            if state.refine_count >= self.refine_limit:
                self._emit(state, "run_aborted", {
                    "reason": f"RefinementExhausted: {self.refine_limit} refinements spent",
                })
                return
            verdict = reasoners.verify(plan, self.policy, self.verifier)
            try:
                refined = reasoners.refine(plan, verdict, self.planner)
            except MalformedPlanOutput as exc:
                self._emit(state, "run_aborted", {"reason": f"MalformedPlanOutput: {exc}"})
                return
            self._emit(state, "plan_refined", {"plan": serialize_plan(refined)})
            return

        if self.verify_plans:
            verdict = reasoners.verify(plan, self.policy, self.verifier)
        else:
            verdict = reasoners.VerifierVerdict("approve")
        self._emit(state, "plan_verified", {
            "plan_version": plan.version,
            "verdict": verdict.as_dict(),
            "bypassed": not self.verify_plans,
        })
        if not verdict.approved:
            return  # pending_refine set; next advance refines
        if state.mode.gates_plan:
            self._request_approval(
                state,
                subject_kind="plan",
                subject=str(plan.version),
                summary=(
                    f"Approve plan {plan.plan_id} v{plan.version} "
                    f"({len(plan.steps)} steps) for objective: {state.objective[:120]}"
                ),
            )
        else:
            self._emit(state, "plan_approved", {
                "plan_version": plan.version, "reason": "auto",
            })

    def _advance_awaiting_plan(self, state: RunState) -> None:
        raise ApprovalPending(
            f"run {state.run_id} awaits plan approval "
            f"({[a.approval_id for a in state.pending_approvals]})"
        )

    def _advance_replanning(self, state: RunState) -> None:
        assert state.current_plan is not None
        if state.pending_replacement is not None:
            document = dict(state.pending_replacement, version=state.current_plan.version + 1)
            self._emit(state, "plan_replaced", {"plan": document, "source": "operator"})
            return
        if not state.replan_requested:
            if state.replan_count >= self.replan_limit:
                self._emit(state, "run_aborted", {
                    "reason": f"ReplanLimitExceeded: {self.replan_limit} replans spent",
                })
                return
            self._emit(state, "replan_started", {"reason": "recovery"})
            return
        decision = reasoners.replan(
            state.objective, state.current_plan, self._past_step_summaries(state),
            self.planner,
        )
        if decision.kind == "complete":
            self._emit(state, "run_completed", {"final_response": decision.response or ""})
        elif decision.kind == "new_plan":
            assert decision.plan is not None
            self._emit(state, "plan_replaced", {
                "plan": serialize_plan(decision.plan), "source": "planner",
            })
        else:  # continue with the existing plan
            self._emit(state, "plan_approved", {
                "plan_version": state.current_plan.version, "reason": "replan_continue",
            })

    # --- executing --------------------------------------------------------

    def _advance_executing(self, state: RunState) -> None:
        assert state.current_plan is not None
        plan = state.current_plan
        live_ids = [s for s in plan.step_ids if s not in state.dormant]

        if all(
            state.statuses[s] in (StepStatus.succeeded, StepStatus.skipped)
            for s in live_ids
        ):
            self._complete(state)
            return

        approved = [
            s for s in plan.step_ids
            if state.statuses[s] == StepStatus.ready and s not in state.dormant
        ]
        candidates = approved + [
            s for s in ready_steps(plan, state.statuses) if s not in state.dormant
        ]
        dispatch: list[str] = []
        for step_id in candidates:
            if len(dispatch) >= self.width:
                break
            step = plan.step(step_id)
            if state.statuses[step_id] == StepStatus.pending and self._needs_step_approval(state, step):
                self._request_approval(
                    state,
                    subject_kind="step",
                    subject=step_id,
                    summary=(
                        f"Approve high-risk step {step_id}: {step.description[:100]}"
                    ),
                )
                continue
            dispatch.append(step_id)

        if not dispatch:
            if state.pending_approvals:
                raise ApprovalPending(
                    f"run {state.run_id} awaits step approvals "
                    f"({[a.approval_id for a in state.pending_approvals]})"
                )
            # nothing runnable and plan not complete: a failure blocks progress
            if state.replan_count >= self.replan_limit:
                self._emit(state, "run_aborted", {
                    "reason": f"ReplanLimitExceeded: {self.replan_limit} replans spent",
                })
            else:
                self._emit(state, "replan_started", {"reason": "fallback_exhausted"})
            return

        # sequential in-id-order execution keeps the event log deterministic
        for step_id in dispatch:
            if state.statuses[step_id] == StepStatus.pending:
                self._emit(state, "step_ready", {"step_id": step_id})
            self._emit(state, "step_started", {
                "step_id": step_id, "plan_version": plan.version,
            })
            self._execute_step(state, plan.step(step_id))

    def _complete(self, state: RunState) -> None:
        assert state.current_plan is not None
        decision = reasoners.replan(
            state.objective, state.current_plan, self._past_step_summaries(state),
            self.planner,
        )
        if decision.kind == "new_plan" and decision.plan is not None:
            self._emit(state, "plan_replaced", {
                "plan": serialize_plan(decision.plan), "source": "planner",
            })
            return
        response = decision.response or self._default_final_response(state)
        self._emit(state, "run_completed", {"final_response": response})

    def _default_final_response(self, state: RunState) -> str:
        parts = []
        for record in state.step_records:
            if record.get("outcome") == "succeeded" and record.get("output"):
                clean = sanitize_input(
                    TaintedText(record["output"]["content"], Taint.untrusted, "history"),
                    self.filters,
                ).value.content
                parts.append(clean)
        return " ".join(parts) if parts else "Objective complete."

    def _past_step_summaries(self, state: RunState) -> list[dict[str, Any]]:
        """Sanitized, structure-only step history for privileged replan requests."""
        summaries = []
        for record in state.step_records:
            output = record.get("output")
            summary = ""
            if output is not None:
                summary = sanitize_input(
                    TaintedText(output["content"], Taint.untrusted, "history"),
                    self.filters,
                ).value.content[:200]
            summaries.append({
                "step_id": record["step_id"],
                "plan_version": record["plan_version"],
                "outcome": record["outcome"],
                "tools": [inv["tool"] for inv in record.get("invocations", [])],
                "summary": summary,
            })
        return summaries

    def _needs_step_approval(self, state: RunState, step: PlanStep) -> bool:
        if not state.mode.gates_steps:
            return False
        role = self.policy.roles.get(step.role)
        if role is not None and role.may_approve_high_risk:
            return False
        if step.risk.value == "high":
            return True
        try:
            grant = effective_tools(step, self._agent_profile(step), self.policy)
        except PlanExecError:
            return False  # the grant failure itself will deny the step
        if grant & self.policy.high_risk_tools:
            return True
        for tool in grant:
            descriptor = self.registry.descriptor(tool)
            if descriptor.side_effect_class in HIGH_RISK_SIDE_EFFECTS:
                return True
        return False

    def _agent_profile(self, step: PlanStep):
        if step.agent is None:
            return None
        return self.policy.agents.get(step.agent)

    # --- step execution ---------------------------------------------------

    def _execute_step(self, state: RunState, step: PlanStep) -> None:
        assert state.current_plan is not None
        started = time.time()
        record: dict[str, Any] = {
            "step_id": step.id,
            "plan_version": state.current_plan.version,
            "invocations": [],
            "outcome": "failed",
            "output": None,
            "started": started,
            "ended": None,
            "isolation": None,
        }

        try:
            tier = isolation_for(step, self.policy)
            grant = effective_tools(step, self._agent_profile(step), self.policy)
        except (RoleUnknown, EmptyGrant, WeakeningForbidden) as exc:
            self._emit(state, "tool_denied", {
                "step_id": step.id, "tool": None,
                "reason": f"{type(exc).__name__}: {exc}",
            })
            record["outcome"] = "denied"
            record["ended"] = time.time()
            self._emit(state, "step_failed", {
                "step_id": step.id, "record": record,
                "reason": f"{type(exc).__name__}: {exc}",
            })
            self._after_step_failure(state, step)
            return

        record["isolation"] = tier.value
        program = self._programs.get(state.run_id, {}).get(step.id)
        if program is None:
            program = [self._default_instruction(step, grant)]

        ctx = ToolContext(
            workspace=self._workspace(state.run_id),
            tier=tier,
            sandbox=self.sandbox,
            outbox=state.outbox,
        )

        successes = 0
        fatal: Optional[str] = None
        for instruction in program:
            outcome = self._run_instruction(state, step, instruction, grant, tier, ctx, record)
            if outcome == "ok":
                successes += 1
            elif outcome == "skipped":
                continue
            else:
                fatal = outcome
                break

        record["ended"] = time.time()
        if fatal is None and successes > 0:
            record["outcome"] = "succeeded"
            self._emit(state, "step_succeeded", {"step_id": step.id, "record": record})
        else:
            record["outcome"] = "denied" if fatal == "denied" else "failed"
            self._emit(state, "step_failed", {
                "step_id": step.id, "record": record,
                "reason": fatal or "no successful tool invocation",
            })
            self._after_step_failure(state, step)

    def _default_instruction(self, step: PlanStep, grant: frozenset[str]) -> _Instruction:
        if step.tool_grants:
            ordered = [t for t in step.tool_grants if t in grant]
        else:
            ordered = sorted(grant)
        return _Instruction(tool=ordered[0], args={"input": step.description})

    def _run_instruction(
        self,
        state: RunState,
        step: PlanStep,
        instruction: _Instruction,
        grant: frozenset[str],
        tier: IsolationTier,
        ctx: ToolContext,
        record: dict[str, Any],
    ) -> str:
        """Returns "ok", "skipped" (optional instruction denied/failed), "denied" or a failure text."""
        tool = instruction.tool

        # First enforcement layer: deny before anything is logged as invoked.
        if tool not in grant:
            self._emit(state, "tool_denied", {
                "step_id": step.id, "tool": tool,
                "reason": f"tool {tool!r} outside the step grant {sorted(grant)}",
            })
            return "skipped" if instruction.optional else "denied"
        descriptor = self.registry.descriptor(tool)
        if tier_rank(tier) < tier_rank(descriptor.required_tier):
            self._emit(state, "tool_denied", {
                "step_id": step.id, "tool": tool,
                "reason": (
                    f"tool {tool!r} requires tier {descriptor.required_tier.value}, "
                    f"step runs at {tier.value}"
                ),
            })
            return "skipped" if instruction.optional else "denied"

        try:
            args = {
                name: self._render(state, template)
                for name, template in instruction.args.items()
            }
        except PlanExecError as exc:
            return f"argument rendering failed: {exc}"

        if self.filters_enabled:
            sanitized_args: dict[str, TaintedText] = {}
            for name, value in args.items():
                result = sanitize_input(value, self.filters)
                if result.findings:
                    self._emit(state, "filter_flagged", {
                        "step_id": step.id, "tool": tool, "stage": "input",
                        "arg": name,
                        "findings": [f.as_dict() for f in result.findings],
                        "blocked": False,
                    })
                sanitized_args[name] = result.value
            args = sanitized_args

            if descriptor.side_effect_class.value == "communicates_outbound":
                # only untrusted content can smuggle data out; trusted args are
                # operator- or planner-authored (e.g. the recipient address)
                outbound_findings = []
                for name, value in args.items():
                    if value.taint != Taint.untrusted:
                        continue
                    report = filter_output(value, self.filters)
                    if report.flagged:
                        outbound_findings.append({
                            "arg": name,
                            "findings": [f.as_dict() for f in report.findings],
                        })
                if outbound_findings:
                    self._emit(state, "filter_flagged", {
                        "step_id": step.id, "tool": tool, "stage": "outbound_block",
                        "findings": outbound_findings, "blocked": True,
                    })
                    return (
                        "skipped" if instruction.optional
                        else f"outbound content blocked by filters for tool {tool!r}"
                    )

        # Write-ahead: the invocation is durably logged before the behavior runs.
        self._emit(state, "tool_invoked", {
            "step_id": step.id, "tool": tool,
            "args": {name: value.as_dict() for name, value in args.items()},
        })
        try:
            output = self.registry.invoke(tool, args, grant, tier, ctx)
        except ToolDenied as exc:  # defense in depth; normally caught above
            self._emit(state, "tool_denied", {
                "step_id": step.id, "tool": tool, "reason": str(exc),
            })
            return "skipped" if instruction.optional else "denied"
        except ToolFailed as exc:
            record["invocations"].append({
                "tool": tool,
                "args": {name: value.as_dict() for name, value in args.items()},
                "output": None,
                "error": str(exc),
            })
            return "skipped" if instruction.optional else f"tool {tool!r} failed: {exc}"

        report = filter_output(output, self.filters)
        if report.flagged and self.filters_enabled:
            self._emit(state, "filter_flagged", {
                "step_id": step.id, "tool": tool, "stage": "output",
                "findings": [f.as_dict() for f in report.findings],
                "blocked": False,
            })
        record["invocations"].append({
            "tool": tool,
            "args": {name: value.as_dict() for name, value in args.items()},
            "output": output.as_dict(),
            "filter": report.as_dict(),
        })
        record["output"] = output.as_dict()
        return "ok"

    def _render(self, state: RunState, template: str) -> TaintedText:
        """Substitute {objective}, {dep:STEP} and {extract:FIELD:STEP} with taint
        propagation; untrusted upstream output keeps the composed value untrusted."""
        inputs: list[TaintedText] = []

        def substitute(match: "re.Match[str]") -> str:
            token = match.group(1)
            if token == "objective":
                value = trusted(state.objective, "user")
            elif token.startswith("dep:"):
                step_id = token[4:]
                if step_id not in state.step_outputs:
                    raise ToolFailed(f"no upstream output recorded for step {step_id!r}")
                value = state.step_outputs[step_id]
            else:  # extract:FIELD:STEP
                _, field_name, step_id = token.split(":", 2)
                if step_id not in state.step_outputs:
                    raise ToolFailed(f"no upstream output recorded for step {step_id!r}")
                fields = reasoners.quarantined_extract(
                    state.step_outputs[step_id], [field_name], self.quarantine
                )
                value = fields[field_name]
            inputs.append(value)
            return value.content

        content = _TEMPLATE_RE.sub(substitute, template)
        if not inputs:
            return trusted(template, "planner")
        taint = (
            Taint.untrusted
            if any(i.taint == Taint.untrusted for i in inputs)
            else Taint.trusted
        )
        return TaintedText(content, taint, "composer")

    def _after_step_failure(self, state: RunState, step: PlanStep) -> None:
        origin = state.chain_origin.get(step.id, step.id)
        decision = apply_fallback(
            state.current_plan, step.id, state.activations.get(origin, 0)
        )
        if decision.activated and decision.target is not None:
            self._emit(state, "fallback_activated", {
                "failed_step": step.id, "target": decision.target, "origin": origin,
            })
        # exhausted: the next wave finding nothing runnable triggers the replan

    def _workspace(self, run_id: str) -> Path:
        root = self.workspace_root or Path(".") / ".planexec-workspaces"
        workspace = root / run_id
        workspace.mkdir(parents=True, exist_ok=True)
        return workspace

    # --- approvals --------------------------------------------------------

    def _request_approval(
        self, state: RunState, subject_kind: str, subject: str, summary: str
    ) -> None:
        approval_id = f"{state.run_id}-ap{len(state.approvals) + 1}"
        self._emit(state, "approval_requested", {
            "approval_id": approval_id,
            "subject_kind": subject_kind,
            "subject": subject,
            "summary": summary,
        })

    def resolve_approval(
        self,
        run_id: str,
        approval_id: str,
        decision: str,
        actor: str = "operator",
        note: str = "",
        replacement_plan: Optional[Mapping[str, Any]] = None,
    ) -> RunState:
        if decision not in ("approve", "reject"):
            raise ConfigError(f"decision must be approve or reject, got {decision!r}")
        state = self.run(run_id)
        with self._locks[run_id]:
            approval = state.approvals.get(approval_id)
            if approval is None:
                raise UnknownApproval(f"no approval {approval_id!r} for run {run_id}")
            if approval.resolution is not None:
                raise AlreadyResolved(f"approval {approval_id!r} already resolved")
            replacement_doc: Optional[dict[str, Any]] = None
            if replacement_plan is not None:
                if approval.subject_kind != "plan" or decision != "reject":
                    raise ConfigError(
                        "a replacement plan is only accepted when rejecting a plan"
                    )
                replacement_doc = serialize_plan(parse_plan(replacement_plan))

            self._emit(state, "approval_resolved", {
                "approval_id": approval_id, "decision": decision,
                "actor": actor, "note": note,
            })

            if approval.subject_kind == "plan":
                assert state.current_plan is not None
                if decision == "approve":
                    self._emit(state, "plan_approved", {
                        "plan_version": state.current_plan.version, "reason": "human",
                    })
                else:
                    payload: dict[str, Any] = {
                        "plan_version": state.current_plan.version, "reason": "human",
                    }
                    if replacement_doc is not None:
                        payload["replacement"] = replacement_doc
                    self._emit(state, "plan_rejected", payload)
            else:
                if decision == "reject":
                    step = state.current_plan.step(approval.subject)  # type: ignore[union-attr]
                    if step.fallback is not None:
                        self._after_step_failure(state, step)
                    elif self.continue_on_reject == "abort":
                        self._emit(state, "run_aborted", {
                            "reason": (
                                f"step {approval.subject} rejected by {actor} "
                                "with no fallback"
                            ),
                        })
            return state

    # --- audit ------------------------------------------------------------

    def control_flow_trace(self, run_id: str) -> list[tuple[int, str, str]]:
        """(plan version, step id, tool) per invocation — derived from events only."""
        return trace_events(self.store.read(run_id))


def trace_events(events: Sequence[Mapping[str, Any]]) -> list[tuple[int, str, str]]:
    """Control-flow trace from an event log alone (no engine required)."""
    trace: list[tuple[int, str, str]] = []
    version = 0
    for event in events:
        kind = event["kind"]
        payload = event.get("payload", {})
        if kind in ("plan_proposed", "plan_refined", "plan_replaced"):
            version = payload["plan"]["version"]
        elif kind == "tool_invoked":
            trace.append((version, payload["step_id"], payload["tool"]))
    return trace
