"""Pluggable reasoning backends: Planner, Verifier, Refiner, Replanner, and the
quarantined extractor.

Privileged request kinds (plan, verify, refine, replan) may never carry raw
untrusted text — only sanitized summaries or schema-bound extracts. The
quarantined extractor is the only kind allowed to see untrusted content, and it
can emit nothing but the requested fields.

Ships a deterministic scripted backend for tests and a remote HTTP backend for
real models; the wire contract is the ReasonerRequest document itself.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Protocol, Sequence, runtime_checkable

from .errors import (
    BackendUnavailable,
    ExtractionFailed,
    MalformedPlanOutput,
    PlanExecError,
    PrivilegeViolation,
    RefinementExhausted,
    SubplanConflict,
)
from .plan import Plan, parse_plan, serialize_plan, validate_dag
from .policy import PolicySet, validate_plan_against_policy
from .tools import Taint, TaintedText, sanitize_input

PRIVILEGED_KINDS = frozenset({"plan", "verify", "refine", "replan"})


def _contains_raw_untrusted(value: Any) -> bool:
    if isinstance(value, TaintedText):
        return value.taint == Taint.untrusted
    if isinstance(value, Mapping):
        return any(_contains_raw_untrusted(v) for v in value.values())
    if isinstance(value, (list, tuple, set, frozenset)):
        return any(_contains_raw_untrusted(v) for v in value)
    return False


@dataclass(frozen=True)
class ReasonerRequest:
    kind: str  # plan | verify | refine | replan | quarantined_extract
    objective: str
    tool_catalog: tuple[Mapping[str, str], ...] = ()
    context: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind in PRIVILEGED_KINDS and _contains_raw_untrusted(self.context):
            raise PrivilegeViolation(
                f"raw untrusted text may not enter a privileged {self.kind!r} request"
            )

    def as_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "objective": self.objective,
            "tool_catalog": [dict(t) for t in self.tool_catalog],
            "context": _jsonable(self.context),
        }


def _jsonable(value: Any) -> Any:
    if isinstance(value, TaintedText):
        return value.as_dict()
    if isinstance(value, Mapping):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


@dataclass(frozen=True)
class VerifierIssue:
    step_id: str
    reason: str

    def as_dict(self) -> dict[str, str]:
        return {"step_id": self.step_id, "reason": self.reason}


@dataclass(frozen=True)
class VerifierVerdict:
    verdict: str  # "approve" | "reject"
    issues: tuple[VerifierIssue, ...] = ()

    def __post_init__(self) -> None:
        assert (self.verdict == "reject") == bool(self.issues), (
            "reject iff issues nonempty"
        )

    @property
    def approved(self) -> bool:
        return self.verdict == "approve"

    def as_dict(self) -> dict[str, Any]:
        return {"verdict": self.verdict, "issues": [i.as_dict() for i in self.issues]}


@dataclass(frozen=True)
class ReplanDecision:
    kind: str  # "continue_plan" | "new_plan" | "complete"
    plan: Optional[Plan] = None
    response: Optional[str] = None

    @staticmethod
    def continue_plan() -> "ReplanDecision":
        return ReplanDecision("continue_plan")

    @staticmethod
    def new_plan(plan: Plan) -> "ReplanDecision":
        return ReplanDecision("new_plan", plan=plan)

    @staticmethod
    def complete(response: str) -> "ReplanDecision":
        return ReplanDecision("complete", response=response)


@runtime_checkable
class Backend(Protocol):
    """A reasoning backend: stateless request → structured response."""

    identity: str

    def respond(self, request: ReasonerRequest) -> Mapping[str, Any]: ...


# --- scripted backend ---------------------------------------------------------

_TEMPERATURE_RE = re.compile(r"\d+\s*°[CF]")
_CONDITIONS = ("sunny", "rainy", "cloudy", "foggy", "windy", "snowy")


class ScriptedBackend:
    """Deterministic fixture-keyed backend for tests and the attack harness.

    Fixture layout (all sections optional):
        plans:      {objective: plan document | [documents consumed per call]}
        verify:     {"<plan_id>@<version>": verdict document | [..per call]}
        refine:     {"<plan_id>@<version>": plan document}
        replans:    {objective: decision document | [..per call]}
        milestones: {objective: [milestone text, ..]}
        extract:    {field name: regex with one capture group}
        final:      {objective: final response text}
    """

    def __init__(self, identity: str, fixtures: Optional[Mapping[str, Any]] = None) -> None:
        self.identity = identity
        self.fixtures: dict[str, Any] = dict(fixtures or {})
        self.requests: list[ReasonerRequest] = []
        self.call_counts: Counter[tuple[str, str]] = Counter()

    @classmethod
    def from_dir(cls, identity: str, fixture_dir: str | Path) -> "ScriptedBackend":
        fixtures: dict[str, Any] = {}
        for path in sorted(Path(fixture_dir).glob("*.json")):
            document = json.loads(path.read_text("utf-8"))
            for key, value in document.items():
                if isinstance(value, Mapping) and isinstance(fixtures.get(key), dict):
                    fixtures[key].update(value)
                else:
                    fixtures[key] = dict(value) if isinstance(value, Mapping) else value
        return cls(identity, fixtures)

    def _lookup(self, section: str, key: str) -> Any:
        """Fixture entry; list values are consumed one element per call."""
        table = self.fixtures.get(section) or {}
        value = table.get(key)
        if isinstance(value, list):
            if not value:
                return None
            return value.pop(0)
        return value

    def respond(self, request: ReasonerRequest) -> Mapping[str, Any]:
        self.requests.append(request)
        kind = request.kind
        if kind == "plan":
            self.call_counts[("plan", request.objective)] += 1
            document = self._lookup("plans", request.objective)
            return {"plan": document} if document is not None else {"text": "no plan available"}
        if kind == "verify":
            plan_doc = request.context.get("plan") or {}
            key = f"{plan_doc.get('plan_id')}@{plan_doc.get('version')}"
            self.call_counts[("verify", key)] += 1
            verdict = self._lookup("verify", key)
            return verdict if verdict is not None else {"verdict": "approve", "issues": []}
        if kind == "refine":
            plan_doc = request.context.get("plan") or {}
            key = f"{plan_doc.get('plan_id')}@{plan_doc.get('version')}"
            self.call_counts[("refine", key)] += 1
            document = self._lookup("refine", key)
            return {"plan": document} if document is not None else {"text": "no refinement"}
        if kind == "replan":
            self.call_counts[("replan", request.objective)] += 1
            decision = self._lookup("replans", request.objective)
            if decision is not None:
                return decision
            failed = [
                record for record in request.context.get("past_steps", ())
                if record.get("outcome") not in ("succeeded", "skipped")
            ]
            if failed:
                return {"decision": "continue"}
            final = (self.fixtures.get("final") or {}).get(
                request.objective, "Objective complete."
            )
            return {"decision": "complete", "response": final}
        if kind == "milestones":
            self.call_counts[("milestones", request.objective)] += 1
            milestones = (self.fixtures.get("milestones") or {}).get(request.objective)
            return {"milestones": milestones or [request.objective]}
        if kind == "quarantined_extract":
            self.call_counts[("quarantined_extract", "")] += 1
            return {"fields": self._extract_fields(request)}
        raise BackendUnavailable(f"scripted backend cannot serve kind {kind!r}")

    def _extract_fields(self, request: ReasonerRequest) -> dict[str, str]:
        raw: str = request.context.get("raw", "")
        schema: Sequence[str] = request.context.get("schema", ())
        overrides: Mapping[str, str] = self.fixtures.get("extract") or {}
        fields: dict[str, str] = {}
        for name in schema:
            if name in overrides:
                match = re.search(overrides[name], raw)
                if match:
                    fields[name] = match.group(1) if match.groups() else match.group(0)
                continue
            if name == "temperature":
                match = _TEMPERATURE_RE.search(raw)
                if match:
                    fields[name] = match.group(0)
            elif name == "condition":
                lowered = raw.lower()
                for condition in _CONDITIONS:
                    if condition in lowered:
                        fields[name] = condition
                        break
            elif name == "summary":
                clean = sanitize_input(TaintedText(raw, Taint.untrusted, "extract")).value
                fields[name] = clean.content[:200]
        return fields


# --- remote backend -----------------------------------------------------------

class RemoteBackend:
    """HTTP backend: POSTs the ReasonerRequest document, expects a JSON response."""

    def __init__(self, identity: str, endpoint: str, timeout_s: float = 30.0) -> None:
        self.identity = identity
        self.endpoint = endpoint
        self.timeout_s = timeout_s

    def respond(self, request: ReasonerRequest) -> Mapping[str, Any]:
        import requests  # deferred: only remote deployments need it

        try:
            response = requests.post(
                self.endpoint, json=request.as_dict(), timeout=self.timeout_s
            )
            response.raise_for_status()
            document = response.json()
        except requests.RequestException as exc:
            raise BackendUnavailable(f"remote backend {self.endpoint}: {exc}") from exc
        if not isinstance(document, Mapping):
            raise BackendUnavailable("remote backend returned a non-object response")
        return document


# --- operations ---------------------------------------------------------------

PLAN_RETRY_LIMIT = 2  # retries after the first attempt
REFINE_LIMIT = 3
REPLAN_LIMIT = 3


def _parse_backend_plan(response: Mapping[str, Any], where: str) -> Plan:
    document = response.get("plan")
    if document is None:
        raise MalformedPlanOutput(f"{where}: backend response carries no plan document")
    try:
        return parse_plan(document)
    except PlanExecError as exc:
        raise MalformedPlanOutput(f"{where}: {exc}") from exc


def plan(
    objective: str,
    tool_catalog: Sequence[Mapping[str, str]],
    policy: PolicySet,
    backend: Backend,
) -> Plan:
    """Ask the planner backend for a plan; retried on malformed output, version=1."""
    request = ReasonerRequest("plan", objective, tuple(tool_catalog))
    last_error: Optional[Exception] = None
    for _ in range(1 + PLAN_RETRY_LIMIT):
        try:
            produced = _parse_backend_plan(backend.respond(request), "plan")
            return produced.with_version(1)
        except MalformedPlanOutput as exc:
            last_error = exc
    raise MalformedPlanOutput(f"planner kept emitting malformed plans: {last_error}")


def verify(current_plan: Plan, policy: PolicySet, backend: Backend) -> VerifierVerdict:
    """Structural checks always run; the backend can only add issues, never waive them."""
    issues: list[VerifierIssue] = []
    for violation in validate_dag(current_plan):
        issues.append(VerifierIssue(violation.step_id, str(violation)))
    for violation in validate_plan_against_policy(current_plan, policy):
        issues.append(VerifierIssue(violation.step_id, str(violation)))

    request = ReasonerRequest(
        "verify",
        current_plan.objective,
        context={"plan": serialize_plan(current_plan)},
    )
    response = backend.respond(request)
    if response.get("verdict") == "reject":
        for issue in response.get("issues", ()):
            issues.append(
                VerifierIssue(str(issue.get("step_id", "")), str(issue.get("reason", "")))
            )
    if issues:
        return VerifierVerdict("reject", tuple(issues))
    return VerifierVerdict("approve")


def refine(current_plan: Plan, verdict: VerifierVerdict, backend: Backend) -> Plan:
    """One refinement round; the caller owns the verify/refine loop bound."""
    if verdict.approved:
        raise ValueError("refine requires a rejecting verdict")
    request = ReasonerRequest(
        "refine",
        current_plan.objective,
        context={
            "plan": serialize_plan(current_plan),
            "issues": [i.as_dict() for i in verdict.issues],
        },
    )
    refined = _parse_backend_plan(backend.respond(request), "refine")
    return refined.with_version(current_plan.version + 1)


def replan(
    objective: str,
    current_plan: Plan,
    past_steps: Sequence[Mapping[str, Any]],
    backend: Backend,
) -> ReplanDecision:
    """Decision given the three context items: objective, prior plan, step history.

    past_steps entries must already be sanitized summaries (plain data, no raw
    untrusted text) — the request constructor enforces this.
    """
    request = ReasonerRequest(
        "replan",
        objective,
        context={
            "plan": serialize_plan(current_plan),
            "past_steps": [dict(record) for record in past_steps],
        },
    )
    response = backend.respond(request)
    decision = response.get("decision")
    if decision == "complete":
        return ReplanDecision.complete(str(response.get("response", "")))
    if decision == "continue":
        return ReplanDecision.continue_plan()
    if decision == "new_plan":
        produced = _parse_backend_plan(response, "replan")
        violations = validate_dag(produced)
        if violations:
            raise MalformedPlanOutput(f"replan produced invalid plan: {violations[0]}")
        return ReplanDecision.new_plan(produced.with_version(current_plan.version + 1))
    raise MalformedPlanOutput(f"replan backend returned unknown decision {decision!r}")


def quarantined_extract(
    raw: TaintedText,
    schema: Sequence[str],
    backend: Backend,
) -> dict[str, TaintedText]:
    """Schema-bound extraction from untrusted text; output fields stay untrusted.

    Only the declared field names can appear — instruction-like content in the
    raw text cannot add fields, rename fields, or escape as free text.
    """
    if not schema:
        raise ExtractionFailed("extraction schema declares zero fields")
    request = ReasonerRequest(
        "quarantined_extract",
        objective="",
        context={"raw": raw.content, "schema": list(schema)},
    )
    response = backend.respond(request)
    fields = response.get("fields")
    if not isinstance(fields, Mapping):
        raise ExtractionFailed("extractor returned no field map")
    missing = [name for name in schema if name not in fields]
    if missing:
        raise ExtractionFailed(f"content lacks requested fields: {missing}")
    # Schema binding: anything beyond the declared fields is dropped.
    return {
        name: TaintedText(str(fields[name]), Taint.untrusted, raw.origin)
        for name in schema
    }


def hierarchical_plan(
    objective: str,
    tool_catalog: Sequence[Mapping[str, str]],
    policy: PolicySet,
    backend: Backend,
    expansion_retries: int = 2,
) -> Plan:
    """Milestone blueprint first, then per-milestone sub-plans merged into one DAG.

    Step ids are namespaced m{i}. per milestone; each milestone's roots depend
    on the previous milestone's leaves. A milestone whose expansion fails
    validation is re-expanded alone — siblings are never regenerated.
    """
    blueprint = backend.respond(
        ReasonerRequest("milestones", objective, tuple(tool_catalog))
    )
    milestones = blueprint.get("milestones")
    if not isinstance(milestones, list) or not milestones:
        raise MalformedPlanOutput("milestone blueprint missing or empty")
    if len(milestones) == 1:
        return plan(str(milestones[0]), tool_catalog, policy, backend)

    merged_steps: list[dict[str, Any]] = []
    previous_leaves: list[str] = []
    seen_ids: set[str] = set()
    for index, milestone in enumerate(milestones, start=1):
        prefix = f"m{index}."
        subplan: Optional[Plan] = None
        for _ in range(1 + expansion_retries):
            candidate = plan(str(milestone), tool_catalog, policy, backend)
            if not validate_plan_against_policy(candidate, policy):
                subplan = candidate
                break
        if subplan is None:
            raise MalformedPlanOutput(
                f"milestone {index} ({milestone!r}) kept failing policy validation"
            )
        local_ids = {step.id for step in subplan.steps}
        depended_on = {d for step in subplan.steps for d in step.depends_on}
        leaves = [prefix + step.id for step in subplan.steps if step.id not in depended_on]
        for step in subplan.steps:
            namespaced = prefix + step.id
            if namespaced in seen_ids:
                raise SubplanConflict(f"duplicate step id {namespaced!r} across milestones")
            seen_ids.add(namespaced)
            document = {
                "id": namespaced,
                "task": step.description,
                "role": step.role,
                "depends_on": sorted(
                    [prefix + d for d in step.depends_on if d in local_ids]
                ),
                "risk": step.risk.value,
            }
            if step.tool_grants is not None:
                document["tools"] = list(step.tool_grants)
            if not step.depends_on:
                document["depends_on"] = list(previous_leaves)
            if step.fallback is not None:
                document["on_failure"] = {
                    "goto": prefix + step.fallback.on_failure_goto,
                    "max_activations": step.fallback.max_activations,
                }
            if step.isolation_override is not None:
                document["isolation"] = step.isolation_override.value
            if step.agent is not None:
                document["agent"] = step.agent
            merged_steps.append(document)
        previous_leaves = leaves

    merged = parse_plan(
        {
            "plan_id": "hplan-" + hashlib.sha256(objective.encode("utf-8")).hexdigest()[:8],
            "objective": objective,
            "version": 1,
            "steps": merged_steps,
        }
    )
    return merged
