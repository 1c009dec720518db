"""The structured plan artifact: an immutable DAG of steps with fallback edges.

The external document format is UTF-8 JSON:

    {plan_id, objective, version,
     steps: [{id, task, role, tools: [..], depends_on: [..],
              on_failure: {goto, max_activations}?, risk?, isolation?, agent?}]}

Field names are normative for interop with the operator console.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from graphlib import CycleError, TopologicalSorter
from typing import Any, Iterator, Mapping, Optional

from .errors import (
    CycleDetected,
    DanglingDependency,
    DuplicateId,
    EmptyPlan,
    SchemaError,
    UnknownStep,
)


class Risk(str, Enum):
    low = "low"
    high = "high"


class IsolationTier(str, Enum):
    native_readonly = "native_readonly"
    restricted_subprocess = "restricted_subprocess"
    container = "container"


_TIER_RANK = {
    IsolationTier.native_readonly: 0,
    IsolationTier.restricted_subprocess: 1,
    IsolationTier.container: 2,
}


def tier_rank(tier: IsolationTier) -> int:
    """Strength ordering: native_readonly < restricted_subprocess < container."""
    return _TIER_RANK[tier]


class StepStatus(str, Enum):
    pending = "pending"
    ready = "ready"
    awaiting_approval = "awaiting_approval"
    running = "running"
    succeeded = "succeeded"
    failed = "failed"
    skipped = "skipped"


@dataclass(frozen=True)
class FallbackEdge:
    """Pre-planned alternate step activated when the owning step fails."""

    on_failure_goto: str
    max_activations: int = 1


@dataclass(frozen=True)
class PlanStep:
    id: str
    description: str
    role: str
    # None means "not declared": the step inherits the agent's default tools.
    tool_grants: Optional[tuple[str, ...]] = None
    depends_on: frozenset[str] = field(default_factory=frozenset)
    fallback: Optional[FallbackEdge] = None
    risk: Risk = Risk.low
    isolation_override: Optional[IsolationTier] = None
    agent: Optional[str] = None


@dataclass(frozen=True)
class Plan:
    plan_id: str
    objective: str
    steps: tuple[PlanStep, ...]
    version: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "_by_id", {s.id: s for s in self.steps})

    @property
    def step_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.steps)

    def step(self, step_id: str) -> PlanStep:
        try:
            return self._by_id[step_id]  # type: ignore[attr-defined]
        except KeyError:
            raise UnknownStep(f"no step {step_id!r} in plan {self.plan_id!r}") from None

    def has_step(self, step_id: str) -> bool:
        return step_id in self._by_id  # type: ignore[attr-defined]

    def fallback_targets(self) -> frozenset[str]:
        return frozenset(
            s.fallback.on_failure_goto for s in self.steps if s.fallback is not None
        )

    def with_version(self, version: int) -> "Plan":
        return replace(self, version=version)


@dataclass(frozen=True)
class Violation:
    """One structural problem found by validate_dag. Violations are data, not faults."""

    kind: str  # DuplicateId | DanglingDependency | CycleDetected | FallbackDangling | FallbackCycle
    step_id: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}({self.step_id}): {self.detail}"


@dataclass(frozen=True)
class FallbackDecision:
    activated: bool
    target: Optional[str] = None

    @staticmethod
    def activate(target: str) -> "FallbackDecision":
        return FallbackDecision(True, target)

    @staticmethod
    def exhausted() -> "FallbackDecision":
        return FallbackDecision(False)


# --- parsing -----------------------------------------------------------------

def _require(obj: Mapping[str, Any], key: str, kind: type, where: str) -> Any:
    if key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        raise SchemaError(f"{where}: field {key!r} must be {kind.__name__}")
    return value


def _parse_step(raw: Any, index: int) -> PlanStep:
    where = f"steps[{index}]"
    if not isinstance(raw, Mapping):
        raise SchemaError(f"{where}: step must be an object")
    step_id = raw.get("id")
    if step_id is None:
        step_id = f"step-{index + 1}"
    if not isinstance(step_id, str) or not step_id:
        raise SchemaError(f"{where}: field 'id' must be a nonempty string")
    description = _require(raw, "task", str, where)
    role = _require(raw, "role", str, where)

    tool_grants: Optional[tuple[str, ...]] = None
    if "tools" in raw:
        tools = raw["tools"]
        if not isinstance(tools, list) or not all(isinstance(t, str) for t in tools):
            raise SchemaError(f"{where}: field 'tools' must be a list of strings")
        if not tools:
            raise SchemaError(f"{where}: declared 'tools' must be nonempty")
        # ordered set: preserve first occurrence
        seen: dict[str, None] = {}
        for t in tools:
            seen.setdefault(t)
        tool_grants = tuple(seen)

    depends = raw.get("depends_on", [])
    if not isinstance(depends, list) or not all(isinstance(d, str) for d in depends):
        raise SchemaError(f"{where}: field 'depends_on' must be a list of strings")

    fallback = None
    if raw.get("on_failure") is not None:
        of = raw["on_failure"]
        if not isinstance(of, Mapping):
            raise SchemaError(f"{where}: field 'on_failure' must be an object")
        goto = _require(of, "goto", str, f"{where}.on_failure")
        max_act = of.get("max_activations", 1)
        if not isinstance(max_act, int) or max_act < 1:
            raise SchemaError(f"{where}: 'max_activations' must be a positive integer")
        fallback = FallbackEdge(on_failure_goto=goto, max_activations=max_act)

    risk_raw = raw.get("risk", "low")
    try:
        risk = Risk(risk_raw)
    except ValueError:
        raise SchemaError(f"{where}: invalid risk {risk_raw!r}") from None

    isolation = None
    if raw.get("isolation") is not None:
        try:
            isolation = IsolationTier(raw["isolation"])
        except ValueError:
            raise SchemaError(f"{where}: invalid isolation {raw['isolation']!r}") from None

    agent = raw.get("agent")
    if agent is not None and not isinstance(agent, str):
        raise SchemaError(f"{where}: field 'agent' must be a string")

    return PlanStep(
        id=step_id,
        description=description,
        role=role,
        tool_grants=tool_grants,
        depends_on=frozenset(depends),
        fallback=fallback,
        risk=risk,
        isolation_override=isolation,
        agent=agent,
    )


def parse_plan(document: str | Mapping[str, Any]) -> Plan:
    """Parse and fully validate a plan document; raises on the first violation."""
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"plan document is not valid JSON: {exc}") from None
    if not isinstance(document, Mapping):
        raise SchemaError("plan document must be a JSON object")

    plan_id = document.get("plan_id", "plan")
    if not isinstance(plan_id, str) or not plan_id:
        raise SchemaError("field 'plan_id' must be a nonempty string")
    objective = document.get("objective", "")
    if not isinstance(objective, str):
        raise SchemaError("field 'objective' must be a string")
    version = document.get("version", 1)
    if not isinstance(version, int) or version < 1:
        raise SchemaError("field 'version' must be a positive integer")
    steps_raw = _require(document, "steps", list, "plan")
    if not steps_raw:
        raise EmptyPlan("plan has zero steps")

    steps = tuple(_parse_step(raw, i) for i, raw in enumerate(steps_raw))
    plan = Plan(plan_id=plan_id, objective=objective, steps=steps, version=version)

    for violation in validate_dag(plan):
        raise _VIOLATION_ERRORS[violation.kind](str(violation))
    return plan


_VIOLATION_ERRORS = {
    "DuplicateId": DuplicateId,
    "DanglingDependency": DanglingDependency,
    "CycleDetected": CycleDetected,
    "FallbackDangling": DanglingDependency,
    "FallbackCycle": CycleDetected,
}


# --- validation --------------------------------------------------------------

def _ancestors(plan: Plan, step_id: str) -> set[str]:
    """Transitive dependency closure of a step (excluding itself unless cyclic)."""
    out: set[str] = set()
    stack = [d for d in plan.step(step_id).depends_on if plan.has_step(d)]
    while stack:
        cur = stack.pop()
        if cur in out:
            continue
        out.add(cur)
        stack.extend(d for d in plan.step(cur).depends_on if plan.has_step(d))
    return out


def validate_dag(plan: Plan) -> list[Violation]:
    """Report every structural violation; an empty report means the plan is valid."""
    violations: list[Violation] = []
    seen: set[str] = set()
    for step in plan.steps:
        if step.id in seen:
            violations.append(Violation("DuplicateId", step.id, "step id declared twice"))
        seen.add(step.id)

    ids = {s.id for s in plan.steps}
    for step in plan.steps:
        for dep in sorted(step.depends_on):
            if dep == step.id:
                violations.append(
                    Violation("CycleDetected", step.id, "step depends on itself")
                )
            elif dep not in ids:
                violations.append(
                    Violation("DanglingDependency", step.id, f"depends on unknown step {dep!r}")
                )

    # cycle detection over dependency edges that resolve
    sorter = TopologicalSorter(
        {s.id: {d for d in s.depends_on if d in ids and d != s.id} for s in plan.steps}
    )
    try:
        sorter.prepare()
    except CycleError as exc:
        cycle = exc.args[1]
        violations.append(
            Violation("CycleDetected", cycle[0], "dependency cycle: " + " -> ".join(cycle))
        )

    for step in plan.steps:
        if step.fallback is None:
            continue
        target = step.fallback.on_failure_goto
        if target not in ids:
            violations.append(
                Violation("FallbackDangling", step.id, f"fallback targets unknown step {target!r}")
            )
        elif target == step.id or target in _ancestors(plan, step.id):
            violations.append(
                Violation("FallbackCycle", step.id, f"fallback targets ancestor {target!r}")
            )
    return violations


# --- readiness and fallback --------------------------------------------------

def _dependency_satisfied(plan: Plan, statuses: Mapping[str, StepStatus], dep: str) -> bool:
    status = statuses[dep]
    if status == StepStatus.succeeded or status == StepStatus.skipped:
        return True
    return False


def ready_steps(plan: Plan, statuses: Mapping[str, StepStatus]) -> list[str]:
    """Pending steps whose dependencies are all satisfied, ordered by step id."""
    if set(statuses) != set(plan.step_ids):
        raise UnknownStep("status map keyset must equal the plan's step ids")
    out = [
        s.id
        for s in plan.steps
        if statuses[s.id] == StepStatus.pending
        and all(_dependency_satisfied(plan, statuses, d) for d in s.depends_on)
    ]
    return sorted(out)


def apply_fallback(plan: Plan, failed_step: str, activation_count: int) -> FallbackDecision:
    """Decide whether a failed step's fallback may still activate.

    activation_count is the total activations already spent on the chain's
    original step; local recovery is bounded before control returns for replan.
    """
    step = plan.step(failed_step)
    if step.fallback is None:
        return FallbackDecision.exhausted()
    if activation_count >= step.fallback.max_activations:
        return FallbackDecision.exhausted()
    return FallbackDecision.activate(step.fallback.on_failure_goto)


# --- serialization -----------------------------------------------------------

def serialize_step(step: PlanStep) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "id": step.id,
        "task": step.description,
        "role": step.role,
        "depends_on": sorted(step.depends_on),
        "risk": step.risk.value,
    }
    if step.tool_grants is not None:
        doc["tools"] = list(step.tool_grants)
    if step.fallback is not None:
        doc["on_failure"] = {
            "goto": step.fallback.on_failure_goto,
            "max_activations": step.fallback.max_activations,
        }
    if step.isolation_override is not None:
        doc["isolation"] = step.isolation_override.value
    if step.agent is not None:
        doc["agent"] = step.agent
    return doc


def serialize_plan(plan: Plan) -> dict[str, Any]:
    """Document form; parse_plan(serialize_plan(p)) is structurally identical to p."""
    return {
        "plan_id": plan.plan_id,
        "objective": plan.objective,
        "version": plan.version,
        "steps": [serialize_step(s) for s in plan.steps],
    }


def plan_to_json(plan: Plan) -> str:
    return json.dumps(serialize_plan(plan), ensure_ascii=False, indent=2)
