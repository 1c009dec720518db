"""Least-privilege policy: role ceilings, task-over-agent tool scoping, isolation tiers.

Policy document format (UTF-8 JSON):

    {roles: {NAME: {tools: [..], isolation, may_approve_high_risk?}},
     agents: {NAME: {tools: [..]}},
     high_risk_tools: [..]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional

from .errors import (
    EmptyGrant,
    RoleUnknown,
    SchemaError,
    UnknownToolReference,
    WeakeningForbidden,
)
from .plan import IsolationTier, Plan, PlanStep, Risk, tier_rank


@dataclass(frozen=True)
class RolePolicy:
    """Durable upper bound of what any step under this role may ever do."""

    role: str
    allowed_tools: frozenset[str]
    isolation_tier: IsolationTier
    may_approve_high_risk: bool = False


@dataclass(frozen=True)
class AgentProfile:
    name: str
    default_tools: frozenset[str]


@dataclass(frozen=True)
class PolicySet:
    roles: Mapping[str, RolePolicy]
    agents: Mapping[str, AgentProfile] = field(default_factory=dict)
    high_risk_tools: frozenset[str] = field(default_factory=frozenset)


@dataclass(frozen=True)
class PolicyViolation:
    kind: str  # RoleUnknown | CeilingExceeded | RiskUnderdeclared
    step_id: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}({self.step_id}): {self.detail}"


def load_policy(
    document: str | Mapping[str, Any],
    known_tools: Optional[Iterable[str]] = None,
) -> PolicySet:
    """Load and validate a policy document.

    When known_tools is given, every agent tool and high-risk tool must be a
    registered tool name.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"policy document is not valid JSON: {exc}") from None
    if not isinstance(document, Mapping):
        raise SchemaError("policy document must be a JSON object")

    roles_raw = document.get("roles")
    if not isinstance(roles_raw, Mapping) or not roles_raw:
        raise SchemaError("policy must define a nonempty 'roles' map")

    roles: dict[str, RolePolicy] = {}
    for name, raw in roles_raw.items():
        if not isinstance(raw, Mapping):
            raise SchemaError(f"role {name!r} must be an object")
        tools = raw.get("tools", [])
        if not isinstance(tools, list) or not all(isinstance(t, str) for t in tools):
            raise SchemaError(f"role {name!r}: 'tools' must be a list of strings")
        try:
            tier = IsolationTier(raw.get("isolation", "native_readonly"))
        except ValueError:
            raise SchemaError(f"role {name!r}: invalid isolation tier") from None
        roles[name] = RolePolicy(
            role=name,
            allowed_tools=frozenset(tools),
            isolation_tier=tier,
            may_approve_high_risk=bool(raw.get("may_approve_high_risk", False)),
        )

    agents: dict[str, AgentProfile] = {}
    for name, raw in (document.get("agents") or {}).items():
        if not isinstance(raw, Mapping):
            raise SchemaError(f"agent {name!r} must be an object")
        tools = raw.get("tools", [])
        if not isinstance(tools, list) or not all(isinstance(t, str) for t in tools):
            raise SchemaError(f"agent {name!r}: 'tools' must be a list of strings")
        agents[name] = AgentProfile(name=name, default_tools=frozenset(tools))

    high_risk = document.get("high_risk_tools", [])
    if not isinstance(high_risk, list) or not all(isinstance(t, str) for t in high_risk):
        raise SchemaError("'high_risk_tools' must be a list of strings")

    if known_tools is not None:
        registry = set(known_tools)
        for tool in high_risk:
            if tool not in registry:
                raise UnknownToolReference(f"high_risk_tools references unknown tool {tool!r}")
        for agent in agents.values():
            for tool in sorted(agent.default_tools - registry):
                raise UnknownToolReference(
                    f"agent {agent.name!r} references unknown tool {tool!r}"
                )

    return PolicySet(roles=roles, agents=agents, high_risk_tools=frozenset(high_risk))


def effective_tools(
    step: PlanStep,
    agent: Optional[AgentProfile],
    policy: PolicySet,
) -> frozenset[str]:
    """Task-overrides-agent grant, clamped to the role ceiling.

    Declared step tools win outright; only when undeclared does the agent's
    default toolset apply. The role ceiling always dominates.
    """
    role = policy.roles.get(step.role)
    if role is None:
        raise RoleUnknown(f"step {step.id!r}: role {step.role!r} not in policy")
    if step.tool_grants is not None:
        requested = frozenset(step.tool_grants)
    elif agent is not None:
        requested = agent.default_tools
    else:
        requested = frozenset()
    granted = requested & role.allowed_tools
    if not granted:
        raise EmptyGrant(
            f"step {step.id!r}: no lawful tools (requested {sorted(requested)}, "
            f"ceiling {sorted(role.allowed_tools)})"
        )
    return granted


def validate_plan_against_policy(plan: Plan, policy: PolicySet) -> list[PolicyViolation]:
    """Static admissibility check; one entry per problem, empty list = admissible."""
    violations: list[PolicyViolation] = []
    for step in plan.steps:
        role = policy.roles.get(step.role)
        if role is None:
            violations.append(
                PolicyViolation("RoleUnknown", step.id, f"role {step.role!r} not in policy")
            )
            continue
        grants = step.tool_grants or ()
        for tool in grants:
            if tool not in role.allowed_tools:
                violations.append(
                    PolicyViolation(
                        "CeilingExceeded",
                        step.id,
                        f"tool {tool!r} exceeds role {step.role!r} ceiling",
                    )
                )
        if step.risk == Risk.low:
            risky = sorted(set(grants) & policy.high_risk_tools)
            if risky:
                violations.append(
                    PolicyViolation(
                        "RiskUnderdeclared",
                        step.id,
                        f"uses high-risk tools {risky} but declares risk=low",
                    )
                )
    return violations


def isolation_for(step: PlanStep, policy: PolicySet) -> IsolationTier:
    """The tier a step must execute under; overrides may only strengthen."""
    role = policy.roles.get(step.role)
    if role is None:
        raise RoleUnknown(f"step {step.id!r}: role {step.role!r} not in policy")
    if step.isolation_override is None:
        return role.isolation_tier
    if tier_rank(step.isolation_override) < tier_rank(role.isolation_tier):
        raise WeakeningForbidden(
            f"step {step.id!r}: override {step.isolation_override.value} is weaker "
            f"than role tier {role.isolation_tier.value}"
        )
    return step.isolation_override
