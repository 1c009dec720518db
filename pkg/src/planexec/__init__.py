"""planexec: a provider-agnostic plan-then-execute agent orchestration engine.

Frozen-plan control-flow integrity, least-privilege tool scoping with role
ceilings, tiered sandboxed execution, re-planning, human-in-the-loop approval
gates, and an adversarial injection harness.
"""

from .errors import PlanExecError
from .orchestrator import Engine, HitlMode, Phase, RunState, apply_event, replay, trace_events
from .plan import (
    FallbackEdge,
    IsolationTier,
    Plan,
    PlanStep,
    Risk,
    StepStatus,
    apply_fallback,
    parse_plan,
    plan_to_json,
    ready_steps,
    serialize_plan,
    validate_dag,
)
from .policy import (
    AgentProfile,
    PolicySet,
    RolePolicy,
    effective_tools,
    isolation_for,
    load_policy,
    validate_plan_against_policy,
)
from .reasoners import (
    Backend,
    RemoteBackend,
    ReplanDecision,
    ScriptedBackend,
    VerifierVerdict,
    hierarchical_plan,
    quarantined_extract,
    refine,
    replan,
    verify,
)
from .sandbox import ExecutionOutcome, Limits, SandboxManager
from .scheduler import compute_waves, next_dispatch, run_waves
from .store import FileEventStore, MemoryEventStore
from .tools import (
    FilterConfig,
    FilterReport,
    Taint,
    TaintedText,
    ToolDescriptor,
    ToolRegistry,
    builtin_registry,
    filter_output,
    sanitize_input,
)

__version__ = "1.0.0"

__all__ = [
    "AgentProfile",
    "Backend",
    "Engine",
    "ExecutionOutcome",
    "FallbackEdge",
    "FileEventStore",
    "FilterConfig",
    "FilterReport",
    "HitlMode",
    "IsolationTier",
    "Limits",
    "MemoryEventStore",
    "Phase",
    "Plan",
    "PlanExecError",
    "PlanStep",
    "PolicySet",
    "RemoteBackend",
    "ReplanDecision",
    "Risk",
    "RolePolicy",
    "RunState",
    "SandboxManager",
    "ScriptedBackend",
    "StepStatus",
    "Taint",
    "TaintedText",
    "ToolDescriptor",
    "ToolRegistry",
    "VerifierVerdict",
    "apply_event",
    "apply_fallback",
    "builtin_registry",
    "compute_waves",
    "effective_tools",
    "filter_output",
    "hierarchical_plan",
    "isolation_for",
    "load_policy",
    "next_dispatch",
    "parse_plan",
    "plan_to_json",
    "quarantined_extract",
    "ready_steps",
    "refine",
    "replan",
    "replay",
    "run_waves",
    "sanitize_input",
    "serialize_plan",
    "trace_events",
    "validate_dag",
    "validate_plan_against_policy",
    "verify",
]
