"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class PlanExecError(Exception):
    """Base class for all engine errors."""


# --- plan model ---

class SchemaError(PlanExecError):
    """Document is missing a field or a field has the wrong type."""


class EmptyPlan(PlanExecError):
    """Plan contains zero steps."""


class DuplicateId(PlanExecError):
    """Two steps share an id."""


class DanglingDependency(PlanExecError):
    """A step depends on (or falls back to) an id not present in the plan."""


class CycleDetected(PlanExecError):
    """Dependency or fallback edges form a cycle."""


class UnknownStep(PlanExecError):
    """A status map does not cover exactly the plan's step ids."""


# --- policy ---

class RoleUnknown(PlanExecError):
    """Step references a role the policy does not define."""


class EmptyGrant(PlanExecError):
    """Grant intersection with the role ceiling is empty; step cannot lawfully run."""


class WeakeningForbidden(PlanExecError):
    """Isolation override requested a tier weaker than the role mandates."""


class UnknownToolReference(PlanExecError):
    """Policy references a tool name that is not registered."""


# --- tools ---

class DuplicateTool(PlanExecError):
    """Tool name already registered."""


class UnknownTool(PlanExecError):
    """Tool name not present in the registry."""


class ToolDenied(PlanExecError):
    """Invocation attempted outside the step's granted tool set."""


class ToolFailed(PlanExecError):
    """Tool behavior raised or refused the invocation."""


class TierInsufficient(PlanExecError):
    """Step's isolation tier is below the tool's required tier."""


# --- reasoners ---

class BackendUnavailable(PlanExecError):
    """Reasoning backend could not be reached."""


class MalformedPlanOutput(PlanExecError):
    """Backend emitted output that does not conform to the plan schema."""


class RefinementExhausted(PlanExecError):
    """Verify/refine loop bound hit with issues remaining."""


class ReplanLimitExceeded(PlanExecError):
    """Per-run replan bound breached."""


class ExtractionFailed(PlanExecError):
    """Quarantined extraction could not produce the requested fields."""


class SubplanConflict(PlanExecError):
    """Milestone expansion produced irreconcilable duplicate step ids."""


class PrivilegeViolation(PlanExecError):
    """Raw untrusted text reached a privileged reasoner request."""


# --- orchestrator ---

class ConfigError(PlanExecError):
    """Run configuration invalid (duplicate run id, planner==verifier, ...)."""


class ApprovalPending(PlanExecError):
    """Not a fault: the run cannot advance until a human resolves an approval."""


class StepDenied(PlanExecError):
    """Policy re-check at execution time refused the step."""


class StepFailed(PlanExecError):
    """Step failed after fallback accounting."""


class UnknownApproval(PlanExecError):
    """Approval id not found for the run."""


class AlreadyResolved(PlanExecError):
    """Approval was resolved earlier."""


# --- sandbox ---

class DriverUnavailable(PlanExecError):
    """Requested isolation tier has no configured driver and no permitted downgrade."""


class EnvReused(PlanExecError):
    """Execution environments are single-use."""


class SetupFailed(PlanExecError):
    """Sandbox could not stage or start the program."""


# --- service / persistence ---

class SequenceGap(PlanExecError):
    """Appended event does not continue the gapless sequence."""


class StorageFailure(PlanExecError):
    """Durable append failed."""


class UnknownRun(PlanExecError):
    """Run id not present in the store."""


class CorruptLog(PlanExecError):
    """Event log has a gap or a malformed record."""


class ScenarioError(PlanExecError):
    """Attack scenario file invalid or inconsistent."""
