"""Plan model: parsing, DAG validation, readiness, fallback, serialization."""

from __future__ import annotations

import json
import random

import pytest

from planexec import (
    StepStatus,
    apply_fallback,
    parse_plan,
    ready_steps,
    serialize_plan,
    validate_dag,
)
from planexec.errors import (
    CycleDetected,
    DanglingDependency,
    DuplicateId,
    EmptyPlan,
    SchemaError,
    UnknownStep,
)
from tests.conftest import DIAMOND_PLAN


def test_parse_diamond_plan():
    plan = parse_plan(DIAMOND_PLAN)
    assert plan.plan_id == "diamond"
    assert plan.step_ids == ("A", "B", "C", "D")
    assert plan.step("D").depends_on == frozenset({"B", "C"})
    assert plan.step("A").tool_grants == ("scripted_search",)


def test_parse_accepts_json_text():
    plan = parse_plan(json.dumps(DIAMOND_PLAN))
    assert plan.version == 1


def test_step_id_auto_assigned_and_fields_mapped():
    # step objects without ids get positional ids; role and tools carry over
    document = {
        "plan_id": "p",
        "objective": "extract feedback",
        "steps": [
            {"task": "extract_customer_feedback", "agent": "feedbackBot",
             "role": "DataReader", "tools": ["read_file", "summarise_text"]},
        ],
    }
    plan = parse_plan(document)
    step = plan.steps[0]
    assert step.id == "step-1"
    assert step.role == "DataReader"
    assert step.tool_grants == ("read_file", "summarise_text")
    assert step.agent == "feedbackBot"


def test_empty_plan_rejected():
    with pytest.raises(EmptyPlan):
        parse_plan({"plan_id": "p", "objective": "", "steps": []})


def test_cycle_rejected():
    document = {
        "plan_id": "p", "objective": "", "steps": [
            {"id": "A", "task": "a", "role": "R", "tools": ["t"], "depends_on": ["C"]},
            {"id": "B", "task": "b", "role": "R", "tools": ["t"], "depends_on": ["A"]},
            {"id": "C", "task": "c", "role": "R", "tools": ["t"], "depends_on": ["B"]},
        ],
    }
    with pytest.raises(CycleDetected):
        parse_plan(document)


@pytest.mark.parametrize(
    "mutation, error",
    [
        (lambda d: d["steps"][0].pop("task"), SchemaError),
        (lambda d: d["steps"][0].update(tools=[]), SchemaError),
        (lambda d: d["steps"][1].update(id="A"), DuplicateId),
        (lambda d: d["steps"][1].update(depends_on=["ZZ"]), DanglingDependency),
        (lambda d: d["steps"][0].update(depends_on=["A"]), CycleDetected),
        (lambda d: d.update(version=0), SchemaError),
        (lambda d: d["steps"][0].update(risk="extreme"), SchemaError),
        (lambda d: d["steps"][0].update(on_failure={"goto": "nowhere"}), DanglingDependency),
    ],
)
def test_malformed_documents_raise_specified_errors(mutation, error):
    document = json.loads(json.dumps(DIAMOND_PLAN))
    mutation(document)
    with pytest.raises(error):
        parse_plan(document)


def test_validate_dag_reports_every_violation():
    document = {
        "plan_id": "p", "objective": "", "steps": [
            {"id": "A", "task": "a", "role": "R", "tools": ["t"]},
            {"id": "B", "task": "b", "role": "R", "tools": ["t"], "depends_on": ["Z"]},
            {"id": "B", "task": "b2", "role": "R", "tools": ["t"]},
        ],
    }
    # bypass parse_plan's fail-fast by constructing the Plan directly
    from planexec.plan import Plan, PlanStep

    plan = Plan(
        plan_id="p", objective="", steps=(
            PlanStep(id="A", description="a", role="R", tool_grants=("t",)),
            PlanStep(id="B", description="b", role="R", tool_grants=("t",),
                     depends_on=frozenset({"Z"})),
            PlanStep(id="B", description="b2", role="R", tool_grants=("t",)),
        ),
    )
    kinds = {v.kind for v in validate_dag(plan)}
    assert "DuplicateId" in kinds
    assert "DanglingDependency" in kinds


def test_fallback_to_ancestor_rejected():
    document = {
        "plan_id": "p", "objective": "", "steps": [
            {"id": "A", "task": "a", "role": "R", "tools": ["t"]},
            {"id": "D", "task": "d", "role": "R", "tools": ["t"], "depends_on": ["A"],
             "on_failure": {"goto": "A"}},
        ],
    }
    with pytest.raises(CycleDetected):
        parse_plan(document)


def test_ready_steps_diamond_progression():
    plan = parse_plan(DIAMOND_PLAN)
    statuses = {s: StepStatus.pending for s in plan.step_ids}
    assert ready_steps(plan, statuses) == ["A"]
    statuses["A"] = StepStatus.succeeded
    assert ready_steps(plan, statuses) == ["B", "C"]
    statuses["B"] = StepStatus.succeeded
    statuses["C"] = StepStatus.failed
    assert ready_steps(plan, statuses) == []  # D blocked by failed dependency


def test_ready_steps_requires_full_status_map():
    plan = parse_plan(DIAMOND_PLAN)
    with pytest.raises(UnknownStep):
        ready_steps(plan, {"A": StepStatus.pending})


def test_ready_steps_monotone_under_success():
    plan = parse_plan(DIAMOND_PLAN)
    statuses = {s: StepStatus.pending for s in plan.step_ids}
    statuses["A"] = StepStatus.succeeded
    before = set(ready_steps(plan, statuses))
    statuses["B"] = StepStatus.succeeded
    after = set(ready_steps(plan, statuses))
    still_pending = {s for s in before if statuses[s] == StepStatus.pending}
    assert still_pending <= after


def test_apply_fallback_activation_and_exhaustion():
    document = {
        "plan_id": "p", "objective": "", "steps": [
            {"id": "S", "task": "try", "role": "R", "tools": ["t"],
             "on_failure": {"goto": "S2", "max_activations": 1}},
            {"id": "S2", "task": "alternate", "role": "R", "tools": ["t"]},
            {"id": "T", "task": "no fallback", "role": "R", "tools": ["t"]},
        ],
    }
    plan = parse_plan(document)
    first = apply_fallback(plan, "S", 0)
    assert first.activated and first.target == "S2"
    # second failure on the same chain: budget of 1 already spent
    assert not apply_fallback(plan, "S", 1).activated
    assert not apply_fallback(plan, "T", 0).activated


def _random_plan_doc(rng: random.Random) -> dict:
    n = rng.randint(1, 12)
    steps = []
    for i in range(n):
        deps = sorted(rng.sample(range(i), k=rng.randint(0, min(i, 3)))) if i else []
        step = {
            "id": f"s{i}",
            "task": f"task {i}",
            "role": rng.choice(["Searcher", "Analyst", "Writer"]),
            "depends_on": [f"s{d}" for d in deps],
            "risk": rng.choice(["low", "high"]),
        }
        if rng.random() < 0.8:
            step["tools"] = rng.sample(
                ["calculator", "write_file", "scripted_search", "read_file"],
                k=rng.randint(1, 3),
            )
        if rng.random() < 0.2:
            step["isolation"] = rng.choice(
                ["native_readonly", "restricted_subprocess", "container"]
            )
        steps.append(step)
    # occasional valid forward-only fallback edge between independent steps
    if n >= 2 and rng.random() < 0.3:
        source = rng.randint(0, n - 2)
        steps[source]["on_failure"] = {
            "goto": f"s{rng.randint(source + 1, n - 1)}",
            "max_activations": rng.randint(1, 3),
        }
    return {
        "plan_id": f"plan-{rng.randint(0, 10**6)}",
        "objective": "randomized round-trip",
        "version": rng.randint(1, 9),
        "steps": steps,
    }


def test_random_round_trip_sample():
    rng = random.Random(7)
    for _ in range(100):
        document = _random_plan_doc(rng)
        try:
            plan = parse_plan(document)
        except CycleDetected:
            continue  # fallback edge occasionally lands on an ancestor
        again = parse_plan(serialize_plan(plan))
        assert again == plan
        assert serialize_plan(again) == serialize_plan(plan)


def test_random_graphs_with_injected_cycles_rejected():
    rng = random.Random(11)
    rejected = 0
    for _ in range(100):
        document = _random_plan_doc(rng)
        if len(document["steps"]) < 2:
            continue
        a, b = rng.sample(range(len(document["steps"])), 2)
        lo, hi = min(a, b), max(a, b)
        document["steps"][lo].setdefault("depends_on", []).append(
            document["steps"][hi]["id"]
        )
        document["steps"][hi].setdefault("depends_on", []).append(
            document["steps"][lo]["id"]
        )
        with pytest.raises(CycleDetected):
            parse_plan(document)
        rejected += 1
    assert rejected > 50
