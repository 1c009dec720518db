"""Shared fixtures: a standard policy, plan documents, and an engine factory."""

from __future__ import annotations

from pathlib import Path

import pytest

from planexec import Engine, MemoryEventStore, ScriptedBackend, builtin_registry, load_policy
from planexec.harness import HARNESS_POLICY_DOC


DIAMOND_PLAN = {
    "plan_id": "diamond",
    "objective": "gather, analyse twice, and report",
    "version": 1,
    "steps": [
        {"id": "A", "task": "gather the source data", "role": "Searcher",
         "tools": ["scripted_search"]},
        {"id": "B", "task": "analyse the first aspect", "role": "Analyst",
         "tools": ["calculator"], "depends_on": ["A"]},
        {"id": "C", "task": "analyse the second aspect", "role": "Analyst",
         "tools": ["calculator"], "depends_on": ["A"]},
        {"id": "D", "task": "write the combined report", "role": "Writer",
         "tools": ["write_file"], "depends_on": ["B", "C"]},
    ],
}

DIAMOND_PROGRAMS = {
    "A": [{"tool": "scripted_search", "args": {"query": "weather in SF"}}],
    "B": [{"tool": "calculator", "args": {"expression": "100 * 5"}}],
    "C": [{"tool": "calculator", "args": {"expression": "7 + 3"}}],
    "D": [{"tool": "write_file", "args": {"filename": "report.txt",
                                          "content": "{dep:B} {dep:C}"}}],
}


@pytest.fixture()
def registry():
    return builtin_registry()


@pytest.fixture()
def policy(registry):
    return load_policy(HARNESS_POLICY_DOC, known_tools=registry.names())


@pytest.fixture()
def diamond_plan_doc():
    return {k: (list(v) if isinstance(v, list) else v) for k, v in DIAMOND_PLAN.items()}


@pytest.fixture()
def engine_factory(policy, tmp_path: Path):
    """Engine with fresh registry/store per call; kwargs override defaults."""
    counter = {"n": 0}

    def make(**overrides) -> Engine:
        counter["n"] += 1
        defaults = dict(
            policy=policy,
            planner=ScriptedBackend("scripted-planner"),
            verifier=ScriptedBackend("scripted-verifier"),
            registry=builtin_registry(),
            store=MemoryEventStore(),
            workspace_root=tmp_path / f"ws-{counter['n']}",
        )
        defaults.update(overrides)
        return Engine(**defaults)

    return make
