"""Command-line surface: run, approve/reject, trace, replay, attack-sim, serve.

Run state lives in the data directory as append-only event logs plus a small
index recording how each run's engine was configured, so approvals can be
resolved from a later invocation.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

import click

from .errors import PlanExecError
from .harness import builtin_corpus, load_corpus, render_table, run_suite, write_corpus
from .orchestrator import Engine, replay, trace_events
from .policy import load_policy
from .reasoners import RemoteBackend, ScriptedBackend
from .store import FileEventStore
from .tools import DEFAULT_FILTER_CONFIG, FilterConfig, builtin_registry

MODE_ALIASES = {
    "autonomous": "autonomous",
    "step-approval": "step_approval",
    "plan-validate": "plan_validate",
    "full": "plan_validate_and_step_approval",
}


def _backends(reasoner: str):
    if reasoner.startswith("scripted:"):
        fixture_dir = reasoner.split(":", 1)[1]
        if fixture_dir:
            planner = ScriptedBackend.from_dir("scripted-planner", fixture_dir)
        else:
            planner = ScriptedBackend("scripted-planner")
        return planner, ScriptedBackend("scripted-verifier")
    if reasoner.startswith("remote:"):
        endpoint = reasoner.split(":", 1)[1]
        return (
            RemoteBackend("remote-planner", endpoint),
            RemoteBackend("remote-verifier", endpoint),
        )
    raise click.BadParameter("--reasoner must be scripted:<fixture dir> or remote:<url>")


def _build_engine(
    data_dir: Path,
    policy_path: str,
    reasoner: str,
    width: int = 4,
    filter_config: Optional[str] = None,
) -> Engine:
    policy = load_policy(Path(policy_path).read_text("utf-8"))
    planner, verifier = _backends(reasoner)
    filters = (
        FilterConfig.load(Path(filter_config)) if filter_config else DEFAULT_FILTER_CONFIG
    )
    return Engine(
        policy=policy,
        planner=planner,
        verifier=verifier,
        registry=builtin_registry(),
        store=FileEventStore(data_dir / "events"),
        filters=filters,
        workspace_root=data_dir / "workspaces",
        width=width,
    )


def _index_path(data_dir: Path) -> Path:
    return data_dir / "index.json"


def _load_index(data_dir: Path) -> dict[str, Any]:
    path = _index_path(data_dir)
    if path.exists():
        return json.loads(path.read_text("utf-8"))
    return {}


def _save_index(data_dir: Path, index: dict[str, Any]) -> None:
    data_dir.mkdir(parents=True, exist_ok=True)
    _index_path(data_dir).write_text(
        json.dumps(index, ensure_ascii=False, indent=2, sort_keys=True), "utf-8"
    )


def _print_state(state) -> None:
    click.echo(json.dumps(state.summary(), ensure_ascii=False, indent=2))
    for approval in state.pending_approvals:
        click.echo(f"pending approval: {approval.approval_id} — {approval.summary}")


@click.group()
@click.option(
    "--data-dir",
    type=click.Path(path_type=Path),
    default=Path("./planexec-data"),
    show_default=True,
    help="Directory for event logs, workspaces and the run index.",
)
@click.pass_context
def main(ctx: click.Context, data_dir: Path) -> None:
    """Plan-then-execute agent orchestration engine."""
    ctx.obj = {"data_dir": data_dir}


@main.command()
@click.option("--objective", required=True)
@click.option("--policy", "policy_path", required=True, type=click.Path(exists=True))
@click.option("--plan", "plan_path", type=click.Path(exists=True),
              help="Plan document to use directly (skips the planner backend).")
@click.option("--mode", type=click.Choice(sorted(MODE_ALIASES)), default="autonomous",
              show_default=True)
@click.option("--reasoner", default="scripted:", show_default=True,
              help="scripted:<fixture dir> or remote:<url>")
@click.option("--width", type=int, default=4, show_default=True)
@click.option("--hierarchical", is_flag=True)
@click.option("--programs", "programs_path", type=click.Path(exists=True),
              help="JSON map step id -> tool instruction list.")
@click.option("--run-id", default=None)
@click.option("--filter-config", type=click.Path(exists=True))
@click.pass_context
def run(ctx, objective, policy_path, plan_path, mode, reasoner, width,
        hierarchical, programs_path, run_id, filter_config) -> None:
    """Start a run and advance it until it blocks or finishes."""
    data_dir: Path = ctx.obj["data_dir"]
    engine = _build_engine(data_dir, policy_path, reasoner, width, filter_config)
    plan_document = json.loads(Path(plan_path).read_text("utf-8")) if plan_path else None
    programs = json.loads(Path(programs_path).read_text("utf-8")) if programs_path else None
    try:
        state = engine.start_run(
            objective,
            mode=MODE_ALIASES[mode],
            run_id=run_id,
            plan_document=plan_document,
            step_programs=programs,
            hierarchical=hierarchical,
        )
        engine.run_until_blocked(state.run_id)
    except PlanExecError as exc:
        raise click.ClickException(f"{type(exc).__name__}: {exc}")
    index = _load_index(data_dir)
    index[state.run_id] = {
        "policy": str(policy_path),
        "reasoner": reasoner,
        "width": width,
        "filter_config": str(filter_config) if filter_config else None,
    }
    _save_index(data_dir, index)
    _print_state(state)


def _resolve(ctx, run_id: str, approval_id: str, decision: str, note: str,
             replacement: Optional[str]) -> None:
    data_dir: Path = ctx.obj["data_dir"]
    index = _load_index(data_dir)
    entry = index.get(run_id)
    if entry is None:
        raise click.ClickException(f"run {run_id!r} not found in the index")
    engine = _build_engine(
        data_dir, entry["policy"], entry["reasoner"], entry.get("width", 4),
        entry.get("filter_config"),
    )
    try:
        engine.adopt_run(run_id)
        replacement_plan = (
            json.loads(Path(replacement).read_text("utf-8")) if replacement else None
        )
        state = engine.resolve_approval(
            run_id, approval_id, decision, actor="cli", note=note,
            replacement_plan=replacement_plan,
        )
        engine.run_until_blocked(run_id)
    except PlanExecError as exc:
        raise click.ClickException(f"{type(exc).__name__}: {exc}")
    _print_state(state)


@main.command()
@click.argument("run_id")
@click.argument("approval_id")
@click.option("--note", default="")
@click.pass_context
def approve(ctx, run_id, approval_id, note) -> None:
    """Approve a pending plan or step approval."""
    _resolve(ctx, run_id, approval_id, "approve", note, None)


@main.command()
@click.argument("run_id")
@click.argument("approval_id")
@click.option("--note", default="")
@click.option("--replacement-plan", type=click.Path(exists=True),
              help="Plan document to install instead (plan rejections only).")
@click.pass_context
def reject(ctx, run_id, approval_id, note, replacement_plan) -> None:
    """Reject a pending plan or step approval."""
    _resolve(ctx, run_id, approval_id, "reject", note, replacement_plan)


@main.command()
@click.argument("run_id")
@click.pass_context
def trace(ctx, run_id) -> None:
    """Print the control-flow trace: (plan version, step, tool) per invocation."""
    store = FileEventStore(ctx.obj["data_dir"] / "events")
    try:
        events = store.read(run_id)
    except PlanExecError as exc:
        raise click.ClickException(str(exc))
    for version, step_id, tool in trace_events(events):
        click.echo(f"v{version}\t{step_id}\t{tool}")


@main.command(name="replay")
@click.argument("run_id")
@click.pass_context
def replay_cmd(ctx, run_id) -> None:
    """Rebuild a run's state purely from its event log and print it."""
    store = FileEventStore(ctx.obj["data_dir"] / "events")
    try:
        state = replay(run_id, store.read(run_id))
    except PlanExecError as exc:
        raise click.ClickException(str(exc))
    click.echo(json.dumps(state.snapshot(), ensure_ascii=False, indent=2, sort_keys=True))


@main.command(name="attack-sim")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True),
              help="Scenario directory; defaults to the built-in 50-scenario corpus.")
@click.option("--kinds", default="pte,reactive_baseline", show_default=True)
@click.option("--filters/--no-filters", "filters_enabled", default=True, show_default=True)
@click.option("--fuzz", "fuzz_count", type=int, default=0, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Emit the machine-readable report.")
def attack_sim(corpus_dir, kinds, filters_enabled, fuzz_count, as_json) -> None:
    """Run the adversarial injection suite and print the summary table."""
    try:
        scenarios = load_corpus(corpus_dir) if corpus_dir else builtin_corpus()
        summary = run_suite(
            scenarios,
            kinds=tuple(k.strip() for k in kinds.split(",") if k.strip()),
            filters_enabled=filters_enabled,
            fuzz_count=fuzz_count,
        )
    except PlanExecError as exc:
        raise click.ClickException(f"{type(exc).__name__}: {exc}")
    if as_json:
        click.echo(json.dumps(summary, ensure_ascii=False, sort_keys=True, indent=2))
    else:
        click.echo(render_table(summary))


@main.command(name="export-corpus")
@click.argument("directory", type=click.Path(path_type=Path))
def export_corpus(directory: Path) -> None:
    """Write the built-in attack scenario corpus to a directory."""
    write_corpus(directory, builtin_corpus())
    click.echo(f"wrote {len(builtin_corpus())} scenarios to {directory}")


@main.command()
@click.option("--policy", "policy_path", required=True, type=click.Path(exists=True))
@click.option("--reasoner", default="scripted:", show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8040, show_default=True)
@click.option("--token", default=None, help="Shared bearer token for the API.")
@click.option("--width", type=int, default=4, show_default=True)
@click.option("--filter-config", type=click.Path(exists=True))
@click.pass_context
def serve(ctx, policy_path, reasoner, host, port, token, width, filter_config) -> None:
    """Serve the HTTP API for the operator console and scripts."""
    import uvicorn

    from .service import create_app

    engine = _build_engine(
        ctx.obj["data_dir"], policy_path, reasoner, width, filter_config
    )
    uvicorn.run(create_app(engine, token=token), host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
