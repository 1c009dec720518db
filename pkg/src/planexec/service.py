"""HTTP surface over the engine: run creation, summaries, plan documents,
a live server-sent event stream, approval resolution, and the attack-sim suite.

Authentication is a single shared bearer token when configured; run mutations
are serialized per run by the engine itself.
"""

from __future__ import annotations

import json
import time
from typing import Any, Iterator, Mapping, Optional

from fastapi import Body, Depends, FastAPI, HTTPException, Query, Request
from fastapi.responses import StreamingResponse

from .errors import (
    AlreadyResolved,
    ConfigError,
    PlanExecError,
    ScenarioError,
    UnknownApproval,
    UnknownRun,
)
from .harness import builtin_corpus, load_corpus, render_table, run_suite
from .orchestrator import Engine, Phase, trace_events
from .plan import serialize_plan

SSE_POLL_INTERVAL_S = 0.05


def create_app(engine: Engine, token: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="planexec", version="1.0")

    def authorize(request: Request) -> None:
        if token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="invalid bearer token")

    auth = Depends(authorize)

    def _get_run(run_id: str):
        try:
            return engine.run(run_id)
        except UnknownRun:
            raise HTTPException(status_code=404, detail=f"no run {run_id!r}") from None

    @app.post("/runs", dependencies=[auth])
    def create_run(body: Mapping[str, Any] = Body(...)) -> dict[str, Any]:
        objective = body.get("objective")
        if not isinstance(objective, str) or not objective:
            raise HTTPException(status_code=400, detail="'objective' is required")
        try:
            state = engine.start_run(
                objective,
                mode=body.get("mode", "autonomous"),
                run_id=body.get("run_id"),
                plan_document=body.get("plan"),
                step_programs=body.get("step_programs"),
                hierarchical=bool(body.get("hierarchical", False)),
            )
            engine.run_until_blocked(state.run_id)
        except (ConfigError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except PlanExecError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return state.summary()

    @app.get("/runs", dependencies=[auth])
    def list_runs() -> list[dict[str, Any]]:
        return [engine.run(run_id).summary() for run_id in engine.run_ids()]

    @app.get("/runs/{run_id}", dependencies=[auth])
    def get_run(run_id: str) -> dict[str, Any]:
        return _get_run(run_id).summary()

    @app.get("/runs/{run_id}/state", dependencies=[auth])
    def get_run_state(run_id: str) -> dict[str, Any]:
        return _get_run(run_id).snapshot()

    @app.get("/runs/{run_id}/plan", dependencies=[auth])
    def get_plan(run_id: str) -> dict[str, Any]:
        state = _get_run(run_id)
        if state.current_plan is None:
            raise HTTPException(status_code=404, detail="run has no plan yet")
        return serialize_plan(state.current_plan)

    @app.get("/runs/{run_id}/trace", dependencies=[auth])
    def get_trace(run_id: str) -> list[list[Any]]:
        _get_run(run_id)
        return [list(entry) for entry in engine.control_flow_trace(run_id)]

    @app.get("/runs/{run_id}/events", dependencies=[auth])
    async def stream_events(
        run_id: str,
        request: Request,
        from_seq: int = Query(default=0, alias="from"),
    ) -> StreamingResponse:
        _get_run(run_id)
        last_event_id = request.headers.get("last-event-id")
        start = int(last_event_id) if last_event_id else from_seq

        def generate() -> Iterator[str]:
            delivered = start
            while True:
                events = engine.store.read(run_id)
                terminal = False
                for event in events[delivered:]:
                    delivered = event["seq"]
                    yield (
                        f"id: {event['seq']}\n"
                        f"data: {json.dumps(event, ensure_ascii=False, sort_keys=True)}\n\n"
                    )
                    if event["kind"] in ("run_completed", "run_aborted"):
                        terminal = True
                if terminal:
                    return
                time.sleep(SSE_POLL_INTERVAL_S)

        return StreamingResponse(generate(), media_type="text/event-stream")

    @app.get("/approvals", dependencies=[auth])
    def list_approvals(pending: bool = Query(default=True)) -> list[dict[str, Any]]:
        approvals = []
        for run_id in engine.run_ids():
            state = engine.run(run_id)
            for approval in state.approvals.values():
                if pending and approval.resolution is not None:
                    continue
                approvals.append(approval.as_dict())
        return approvals

    @app.post("/approvals/{approval_id}:resolve", dependencies=[auth])
    def resolve_approval(
        approval_id: str, body: Mapping[str, Any] = Body(...)
    ) -> dict[str, Any]:
        decision = body.get("decision")
        if decision not in ("approve", "reject"):
            raise HTTPException(status_code=400, detail="decision must be approve|reject")
        run_id = _find_run_for_approval(engine, approval_id)
        if run_id is None:
            raise HTTPException(status_code=404, detail=f"no approval {approval_id!r}")
        try:
            state = engine.resolve_approval(
                run_id,
                approval_id,
                decision,
                actor=str(body.get("actor", "operator")),
                note=str(body.get("note", "")),
                replacement_plan=body.get("replacement_plan"),
            )
            engine.run_until_blocked(run_id)
        except UnknownApproval as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except AlreadyResolved as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        except (ConfigError, PlanExecError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return state.summary()

    @app.post("/attack-sim", dependencies=[auth])
    def attack_sim(body: Mapping[str, Any] = Body(default={})) -> dict[str, Any]:
        corpus_dir = body.get("corpus_dir")
        try:
            scenarios = load_corpus(corpus_dir) if corpus_dir else builtin_corpus()
            summary = run_suite(
                scenarios,
                kinds=tuple(body.get("kinds", ("pte", "reactive_baseline"))),
                filters_enabled=bool(body.get("filters_enabled", True)),
                fuzz_count=int(body.get("fuzz_count", 0)),
            )
        except ScenarioError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        summary["table"] = render_table(summary)
        return summary

    return app


def _find_run_for_approval(engine: Engine, approval_id: str) -> Optional[str]:
    for run_id in engine.run_ids():
        if approval_id in engine.run(run_id).approvals:
            return run_id
    return None
