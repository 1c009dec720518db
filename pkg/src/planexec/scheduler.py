"""Task Fetching Unit: dispatches ready steps in parallel as dependencies
complete, bounded by a configurable width, with fallback activation.

Dispatch decisions are deterministic: ready steps are ordered lexicographically
by id and at most (width - currently running) start at once.
"""

from __future__ import annotations

import threading
from collections import Counter
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional

from .plan import Plan, StepStatus, apply_fallback, ready_steps

DEFAULT_WIDTH = 4


@dataclass(frozen=True)
class WavePlan:
    """Static leveling of a plan into dependency waves (visualization aid)."""

    waves: tuple[tuple[str, ...], ...]
    width: int


def compute_waves(plan: Plan, width: int = DEFAULT_WIDTH) -> WavePlan:
    depth: dict[str, int] = {}
    remaining = list(plan.steps)
    while remaining:
        progressed = False
        still = []
        for step in remaining:
            if all(d in depth for d in step.depends_on):
                depth[step.id] = 1 + max((depth[d] for d in step.depends_on), default=-1)
                progressed = True
            else:
                still.append(step)
        remaining = still
        if not progressed:  # pragma: no cover - plans are validated acyclic
            break
    waves: dict[int, list[str]] = {}
    for step_id, level in depth.items():
        waves.setdefault(level, []).append(step_id)
    return WavePlan(
        waves=tuple(tuple(sorted(waves[level])) for level in sorted(waves)),
        width=width,
    )


def next_dispatch(
    plan: Plan,
    statuses: Mapping[str, StepStatus],
    width: int,
    dormant: Iterable[str] = (),
) -> list[str]:
    """Step ids to start now: ready, not dormant, within the width budget."""
    if width < 1:
        raise ValueError("width must be ≥ 1")
    running = sum(1 for s in statuses.values() if s == StepStatus.running)
    budget = width - running
    if budget <= 0:
        return []
    blocked = set(dormant)
    return [s for s in ready_steps(plan, statuses) if s not in blocked][:budget]


def run_waves(
    plan: Plan,
    executor_callback: Callable[[str], bool],
    width: int = DEFAULT_WIDTH,
) -> dict[str, StepStatus]:
    """Run the whole plan with as-completed re-dispatch up to `width`.

    executor_callback(step_id) -> True on success. A failure activates the
    step's fallback when available; with the budget exhausted, no new steps are
    dispatched (running siblings finish) and control returns to the caller.
    """
    statuses: dict[str, StepStatus] = {s: StepStatus.pending for s in plan.step_ids}
    dormant: set[str] = set(plan.fallback_targets())
    fallback_for: dict[str, str] = {}  # activated target -> superseded failed step
    chain_origin: dict[str, str] = {}  # activated target -> original failing step
    activations: Counter[str] = Counter()
    halted = False
    lock = threading.Lock()

    def body(step_id: str) -> bool:
        try:
            return bool(executor_callback(step_id))
        except Exception:
            return False

    with ThreadPoolExecutor(max_workers=width) as pool:
        futures: dict[Future[bool], str] = {}
        while True:
            if not halted:
                for step_id in next_dispatch(plan, statuses, width, dormant):
                    statuses[step_id] = StepStatus.running
                    futures[pool.submit(body, step_id)] = step_id
            if not futures:
                break
            done, _ = wait(futures, return_when=FIRST_COMPLETED)
            for future in sorted(done, key=lambda f: futures[f]):
                step_id = futures.pop(future)
                with lock:
                    if future.result():
                        statuses[step_id] = StepStatus.succeeded
                        superseded = fallback_for.get(step_id)
                        while superseded is not None:
                            statuses[superseded] = StepStatus.skipped
                            superseded = fallback_for.get(superseded)
                    else:
                        statuses[step_id] = StepStatus.failed
                        origin = chain_origin.get(step_id, step_id)
                        decision = apply_fallback(plan, step_id, activations[origin])
                        if decision.activated and decision.target is not None:
                            activations[origin] += 1
                            chain_origin[decision.target] = origin
                            fallback_for[decision.target] = step_id
                            dormant.discard(decision.target)
                        else:
                            halted = True  # fallback exhausted: caller decides replan
    return statuses
