"""The sequential sampling loop.

Each turn computes the smallest batch that could end the run if every new
sample agreed with the current leader, dispatches that many queries at once,
waits for all of them, and only then looks at the counts again.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Protocol

from .solvers import ProblemSpec, QueryRecord, Solver
from .stopping import Decision, StoppingPolicy
from .tally import TopTwo, VoteTally

__all__ = [
    "determine_trial",
    "TurnPlan",
    "RunTrace",
    "sequential_testing",
    "sequential_testing_sync",
]

log = logging.getLogger(__name__)

BUDGET_EXHAUSTED = "budget_exhausted"


@lru_cache(maxsize=1 << 16)
def _scan(n_first: int, n_second: int, max_samples: int, n_observed: int, policy: StoppingPolicy) -> int:
    t = 0
    for t in range(max_samples + 1):
        if t + n_first > 0 and (
            policy.decide(n_first + t, n_second, n_observed + t) is Decision.STOP_DOMINANT
        ):
            break
    return min(t, max_samples - n_observed)


def determine_trial(
    n_first: int, n_second: int, max_samples: int, n_observed: int, policy: StoppingPolicy
) -> int:
    """Best-case number of further samples before the rule can stop.

    Returns the smallest T >= 0 such that ``n_first + T`` leader votes against
    ``n_second`` would make the policy stop for dominance, clamped to the
    remaining budget. If no T up to ``max_samples`` works, the whole remaining
    budget is returned.

    Raises:
        ValueError: if n_first < n_second or n_observed exceeds max_samples.
    """
    if n_first < n_second:
        raise ValueError(
            f"expected top-two counts with n_first >= n_second, got ({n_first}, {n_second})"
        )
    if not 0 <= n_observed <= max_samples:
        raise ValueError(f"n_observed={n_observed} outside [0, max_samples={max_samples}]")
    return _scan(n_first, n_second, max_samples, n_observed, policy)


@dataclass(frozen=True)
class TurnPlan:
    batch_size: int
    turn_index: int


@dataclass
class RunTrace:
    """Everything one run produced.

    ``decision_kind`` is the realized rule outcome at the stop; it is
    ``Decision.CONTINUE`` when the run ended on its sample cap.
    """

    records: list[QueryRecord] = field(default_factory=list)
    turn_batches: list[int] = field(default_factory=list)
    decision_kind: Decision = Decision.CONTINUE
    final_answer: Optional[str] = None
    tally: VoteTally = field(default_factory=VoteTally, repr=False)

    @property
    def n_samples(self) -> int:
        return len(self.records)

    @property
    def exit_reason(self) -> str:
        if self.decision_kind is Decision.CONTINUE:
            return BUDGET_EXHAUSTED
        return self.decision_kind.value

    @property
    def prompt_tokens(self) -> int:
        return sum(r.prompt_tokens for r in self.records)

    @property
    def completion_tokens(self) -> int:
        return sum(r.completion_tokens for r in self.records)

    @property
    def n_errors(self) -> int:
        return sum(1 for r in self.records if r.error is not None)

    @property
    def modeled_wall_ms(self) -> int:
        """Sum over turns of the slowest query in the turn."""
        slowest: dict[int, int] = {}
        for r in self.records:
            slowest[r.turn_index] = max(slowest.get(r.turn_index, 0), r.latency_ms)
        return sum(slowest.values())


class _RunState:
    def __init__(self, policy: StoppingPolicy) -> None:
        self.policy = policy
        self.trace = RunTrace()
        self.top: TopTwo = self.trace.tally.top_two()

    def next_plan(self) -> TurnPlan:
        """Plan the next turn; batch size 0 means the run is over."""
        trace = self.trace
        n_obs = len(trace.records)
        top = self.top
        realized = self.policy.decide(top.n_first, top.n_second, n_obs)
        if realized is not Decision.CONTINUE or n_obs >= self.policy.max_samples:
            trace.decision_kind = realized
            return TurnPlan(0, len(trace.turn_batches))
        k = determine_trial(top.n_first, top.n_second, self.policy.max_samples, n_obs, self.policy)
        return TurnPlan(k, len(trace.turn_batches))

    def fold(self, batch: list[QueryRecord]) -> None:
        trace = self.trace
        trace.turn_batches.append(len(batch))
        for record in batch:
            trace.records.append(record)
            if record.error is None:
                trace.tally.add(record.answer)
        self.top = trace.tally.top_two()

    def finish(self) -> RunTrace:
        self.trace.final_answer = self.top.first_key
        return self.trace


class SyncSolver(Protocol):
    def solve_sync(self, problem: ProblemSpec, turn_index: int, sample_index: int) -> QueryRecord:
        ...


def _failed(exc: BaseException, turn_index: int) -> QueryRecord:
    return QueryRecord.failed(f"{type(exc).__name__}: {exc}", turn_index=turn_index)


async def sequential_testing(
    problem: ProblemSpec,
    policy: StoppingPolicy,
    solver: Solver,
    *,
    max_in_flight: Optional[int] = None,
) -> RunTrace:
    """Run the adaptive sampling loop for one problem.

    Queries of a turn run concurrently (at most ``max_in_flight`` at a time
    when given) and are folded into the tally in dispatch order once all of
    them have returned. A query that raises is recorded as an error: it
    counts against the budget but not in the tally.
    """
    state = _RunState(policy)
    gate = asyncio.Semaphore(max_in_flight) if max_in_flight else None

    async def query(turn: int, index: int) -> QueryRecord:
        try:
            if gate is None:
                return await solver.solve(problem, turn, index)
            async with gate:
                return await solver.solve(problem, turn, index)
        except Exception as exc:  # noqa: BLE001 - a failed query must not kill the run
            log.warning("query %d of %s failed: %s", index, problem.id, exc)
            return _failed(exc, turn)

    while True:
        plan = state.next_plan()
        if plan.batch_size == 0:
            break
        start = len(state.trace.records)
        batch = await asyncio.gather(
            *(query(plan.turn_index, start + i) for i in range(plan.batch_size))
        )
        state.fold(list(batch))
    return state.finish()


def sequential_testing_sync(problem: ProblemSpec, policy: StoppingPolicy, solver: SyncSolver) -> RunTrace:
    """Same loop as :func:`sequential_testing` for in-process solvers.

    Produces the identical trace for mock and replay solvers; used by the
    simulator where event-loop overhead would dominate.
    """
    state = _RunState(policy)
    while True:
        plan = state.next_plan()
        if plan.batch_size == 0:
            break
        start = len(state.trace.records)
        batch = []
        for i in range(plan.batch_size):
            try:
                batch.append(solver.solve_sync(problem, plan.turn_index, start + i))
            except Exception as exc:  # noqa: BLE001
                batch.append(_failed(exc, plan.turn_index))
        state.fold(batch)
    return state.finish()
