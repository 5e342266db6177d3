import asyncio

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modestop.scheduler import RunTrace, determine_trial, sequential_testing, sequential_testing_sync
from modestop.solvers import MockSolver, ProblemSpec, QueryRecord
from modestop.stopping import AdaCons, Decision, Msprt, PValue, SelfConsistency, Sprt

PROBLEM = ProblemSpec(id="q", prompt="?")
ALL_POLICIES = [Sprt(), Msprt(), PValue(), AdaCons(), SelfConsistency(), SelfConsistency(fixed_n=7)]


class ScriptedSolver:
    """Answers from a function of the sample index, with optional per-index delay."""

    def __init__(self, answer_for, delay_for=None, fail_for=()):
        self.answer_for = answer_for
        self.delay_for = delay_for
        self.fail_for = set(fail_for)
        self.calls = []
        self.in_flight = 0
        self.peak = 0

    def _record(self, turn_index, sample_index):
        if sample_index in self.fail_for:
            raise RuntimeError(f"boom {sample_index}")
        answer = self.answer_for(sample_index)
        return QueryRecord(raw_text=answer, answer=answer, prompt_tokens=1, completion_tokens=2,
                           latency_ms=10 + sample_index, turn_index=turn_index)

    def solve_sync(self, problem, turn_index, sample_index):
        self.calls.append(sample_index)
        return self._record(turn_index, sample_index)

    async def solve(self, problem, turn_index, sample_index):
        self.calls.append(sample_index)
        self.in_flight += 1
        self.peak = max(self.peak, self.in_flight)
        try:
            if self.delay_for is not None:
                await asyncio.sleep(self.delay_for(sample_index))
            return self._record(turn_index, sample_index)
        finally:
            self.in_flight -= 1


def run(policy, solver, **kw) -> RunTrace:
    return asyncio.run(sequential_testing(PROBLEM, policy, solver, **kw))


class TestDetermineTrial:
    @pytest.mark.parametrize(
        "n_first,n_second,n_observed,expected",
        [(0, 0, 0, 3), (2, 0, 2, 1), (5, 3, 8, 1), (3, 0, 3, 0), (4, 4, 8, 3)],
    )
    def test_calibrated_sprt(self, n_first, n_second, n_observed, expected):
        assert determine_trial(n_first, n_second, 256, n_observed, Sprt()) == expected

    def test_clamped_to_remaining_budget(self):
        assert determine_trial(0, 0, 2, 0, Sprt(max_samples=2)) == 2
        assert determine_trial(10, 10, 40, 39, Sprt(max_samples=40)) == 1

    def test_self_consistency_is_one_batch(self):
        assert determine_trial(0, 0, 40, 0, SelfConsistency()) == 40

    def test_baselines_from_empty(self):
        assert determine_trial(0, 0, 40, 0, PValue()) == 5
        assert determine_trial(0, 0, 40, 0, AdaCons()) == 4
        assert determine_trial(0, 0, 256, 0, Msprt()) == 3

    def test_never_fires_returns_remaining(self):
        # A 0.9999 confidence needs 13 unanimous votes; a cap of 10 cannot reach it.
        policy = AdaCons(confidence=0.9999, max_samples=10)
        assert determine_trial(0, 0, 10, 0, policy) == 10

    @pytest.mark.parametrize("args", [(1, 2, 40, 3), (2, 1, 40, 41)])
    def test_contract(self, args):
        with pytest.raises(ValueError):
            determine_trial(*args, Sprt())

    @given(st.integers(0, 60), st.integers(0, 60), st.sampled_from(ALL_POLICIES[:4]))
    @settings(max_examples=200)
    def test_best_case_fires(self, a, b, policy):
        n1, n2 = max(a, b), min(a, b)
        n_obs = n1 + n2
        cap = policy.max_samples
        if n_obs > cap:
            return
        t = determine_trial(n1, n2, cap, n_obs, policy)
        assert 0 <= t <= cap - n_obs
        fires = policy.decide(n1 + t, n2, n_obs + t) is Decision.STOP_DOMINANT
        assert fires or t == cap - n_obs
        for smaller in range(t):
            if smaller + n1 > 0:
                assert policy.decide(n1 + smaller, n2, n_obs + smaller) is not Decision.STOP_DOMINANT


class TestSequentialTesting:
    @pytest.mark.parametrize(
        "policy,n",
        [(Sprt(), 3), (Msprt(), 3), (PValue(), 5), (AdaCons(), 4), (SelfConsistency(), 40)],
    )
    def test_constant_solver_stops_in_one_turn(self, policy, n):
        trace = run(policy, ScriptedSolver(lambda i: "a"))
        assert trace.n_samples == n
        assert trace.turn_batches == [n]
        assert trace.final_answer == "a"
        assert trace.decision_kind is Decision.STOP_DOMINANT
        assert trace.exit_reason == "stop_dominant"

    def test_alternating_exhausts_budget(self):
        trace = run(Sprt(max_samples=40), ScriptedSolver(lambda i: "ab"[i % 2]))
        assert trace.n_samples == 40
        assert trace.decision_kind is Decision.CONTINUE
        assert trace.exit_reason == "budget_exhausted"
        assert trace.final_answer == "a"
        assert sum(trace.turn_batches) == 40

    def test_turns_follow_determine_trial(self):
        # b a a a ...: after the first turn (b, a, a) the leader a needs 2 more.
        trace = run(Sprt(), ScriptedSolver(lambda i: "b" if i == 0 else "a"))
        assert trace.turn_batches == [3, 2]
        assert trace.final_answer == "a"
        assert [r.turn_index for r in trace.records] == [0, 0, 0, 1, 1]

    def test_errors_count_against_budget_but_not_tally(self):
        solver = ScriptedSolver(lambda i: "a", fail_for={0, 1})
        trace = run(Sprt(), solver)
        assert trace.n_errors == 2
        assert trace.tally.counts == {"a": 3}
        assert trace.n_samples == 5
        assert all(r.answer == "" for r in trace.records if r.error)

    def test_all_errors_hit_budget_without_answer(self):
        solver = ScriptedSolver(lambda i: "a", fail_for=range(100))
        trace = run(Sprt(max_samples=10), solver)
        assert trace.n_samples == 10 and trace.final_answer is None
        assert trace.n_errors == 10

    def test_self_consistency_all_errors(self):
        trace = run(SelfConsistency(fixed_n=4, max_samples=4), ScriptedSolver(lambda i: "a", fail_for=range(4)))
        assert trace.decision_kind is Decision.STOP_NO_DOMINANCE
        assert trace.final_answer is None

    def test_stop_no_dominance_returns_mode(self):
        policy = Sprt(p1=0.8, alpha=0.05, beta=0.1)
        trace = run(policy, ScriptedSolver(lambda i: "ab"[i % 2]))
        assert trace.decision_kind is Decision.STOP_NO_DOMINANCE
        assert trace.final_answer == "a"

    def test_fold_order_is_dispatch_order_not_completion(self):
        # Later indices finish first; "b" (index 0) must still be seen first.
        solver = ScriptedSolver(lambda i: "ba"[i % 2], delay_for=lambda i: 0.01 * (10 - i))
        trace = run(SelfConsistency(fixed_n=4, max_samples=4), solver)
        assert [r.answer for r in trace.records] == ["b", "a", "b", "a"]
        assert trace.final_answer == "b"

    def test_concurrency_ceiling(self):
        solver = ScriptedSolver(lambda i: "a", delay_for=lambda i: 0.005)
        run(SelfConsistency(), solver, max_in_flight=3)
        assert solver.peak == 3
        free = ScriptedSolver(lambda i: "a", delay_for=lambda i: 0.005)
        run(SelfConsistency(), free)
        assert free.peak == 40

    def test_modeled_wall_time(self):
        trace = run(Sprt(), ScriptedSolver(lambda i: "b" if i == 0 else "a"))
        # turns: indices 0..2 (max latency 12) and 3..4 (max 14)
        assert trace.modeled_wall_ms == 12 + 14
        assert trace.prompt_tokens == 5 and trace.completion_tokens == 10

    @given(st.lists(st.sampled_from("abc"), min_size=1, max_size=300))
    @settings(max_examples=60, deadline=None)
    def test_budget_and_trace_invariants(self, script):
        policy = Msprt(max_samples=50)
        solver = ScriptedSolver(lambda i: script[i % len(script)])
        trace = sequential_testing_sync(PROBLEM, policy, solver)
        assert sum(trace.turn_batches) == trace.n_samples <= 50
        assert sorted(solver.calls) == list(range(trace.n_samples))
        assert trace.final_answer == trace.tally.mode()
        assert all(k > 0 for k in trace.turn_batches)

    @pytest.mark.parametrize("policy", ALL_POLICIES, ids=repr)
    def test_sync_and_async_drivers_agree(self, policy):
        solver_a = MockSolver({"x": 0.55, "y": 0.35, "z": 0.1}, seed=3)
        solver_b = MockSolver({"x": 0.55, "y": 0.35, "z": 0.1}, seed=3)
        t1 = run(policy, solver_a)
        t2 = sequential_testing_sync(PROBLEM, policy, solver_b)
        assert t1.records == t2.records and t1.turn_batches == t2.turn_batches
        assert t1.final_answer == t2.final_answer and t1.decision_kind is t2.decision_kind

    def test_seeded_runs_identical(self):
        traces = [run(Msprt(), MockSolver({"x": 0.5, "y": 0.5}, seed=11)) for _ in range(2)]
        assert traces[0].records == traces[1].records
        assert traces[0].turn_batches == traces[1].turn_batches
