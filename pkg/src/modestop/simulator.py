"""Synthetic consistency study.

A pool of cached answers is turned into a categorical distribution (its
empirical frequencies); each policy is then run many times against a mock
solver drawing from that distribution. The consistency score of a policy is
the fraction of runs whose final answer equals the pool's mode.
"""

from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import dataclass
from importlib import resources
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .scheduler import sequential_testing_sync
from .solvers import MockSolver, ProblemSpec, SamplePool
from .stopping import Rule, StoppingPolicy, make_policy, parse_rule
from .tally import VoteTally, normalize_answer

__all__ = [
    "SyntheticDistribution",
    "QuestionSummary",
    "SweepPoint",
    "estimate_distribution",
    "simulate_question",
    "sweep",
    "family_policy",
    "REFERENCE_GRIDS",
    "SWEEP_PARAM",
    "SWEEP_CSV_HEADER",
    "write_sweep_csv",
    "dirichlet_pools",
    "bundled_pools",
    "top_two_gap",
]

SWEEP_CSV_HEADER = ("policy", "param", "avg_runs", "consistency", "accuracy")

# Which parameter each family sweeps.
SWEEP_PARAM: dict[Rule, str] = {
    Rule.SELF_CONSISTENCY: "fixed_n",
    Rule.PVALUE: "alpha_sig",
    Rule.ADACONS: "confidence",
    Rule.SPRT: "beta",
    Rule.MSPRT: "beta",
}

# Reference sweep ranges: n from 1 to 40 for
# self-consistency, confidence 0.74..0.9999, mixture-SPRT beta 0.94979..0.94997.
REFERENCE_GRIDS: dict[Rule, list[float]] = {
    Rule.SELF_CONSISTENCY: [float(n) for n in range(1, 41)],
    Rule.ADACONS: [0.74, 0.8, 0.85, 0.9, 0.95, 0.975, 0.99, 0.995, 0.999, 0.9999],
    Rule.MSPRT: [round(0.94979 + 0.00001 * i, 5) for i in range(19)],
    Rule.SPRT: [0.9497, 0.94975, 0.9498, 0.94985, 0.9499, 0.94995, 0.949976, 0.94999],
    Rule.PVALUE: [0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.001],
}


@dataclass(frozen=True)
class SyntheticDistribution:
    probs: dict[str, float]
    source_question: str
    true_mode: str
    gold_answer: Optional[str] = None

    def __post_init__(self) -> None:
        total = math.fsum(self.probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1, got {total!r}")
        # Keys are compared against normalized solver answers.
        merged: dict[str, float] = {}
        for key, p in self.probs.items():
            norm = normalize_answer(key)
            merged[norm] = merged.get(norm, 0.0) + p
        object.__setattr__(self, "probs", merged)
        object.__setattr__(self, "true_mode", normalize_answer(self.true_mode))
        if self.gold_answer is not None:
            object.__setattr__(self, "gold_answer", normalize_answer(self.gold_answer))


@dataclass(frozen=True)
class QuestionSummary:
    avg_runs: float
    consistency: float
    hit_gold: Optional[float]
    trials: int


@dataclass(frozen=True)
class SweepPoint:
    param_value: float
    avg_runs: float
    consistency: float
    accuracy: Optional[float]
    policy_label: str


def estimate_distribution(pool: SamplePool) -> SyntheticDistribution:
    """Maximum-likelihood categorical distribution of a pool's normalized answers."""
    if not pool.samples:
        raise ValueError(f"sample pool {pool.question_id!r} is empty")
    tally = VoteTally(normalize_answer(s) for s in pool.samples)
    n = tally.total
    probs = {k: c / n for k, c in tally.counts.items()}
    gold = normalize_answer(pool.gold_answer) if pool.gold_answer is not None else None
    return SyntheticDistribution(
        probs=probs, source_question=pool.question_id, true_mode=tally.mode(), gold_answer=gold
    )


def top_two_gap(dist: SyntheticDistribution) -> float:
    ranked = sorted(dist.probs.values(), reverse=True) + [0.0]
    return ranked[0] - ranked[1]


def _policy_key(policy: StoppingPolicy) -> int:
    params = {k: v for k, v in policy.to_dict().items() if k != "label"}
    return zlib.crc32(json.dumps(params, sort_keys=True).encode("utf-8"))


def simulate_question(
    dist: SyntheticDistribution, policy: StoppingPolicy, trials: int, seed: int
) -> QuestionSummary:
    """Run ``policy`` ``trials`` times against draws from ``dist``.

    Trial t uses the seed key (seed, question, t, policy), so results do not
    depend on which other questions, trials or policies were simulated.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    problem = ProblemSpec(id=dist.source_question, prompt="", gold_answer=dist.gold_answer)
    question_key = zlib.crc32(dist.source_question.encode("utf-8"))
    policy_key = _policy_key(policy)
    runs = 0
    consistent = 0
    hits = 0
    template = MockSolver(dist.probs)
    for t in range(trials):
        solver = template.reseeded((seed, question_key, t, policy_key))
        trace = sequential_testing_sync(problem, policy, solver)
        runs += trace.n_samples
        consistent += trace.final_answer == dist.true_mode
        if dist.gold_answer is not None:
            hits += trace.final_answer == dist.gold_answer
    return QuestionSummary(
        avg_runs=runs / trials,
        consistency=consistent / trials,
        hit_gold=hits / trials if dist.gold_answer is not None else None,
        trials=trials,
    )


def family_policy(family: str | Rule, value: float, **base: Any) -> StoppingPolicy:
    """Policy of ``family`` with its sweep parameter set to ``value``.

    Raises:
        ValueError: naming the value when it is outside the family's domain.
    """
    rule = parse_rule(family)
    name = SWEEP_PARAM[rule]
    params = dict(base)
    if rule is Rule.SELF_CONSISTENCY:
        if float(value) != int(value):
            raise ValueError(f"self-consistency sample size must be an integer, got {value!r}")
        params[name] = int(value)
        params.setdefault("max_samples", 40)
    else:
        params[name] = float(value)
    try:
        policy = make_policy(rule, **params)
    except ValueError as exc:
        raise ValueError(f"grid value {value!r} is invalid for {rule.value}: {exc}") from None
    return policy


def sweep(
    pools: Sequence[SamplePool] | Sequence[SyntheticDistribution],
    family: str | Rule,
    grid: Iterable[float],
    trials: int,
    seed: int,
    **base: Any,
) -> list[SweepPoint]:
    """Macro-averaged operating characteristics over ``pools`` for each grid value.

    Extra keyword arguments fix the non-swept policy parameters (for example
    ``max_samples``). Points come back sorted by average number of runs.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    policies = [family_policy(family, v, **base) for v in grid]
    dists = [p if isinstance(p, SyntheticDistribution) else estimate_distribution(p) for p in pools]
    if not dists:
        raise ValueError("sweep needs at least one pool")
    points = []
    for value, policy in zip(grid, policies):
        summaries = [simulate_question(d, policy, trials, seed) for d in dists]
        golds = [s.hit_gold for s in summaries if s.hit_gold is not None]
        points.append(
            SweepPoint(
                param_value=float(value),
                avg_runs=math.fsum(s.avg_runs for s in summaries) / len(summaries),
                consistency=math.fsum(s.consistency for s in summaries) / len(summaries),
                accuracy=math.fsum(golds) / len(golds) if golds else None,
                policy_label=policy.label,
            )
        )
    points.sort(key=lambda p: (p.avg_runs, p.param_value))
    return points


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def sweep_csv(points: Sequence[SweepPoint], metadata: Optional[Mapping[str, Any]] = None) -> str:
    buf = io.StringIO()
    if metadata is not None:
        buf.write("# " + json.dumps(metadata, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_CSV_HEADER)
    for p in points:
        writer.writerow(
            [p.policy_label, _fmt(p.param_value), _fmt(p.avg_runs), _fmt(p.consistency), _fmt(p.accuracy)]
        )
    return buf.getvalue()


def write_sweep_csv(
    path: str, points: Sequence[SweepPoint], metadata: Optional[Mapping[str, Any]] = None
) -> None:
    """Write sweep points; ``metadata`` goes on a leading ``#`` comment line."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(sweep_csv(points, metadata))


def dirichlet_pools(
    n_pools: int,
    seed: int,
    *,
    pool_size: int = 40,
    n_answers: int = 6,
    concentration: Sequence[float] = (1.5, 0.6, 0.6, 0.6, 0.6, 0.6),
    prefix: str = "syn",
) -> list[SamplePool]:
    """Synthetic answer pools: per question, a Dirichlet draw of answer
    probabilities, then ``pool_size`` answers sampled from it.

    The first answer slot is the gold answer; its larger concentration makes
    it the usual but not guaranteed mode.
    """
    if len(concentration) != n_answers:
        raise ValueError("concentration must have one entry per answer")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xD1])))
    pools = []
    for q in range(n_pools):
        probs = rng.dirichlet(concentration)
        labels = [str(v) for v in rng.choice(1000, size=n_answers, replace=False)]
        draws = rng.choice(n_answers, size=pool_size, p=probs)
        pools.append(
            SamplePool(
                question_id=f"{prefix}-{q:04d}",
                samples=tuple(labels[i] for i in draws),
                gold_answer=labels[0],
            )
        )
    return pools


def bundled_pools(name: str) -> list[SamplePool]:
    """Load a pool file shipped with the package (``name`` without extension)."""
    from .solvers import load_pools

    ref = resources.files("modestop") / "data" / f"{name}.jsonl"
    with resources.as_file(ref) as path:
        return load_pools(path)
