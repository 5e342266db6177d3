"""Benchmark harness: datasets, runs, persisted results and reports.

Results files are JSON lines. The first line is a header carrying the
schema version, the policy and any caller metadata (the CLI stores its
resolved configuration there); every further line is one RunResult.
"""

from __future__ import annotations

import asyncio
import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

from .scheduler import RunTrace, sequential_testing
from .solvers import ProblemSpec, Solver
from .stopping import StoppingPolicy
from .tally import VoteTally, distribution_stats, normalize_answer

__all__ = [
    "RESULTS_SCHEMA",
    "DatasetError",
    "BenchmarkDataset",
    "RunResult",
    "ReportPaths",
    "load_dataset",
    "run_benchmark",
    "read_results",
    "token_reduction",
    "accuracy",
    "total_tokens",
    "average_runs",
    "emit_report",
    "SUMMARY_CSV_HEADER",
    "STATS_CSV_HEADER",
]

log = logging.getLogger(__name__)

RESULTS_SCHEMA = "modestop.results/1"

SUMMARY_CSV_HEADER = (
    "dataset",
    "policy",
    "n_problems",
    "accuracy_pct",
    "avg_runs",
    "total_tokens",
    "token_reduction_pct",
)

STATS_CSV_HEADER = (
    "dataset",
    "policy",
    "problem_id",
    "n_samples",
    "n_first",
    "n_second",
    "p1",
    "p2",
    "p1_over_p2",
    "entropy_nats",
    "n_distinct",
    "final_answer",
    "correct",
)


class DatasetError(ValueError):
    """Malformed or inconsistent dataset / results file."""


@dataclass(frozen=True)
class BenchmarkDataset:
    name: str
    problems: tuple[ProblemSpec, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "problems", tuple(self.problems))
        seen: set[str] = set()
        for p in self.problems:
            if p.id in seen:
                raise DatasetError(f"duplicate problem id {p.id!r} in dataset {self.name!r}")
            seen.add(p.id)

    def __len__(self) -> int:
        return len(self.problems)


def load_dataset(path: str | os.PathLike[str], name: Optional[str] = None) -> BenchmarkDataset:
    """Read ``{"id", "question", "answer"}`` JSON lines.

    Blank lines are skipped and an empty file is a valid empty dataset.
    Gold answers are normalized on load.

    Raises:
        FileNotFoundError: the path does not exist.
        DatasetError: a line does not parse (the message names the line) or
            an id repeats.
    """
    path = Path(path)
    problems = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("expected a JSON object")
                pid, question = obj["id"], obj["question"]
                answer = obj.get("answer")
                if not isinstance(pid, str) or not isinstance(question, str):
                    raise ValueError("'id' and 'question' must be strings")
                if answer is not None and not isinstance(answer, str):
                    raise ValueError("'answer' must be a string or null")
            except (ValueError, KeyError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed dataset line: {exc}") from None
            if pid in seen:
                raise DatasetError(
                    f"{path}:{lineno}: duplicate id {pid!r} (first on line {seen[pid]})"
                )
            seen[pid] = lineno
            gold = normalize_answer(answer) if answer is not None else None
            problems.append(ProblemSpec(id=pid, prompt=question, gold_answer=gold))
    return BenchmarkDataset(name=name or path.stem, problems=tuple(problems))


@dataclass(frozen=True)
class RunResult:
    """Outcome of one policy on one problem.

    ``answers`` holds the normalized answers of the successful samples in
    dispatch order. ``error`` is set when the run itself failed; such a
    result may have zero samples.
    """

    problem_id: str
    policy_label: str
    final_answer: Optional[str]
    correct: Optional[bool]
    n_samples: int
    turn_batches: tuple[int, ...]
    total_prompt_tokens: int
    total_completion_tokens: int
    decision_kind: str
    wall_ms: int
    answers: tuple[str, ...] = ()
    error: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "turn_batches", tuple(self.turn_batches))
        object.__setattr__(self, "answers", tuple(self.answers))
        if self.n_samples != sum(self.turn_batches):
            raise ValueError(
                f"n_samples={self.n_samples} differs from sum(turn_batches)={sum(self.turn_batches)}"
            )

    @property
    def total_tokens(self) -> int:
        return self.total_prompt_tokens + self.total_completion_tokens

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["turn_batches"] = list(self.turn_batches)
        out["answers"] = list(self.answers)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "RunResult":
        return cls(**{k: obj[k] for k in obj if k in _RESULT_FIELDS})

    @classmethod
    def from_trace(cls, problem: ProblemSpec, policy: StoppingPolicy, trace: RunTrace) -> "RunResult":
        final = trace.final_answer
        correct = None if problem.gold_answer is None else final == problem.gold_answer
        return cls(
            problem_id=problem.id,
            policy_label=policy.label,
            final_answer=final,
            correct=correct,
            n_samples=trace.n_samples,
            turn_batches=tuple(trace.turn_batches),
            total_prompt_tokens=trace.prompt_tokens,
            total_completion_tokens=trace.completion_tokens,
            decision_kind=trace.exit_reason,
            wall_ms=trace.modeled_wall_ms,
            answers=tuple(r.answer for r in trace.records if r.error is None),
        )

    @classmethod
    def failure(cls, problem: ProblemSpec, policy: StoppingPolicy, error: str) -> "RunResult":
        return cls(
            problem_id=problem.id,
            policy_label=policy.label,
            final_answer=None,
            correct=None if problem.gold_answer is None else False,
            n_samples=0,
            turn_batches=(),
            total_prompt_tokens=0,
            total_completion_tokens=0,
            decision_kind="error",
            wall_ms=0,
            error=error,
        )


_RESULT_FIELDS = frozenset(RunResult.__dataclass_fields__)


def read_results(path: str | os.PathLike[str]) -> tuple[dict[str, Any], list[RunResult]]:
    """Header and results of a results file.

    A final line cut short by a crash (no trailing newline, invalid JSON)
    is ignored; any other bad line is an error naming its line number.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    header: Optional[dict[str, Any]] = None
    results = []
    last = len(lines)
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            if lineno == last:
                log.warning("%s: ignoring truncated final line", path)
                break
            raise DatasetError(f"{path}:{lineno}: malformed results line: {exc}") from None
        if header is None:
            if not isinstance(obj, dict) or obj.get("schema") != RESULTS_SCHEMA:
                raise DatasetError(
                    f"{path}:{lineno}: expected a {RESULTS_SCHEMA!r} header line"
                )
            header = obj
            continue
        try:
            results.append(RunResult.from_dict(obj))
        except (TypeError, ValueError, KeyError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed result: {exc}") from None
    if header is None:
        raise DatasetError(f"{path}: results file has no header line")
    return header, results


def _results_header(
    dataset: str, policy: StoppingPolicy, metadata: Optional[Mapping[str, Any]]
) -> dict[str, Any]:
    from . import __version__

    return {
        "schema": RESULTS_SCHEMA,
        "version": __version__,
        "dataset": dataset,
        "policy": policy.to_dict(),
        "metadata": dict(metadata or {}),
    }


def _open_results(
    path: Path, dataset: str, policy: StoppingPolicy, metadata: Optional[Mapping[str, Any]]
) -> tuple[Any, dict[str, RunResult]]:
    """Open ``path`` for appending, writing a header if new; returns persisted results."""
    done: dict[str, RunResult] = {}
    if path.exists() and path.stat().st_size > 0:
        header, previous = read_results(path)
        if header.get("policy") != policy.to_dict():
            raise DatasetError(
                f"{path} was written for policy {header.get('policy')}; "
                "use a new results file for a different policy"
            )
        done = {r.problem_id: r for r in previous}
        with open(path, "rb") as fh:
            data = fh.read()
        # Drop a partial trailing line so appends start on a clean line.
        cut = data.rfind(b"\n") + 1
        if cut != len(data):
            with open(path, "r+b") as fh:
                fh.truncate(cut)
        return open(path, "a", encoding="utf-8"), done
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", encoding="utf-8")
    fh.write(json.dumps(_results_header(dataset, policy, metadata), sort_keys=True) + "\n")
    fh.flush()
    return fh, done


def _append(fh: Any, result: RunResult) -> None:
    fh.write(result.to_json() + "\n")
    fh.flush()
    os.fsync(fh.fileno())


async def run_benchmark(
    dataset: BenchmarkDataset,
    policy: StoppingPolicy,
    solver: Solver,
    parallel_questions: int = 1,
    results_path: Optional[str | os.PathLike[str]] = None,
    *,
    max_in_flight: Optional[int] = None,
    metadata: Optional[Mapping[str, Any]] = None,
) -> list[RunResult]:
    """Run ``policy`` on every problem, ``parallel_questions`` at a time.

    With ``results_path`` each result is appended as soon as it and all
    earlier problems are done, so the file is in dataset order whatever
    the completion order. Problems already in the file are skipped and
    their stored results returned.

    Returns:
        One result per problem, in dataset order.
    """
    if parallel_questions < 1:
        raise ValueError(f"parallel_questions must be >= 1, got {parallel_questions}")
    fh = None
    done: dict[str, RunResult] = {}
    if results_path is not None:
        fh, done = _open_results(Path(results_path), dataset.name, policy, metadata)
        if done:
            log.info("resuming: %d of %d problems already done", len(done), len(dataset))
    pending = [p for p in dataset.problems if p.id not in done]
    gate = asyncio.Semaphore(parallel_questions)
    finished: dict[int, RunResult] = {}
    next_commit = 0

    async def run_one(index: int, problem: ProblemSpec) -> None:
        nonlocal next_commit
        async with gate:
            try:
                trace = await sequential_testing(problem, policy, solver, max_in_flight=max_in_flight)
                result = RunResult.from_trace(problem, policy, trace)
            except Exception as exc:  # noqa: BLE001 - one problem must not abort the batch
                log.error("problem %s failed: %s", problem.id, exc)
                result = RunResult.failure(problem, policy, f"{type(exc).__name__}: {exc}")
        finished[index] = result
        while next_commit in finished:
            if fh is not None:
                _append(fh, finished[next_commit])
            next_commit += 1

    try:
        await asyncio.gather(*(run_one(i, p) for i, p in enumerate(pending)))
    finally:
        if fh is not None:
            fh.close()
    new = {r.problem_id: r for r in finished.values()}
    return [done.get(p.id) or new[p.id] for p in dataset.problems]


def token_reduction(total_tokens_method: int, total_tokens_sc40: int) -> float:
    """Percent of baseline tokens saved: (T_base - T) / T_base * 100."""
    if total_tokens_sc40 <= 0:
        raise ValueError(f"baseline token total must be positive, got {total_tokens_sc40}")
    if total_tokens_method < 0:
        raise ValueError(f"token total must be non-negative, got {total_tokens_method}")
    return (total_tokens_sc40 - total_tokens_method) / total_tokens_sc40 * 100.0


def accuracy(results: Sequence[RunResult]) -> float:
    """Fraction of problems answered correctly.

    Raises:
        ValueError: no results, or a result without a gold answer.
    """
    if not results:
        raise ValueError("accuracy of an empty result list is undefined")
    missing = [r.problem_id for r in results if r.correct is None]
    if missing:
        raise ValueError(f"results without a gold answer: {', '.join(missing[:5])}")
    return sum(1 for r in results if r.correct) / len(results)


def total_tokens(results: Iterable[RunResult], *, completion_only: bool = False) -> int:
    if completion_only:
        return sum(r.total_completion_tokens for r in results)
    return sum(r.total_tokens for r in results)


def average_runs(results: Sequence[RunResult]) -> float:
    if not results:
        raise ValueError("average runs of an empty result list is undefined")
    return sum(r.n_samples for r in results) / len(results)


@dataclass(frozen=True)
class ReportPaths:
    summary_csv: Path
    stats_csv: Path
    table_txt: Path


@dataclass
class _Row:
    dataset: str
    policy: str
    n_problems: int
    accuracy_pct: Optional[float]
    avg_runs: float
    total_tokens: int
    token_reduction_pct: float = field(default=0.0)


def _group(results: Iterable[RunResult]) -> dict[str, list[RunResult]]:
    by_policy: dict[str, list[RunResult]] = {}
    for r in results:
        by_policy.setdefault(r.policy_label, []).append(r)
    return by_policy


def _summary_rows(
    datasets: Mapping[str, Sequence[RunResult]], baseline_label: str, completion_only: bool
) -> list[_Row]:
    rows = []
    for name, results in datasets.items():
        by_policy = _group(results)
        if baseline_label not in by_policy:
            raise ValueError(
                f"baseline policy {baseline_label!r} has no results for dataset {name!r}; "
                f"found: {', '.join(sorted(by_policy)) or 'none'}"
            )
        base = total_tokens(by_policy[baseline_label], completion_only=completion_only)
        for label, group in by_policy.items():
            graded = all(r.correct is not None for r in group)
            tokens = total_tokens(group, completion_only=completion_only)
            rows.append(
                _Row(
                    dataset=name,
                    policy=label,
                    n_problems=len(group),
                    accuracy_pct=accuracy(group) * 100.0 if graded else None,
                    avg_runs=average_runs(group),
                    total_tokens=tokens,
                    token_reduction_pct=token_reduction(tokens, base),
                )
            )
    return rows


def _num(x: Optional[float]) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return repr(x)


def _stats_rows(datasets: Mapping[str, Sequence[RunResult]]) -> list[list[str]]:
    rows = []
    for name, results in datasets.items():
        for r in results:
            base = [name, r.policy_label, r.problem_id, str(r.n_samples)]
            tail = [r.final_answer or "", "" if r.correct is None else str(r.correct).lower()]
            if not r.answers:
                rows.append(base + [""] * 7 + tail)
                continue
            s = distribution_stats(VoteTally(r.answers))
            rows.append(
                base
                + [
                    str(s.n_first),
                    str(s.n_second),
                    _num(s.p1),
                    _num(s.p2),
                    _num(s.p1_over_p2),
                    _num(s.entropy_nats),
                    str(s.n_distinct),
                ]
                + tail
            )
    return rows


def _text_table(rows: Sequence[_Row], baseline_label: str, token_kind: str) -> str:
    head = ["dataset", "policy", "n", "accuracy %", "avg runs", "tokens", "reduction %"]
    body = [
        [
            r.dataset,
            r.policy,
            str(r.n_problems),
            "-" if r.accuracy_pct is None else f"{r.accuracy_pct:.1f}",
            f"{r.avg_runs:.2f}",
            str(r.total_tokens),
            f"{r.token_reduction_pct:.1f}",
        ]
        for r in rows
    ]
    widths = [max(len(c) for c in col) for col in zip(head, *body)]
    fmt = "  ".join("{:<%d}" % w if i < 2 else "{:>%d}" % w for i, w in enumerate(widths))
    lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*b) for b in body]
    lines.append("")
    lines.append(f"token reduction vs {baseline_label!r}, counting {token_kind} tokens")
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def emit_report(
    results: Sequence[RunResult] | Mapping[str, Sequence[RunResult]],
    baseline_label: str,
    out_dir: str | os.PathLike[str],
    *,
    dataset_name: str = "dataset",
    completion_only: bool = False,
    metadata: Optional[Mapping[str, Any]] = None,
) -> ReportPaths:
    """Write summary.csv, question_stats.csv and summary.txt under ``out_dir``.

    Args:
        results: results of all policies, either flat (one dataset called
            ``dataset_name``) or keyed by dataset name.
        baseline_label: policy label that token reduction is measured against.
        completion_only: count only completion tokens.
        metadata: written as a leading ``#`` JSON comment in both CSVs.

    Raises:
        ValueError: the baseline has no results for some dataset, or its
            token total is zero.
    """
    datasets = dict(results) if isinstance(results, Mapping) else {dataset_name: list(results)}
    rows = _summary_rows(datasets, baseline_label, completion_only)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    comment = "# " + json.dumps(dict(metadata), sort_keys=True) + "\n" if metadata is not None else ""

    buf = io.StringIO()
    buf.write(comment)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_CSV_HEADER)
    for r in rows:
        writer.writerow(
            [r.dataset, r.policy, r.n_problems, _num(r.accuracy_pct), _num(r.avg_runs),
             r.total_tokens, _num(r.token_reduction_pct)]
        )
    paths = ReportPaths(out / "summary.csv", out / "question_stats.csv", out / "summary.txt")
    _write(paths.summary_csv, buf.getvalue())

    buf = io.StringIO()
    buf.write(comment)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STATS_CSV_HEADER)
    writer.writerows(_stats_rows(datasets))
    _write(paths.stats_csv, buf.getvalue())

    token_kind = "completion" if completion_only else "prompt + completion"
    _write(paths.table_txt, _text_table(rows, baseline_label, token_kind))
    return paths
