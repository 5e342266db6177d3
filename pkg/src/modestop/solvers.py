"""Answer sources: a chat-completions HTTP client, a seeded categorical mock,
and a replay solver over cached sample pools.

Every solver exposes ``async solve(problem, turn_index, sample_index)``.
``sample_index`` is the position of the query within its run, fixed at
dispatch time, so seeded solvers return the same answer for the same index
no matter in which order concurrent calls complete.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import random
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Any, Awaitable, Callable, Iterable, Mapping, Optional, Protocol, Sequence

import httpx
import numpy as np

from .tally import normalize_answer

__all__ = [
    "ModelHints",
    "ProblemSpec",
    "QueryRecord",
    "SamplePool",
    "Solver",
    "CostModel",
    "MockSolver",
    "ReplaySolver",
    "EndpointConfig",
    "ChatCompletionsSolver",
    "load_pools",
    "write_pools",
    "seed_stream",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelHints:
    model_name: str = ""
    reasoning_effort: Optional[str] = None
    temperature: Optional[float] = None

    def __post_init__(self) -> None:
        if self.reasoning_effort not in (None, "low", "medium", "high"):
            raise ValueError(
                f"reasoning_effort must be low, medium or high, got {self.reasoning_effort!r}"
            )


@dataclass(frozen=True)
class ProblemSpec:
    id: str
    prompt: str
    gold_answer: Optional[str] = None
    model_hints: ModelHints = field(default_factory=ModelHints)


@dataclass(frozen=True)
class QueryRecord:
    """One solver response. Records with ``error`` set never enter a tally."""

    raw_text: str
    answer: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0
    turn_index: int = 0
    error: Optional[str] = None

    @classmethod
    def failed(
        cls,
        error: str,
        *,
        turn_index: int = 0,
        raw_text: str = "",
        prompt_tokens: int = 0,
        completion_tokens: int = 0,
        latency_ms: int = 0,
    ) -> "QueryRecord":
        return cls(
            raw_text=raw_text,
            answer="",
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            latency_ms=latency_ms,
            turn_index=turn_index,
            error=error,
        )

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class SamplePool:
    """Cached raw answers for one question (one line of a pool JSONL file)."""

    question_id: str
    samples: tuple[str, ...]
    gold_answer: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.samples:
            raise ValueError(f"sample pool {self.question_id!r} is empty")
        object.__setattr__(self, "samples", tuple(self.samples))

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.question_id, "samples": list(self.samples), "gold": self.gold_answer},
            ensure_ascii=False,
        )

    @classmethod
    def from_obj(cls, obj: Mapping[str, Any]) -> "SamplePool":
        samples = obj.get("samples")
        if not isinstance(samples, list) or not all(isinstance(s, str) for s in samples):
            raise ValueError("'samples' must be a list of strings")
        gold = obj.get("gold")
        if gold is not None and not isinstance(gold, str):
            raise ValueError("'gold' must be a string or null")
        return cls(question_id=str(obj["id"]), samples=tuple(samples), gold_answer=gold)


def load_pools(path: str | os.PathLike[str]) -> list[SamplePool]:
    """Read a pool JSONL file: ``{"id": str, "samples": [str, ...], "gold": str|null}``."""
    pools = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                pool = SamplePool.from_obj(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed sample pool: {exc}") from exc
            if pool.question_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate pool id {pool.question_id!r}")
            seen.add(pool.question_id)
            pools.append(pool)
    return pools


def write_pools(path: str | os.PathLike[str], pools: Iterable[SamplePool]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pool in pools:
            fh.write(pool.to_json() + "\n")


class Solver(Protocol):
    async def solve(self, problem: ProblemSpec, turn_index: int, sample_index: int) -> QueryRecord:
        ...


def seed_stream(*key: int | str) -> np.random.Generator:
    """Independent generator for a key path, e.g. (master_seed, question, trial).

    String components are hashed with CRC32 so keys stay stable across runs.
    """
    words = [k if isinstance(k, int) else zlib.crc32(k.encode("utf-8")) for k in key]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


@dataclass(frozen=True)
class CostModel:
    """Synthetic token counts for offline solvers."""

    prompt_tokens: int = 100
    completion_tokens: int = 1000
    per_answer: Mapping[str, int] = field(default_factory=dict)

    def completion_for(self, answer: str) -> int:
        return self.per_answer.get(answer, self.completion_tokens)


class _IndexedStream:
    """Category draws addressed by sample index; extended lazily in order."""

    _BLOCK = 64

    def __init__(self, rng: np.random.Generator, cdf: np.ndarray) -> None:
        self._rng = rng
        self._cdf = cdf
        self._draws: list[int] = []

    def __getitem__(self, index: int) -> int:
        while index >= len(self._draws):
            u = self._rng.random(self._BLOCK)
            self._draws.extend(np.searchsorted(self._cdf, u, side="right").tolist())
        return self._draws[index]


@dataclass(frozen=True)
class _Categorical:
    raw: list[str]
    answers: list[str]
    cdf: np.ndarray


def _validate_distribution(dist: Mapping[str, float]) -> _Categorical:
    if not dist:
        raise ValueError("distribution must have at least one category")
    keys = list(dist)
    probs = np.array([dist[k] for k in keys], dtype=float)
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ValueError(f"distribution has negative or non-finite probabilities: {dict(dist)}")
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities must sum to 1 within 1e-9, got {probs.sum()!r}")
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return _Categorical(keys, [normalize_answer(k) for k in keys], cdf)


class MockSolver:
    """Draws answers from fixed categorical distributions.

    Args:
        dist: distribution used for every problem (answer -> probability).
        per_problem: optional problem id -> distribution, overriding ``dist``.
        seed: master seed; each problem id gets its own stream under it.
            May be a tuple of ints for hierarchical keys.
        cost: synthetic token accounting.
    """

    def __init__(
        self,
        dist: Optional[Mapping[str, float]] = None,
        *,
        per_problem: Optional[Mapping[str, Mapping[str, float]]] = None,
        seed: int | Sequence[int] = 0,
        cost: Optional[CostModel] = None,
    ) -> None:
        if dist is None and not per_problem:
            raise ValueError("MockSolver needs a distribution")
        self._default = _validate_distribution(dist) if dist is not None else None
        self._per_problem = {
            pid: _validate_distribution(d) for pid, d in (per_problem or {}).items()
        }
        self._seed = tuple(seed) if isinstance(seed, Sequence) else (seed,)
        self.cost = cost or CostModel()
        self._streams: dict[str, tuple[_Categorical, _IndexedStream]] = {}

    def reseeded(self, seed: int | Sequence[int]) -> "MockSolver":
        """Copy sharing the validated distributions, with fresh streams under ``seed``."""
        clone = object.__new__(MockSolver)
        clone._default = self._default
        clone._per_problem = self._per_problem
        clone._seed = tuple(seed) if isinstance(seed, Sequence) else (seed,)
        clone.cost = self.cost
        clone._streams = {}
        return clone

    def _stream(self, problem_id: str) -> tuple[_Categorical, _IndexedStream]:
        entry = self._streams.get(problem_id)
        if entry is None:
            spec = self._per_problem.get(problem_id, self._default)
            if spec is None:
                raise KeyError(f"no mock distribution for problem {problem_id!r}")
            entry = (spec, _IndexedStream(seed_stream(*self._seed, problem_id), spec.cdf))
            self._streams[problem_id] = entry
        return entry

    def solve_sync(self, problem: ProblemSpec, turn_index: int, sample_index: int) -> QueryRecord:
        spec, stream = self._stream(problem.id)
        i = stream[sample_index]
        answer = spec.answers[i]
        return QueryRecord(
            raw_text=spec.raw[i],
            answer=answer,
            prompt_tokens=self.cost.prompt_tokens,
            completion_tokens=self.cost.completion_for(answer),
            latency_ms=0,
            turn_index=turn_index,
        )

    async def solve(self, problem: ProblemSpec, turn_index: int, sample_index: int) -> QueryRecord:
        return self.solve_sync(problem, turn_index, sample_index)


class ReplaySolver:
    """Replays cached pools, either in recorded order or by uniform resampling.

    In ``sequential`` mode the i-th query of a run returns the pool's i-th
    sample, and queries past the end come back as error records.
    """

    MODES = ("with_replacement", "sequential")

    def __init__(
        self,
        pools: SamplePool | Iterable[SamplePool],
        *,
        mode: str = "with_replacement",
        seed: int | Sequence[int] = 0,
        cost: Optional[CostModel] = None,
    ) -> None:
        if mode not in self.MODES:
            raise ValueError(f"replay mode must be one of {self.MODES}, got {mode!r}")
        if isinstance(pools, SamplePool):
            self._single: Optional[SamplePool] = pools
            self._pools: dict[str, SamplePool] = {}
        else:
            self._single = None
            self._pools = {p.question_id: p for p in pools}
        self.mode = mode
        self._seed = tuple(seed) if isinstance(seed, Sequence) else (seed,)
        self.cost = cost or CostModel()
        self._streams: dict[str, _IndexedStream] = {}

    def _pool(self, problem_id: str) -> SamplePool:
        if self._single is not None:
            return self._single
        try:
            return self._pools[problem_id]
        except KeyError:
            raise KeyError(f"no sample pool for problem {problem_id!r}") from None

    def solve_sync(self, problem: ProblemSpec, turn_index: int, sample_index: int) -> QueryRecord:
        pool = self._pool(problem.id)
        if self.mode == "sequential":
            if sample_index >= len(pool.samples):
                return QueryRecord.failed(
                    f"pool {pool.question_id!r} exhausted after {len(pool.samples)} samples",
                    turn_index=turn_index,
                )
            raw = pool.samples[sample_index]
        else:
            stream = self._streams.get(problem.id)
            if stream is None:
                n = len(pool.samples)
                cdf = np.arange(1, n + 1, dtype=float) / n
                stream = _IndexedStream(seed_stream(*self._seed, problem.id), cdf)
                self._streams[problem.id] = stream
            raw = pool.samples[stream[sample_index]]
        answer = normalize_answer(raw)
        return QueryRecord(
            raw_text=raw,
            answer=answer,
            prompt_tokens=self.cost.prompt_tokens,
            completion_tokens=self.cost.completion_for(answer),
            latency_ms=0,
            turn_index=turn_index,
        )

    async def solve(self, problem: ProblemSpec, turn_index: int, sample_index: int) -> QueryRecord:
        return self.solve_sync(problem, turn_index, sample_index)


# ---------------------------------------------------------------------------
# Chat-completions client


ANSWER_SCHEMA = {
    "type": "object",
    "properties": {"answer": {"type": "string"}},
    "required": ["answer"],
    "additionalProperties": False,
}

DEFAULT_SYSTEM_PROMPT = (
    "Solve the problem. Reply with a JSON object of the form "
    '{"answer": "<final answer>"} containing only the final answer.'
)

_REPROMPT = (
    'Your previous reply was not a valid JSON object {"answer": string}. '
    "Reply again with only that JSON object."
)

_RETRY_STATUS = {408, 409, 429}


@dataclass(frozen=True)
class EndpointConfig:
    """Connection settings for a chat-completions-compatible endpoint.

    The credential is read from the environment variable named by
    ``api_key_env``; it is never stored in configuration.
    """

    base_url: str = "https://api.openai.com"
    path: str = "/v1/chat/completions"
    model: str = "o3-mini"
    reasoning_effort_field: str = "reasoning_effort"
    reasoning_effort: Optional[str] = None
    temperature: Optional[float] = None
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 300.0
    max_attempts: int = 5
    backoff_base_s: float = 1.0
    backoff_max_s: float = 60.0
    max_in_flight: Optional[int] = None
    reasoning_tokens_separate: bool = False
    system_prompt: str = DEFAULT_SYSTEM_PROMPT

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/" + self.path.lstrip("/")


class _Transient(Exception):
    pass


class _Malformed(Exception):
    pass


def _backoff_delay(base: float, cap: float, attempt: int) -> float:
    delay = min(cap, base * (2**attempt))
    return delay * random.uniform(0.5, 1.5)


class ChatCompletionsSolver:
    """Structured-output client for chat-completions-compatible HTTP APIs.

    Each query is one POST asking for ``{"answer": string}`` through the
    JSON-schema response format. Timeouts, transport errors, HTTP 408/409/429
    and 5xx are retried with jittered exponential backoff up to
    ``max_attempts``. An unparseable reply gets one re-prompt. Failures come
    back as error records instead of raising, with whatever token usage the
    endpoint reported along the way.
    """

    def __init__(
        self,
        config: EndpointConfig,
        *,
        client: Optional[httpx.AsyncClient] = None,
        sleep: Callable[[float], Awaitable[Any]] = asyncio.sleep,
        api_key: Optional[str] = None,
    ) -> None:
        self.config = config
        self._client = client
        self._owns_client = client is None
        self._sleep = sleep
        self._api_key = api_key if api_key is not None else os.environ.get(config.api_key_env)
        self._gate = asyncio.Semaphore(config.max_in_flight) if config.max_in_flight else None

    async def __aenter__(self) -> "ChatCompletionsSolver":
        return self

    async def __aexit__(self, *exc: object) -> None:
        await self.aclose()

    async def aclose(self) -> None:
        if self._client is not None and self._owns_client:
            await self._client.aclose()
            self._client = None

    def _http(self) -> httpx.AsyncClient:
        if self._client is None:
            self._client = httpx.AsyncClient(timeout=self.config.timeout_s)
        return self._client

    def build_payload(self, problem: ProblemSpec, reprompt: Optional[str] = None) -> dict[str, Any]:
        cfg = self.config
        hints = problem.model_hints
        messages = [
            {"role": "system", "content": cfg.system_prompt},
            {"role": "user", "content": problem.prompt},
        ]
        if reprompt is not None:
            messages.append({"role": "assistant", "content": reprompt})
            messages.append({"role": "user", "content": _REPROMPT})
        payload: dict[str, Any] = {
            "model": hints.model_name or cfg.model,
            "messages": messages,
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": "final_answer", "strict": True, "schema": ANSWER_SCHEMA},
            },
        }
        effort = hints.reasoning_effort or cfg.reasoning_effort
        if effort is not None:
            payload[cfg.reasoning_effort_field] = effort
        temperature = hints.temperature if hints.temperature is not None else cfg.temperature
        if temperature is not None:
            payload["temperature"] = temperature
        return payload

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        return headers

    def _usage(self, body: Mapping[str, Any]) -> tuple[int, int]:
        usage = body.get("usage") or {}
        prompt = int(usage.get("prompt_tokens") or 0)
        completion = int(usage.get("completion_tokens") or 0)
        if self.config.reasoning_tokens_separate:
            details = usage.get("completion_tokens_details") or {}
            completion += int(details.get("reasoning_tokens") or usage.get("reasoning_tokens") or 0)
        return prompt, completion

    @staticmethod
    def _extract(body: Mapping[str, Any]) -> tuple[str, str]:
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise _Malformed(f"response has no message content ({exc!r})") from None
        if not isinstance(content, str):
            raise _Malformed("message content is not a string")
        try:
            obj = json.loads(content)
        except json.JSONDecodeError:
            raise _Malformed(f"content is not JSON: {content[:200]!r}") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("answer"), (str, int, float)):
            raise _Malformed(f"content lacks a string 'answer' field: {content[:200]!r}")
        return content, str(obj["answer"])

    async def _post_once(self, payload: dict[str, Any]) -> dict[str, Any]:
        try:
            resp = await self._http().post(
                self.config.url, json=payload, headers=self._headers(), timeout=self.config.timeout_s
            )
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise _Transient(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code in _RETRY_STATUS or resp.status_code >= 500:
            raise _Transient(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise RuntimeError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError:
            raise _Malformed("response body is not JSON") from None

    async def _post_with_retry(self, payload: dict[str, Any]) -> dict[str, Any]:
        attempts = max(1, self.config.max_attempts)
        for attempt in range(attempts):
            try:
                return await self._post_once(payload)
            except _Transient as exc:
                if attempt + 1 >= attempts:
                    raise RuntimeError(f"giving up after {attempts} attempts: {exc}") from exc
                delay = _backoff_delay(self.config.backoff_base_s, self.config.backoff_max_s, attempt)
                log.debug("transient failure (%s); retrying in %.2fs", exc, delay)
                await self._sleep(delay)
        raise AssertionError("unreachable")  # pragma: no cover

    async def solve(self, problem: ProblemSpec, turn_index: int, sample_index: int) -> QueryRecord:
        if self._gate is None:
            return await self._solve(problem, turn_index)
        async with self._gate:
            return await self._solve(problem, turn_index)

    async def _solve(self, problem: ProblemSpec, turn_index: int) -> QueryRecord:
        start = time.perf_counter()
        prompt_tokens = completion_tokens = 0
        reprompt: Optional[str] = None
        raw = ""

        def elapsed() -> int:
            return int(round((time.perf_counter() - start) * 1000))

        for round_ in range(2):
            try:
                body = await self._post_with_retry(self.build_payload(problem, reprompt))
            except (RuntimeError, _Malformed) as exc:
                return QueryRecord.failed(
                    str(exc),
                    turn_index=turn_index,
                    raw_text=raw,
                    prompt_tokens=prompt_tokens,
                    completion_tokens=completion_tokens,
                    latency_ms=elapsed(),
                )
            p, c = self._usage(body)
            prompt_tokens += p
            completion_tokens += c
            try:
                raw, answer = self._extract(body)
            except _Malformed as exc:
                try:
                    raw = body["choices"][0]["message"]["content"] or ""
                except (KeyError, IndexError, TypeError):
                    raw = ""
                if round_ == 0:
                    reprompt = raw if isinstance(raw, str) else str(raw)
                    continue
                return QueryRecord.failed(
                    f"malformed structured output: {exc}",
                    turn_index=turn_index,
                    raw_text=raw if isinstance(raw, str) else str(raw),
                    prompt_tokens=prompt_tokens,
                    completion_tokens=completion_tokens,
                    latency_ms=elapsed(),
                )
            return QueryRecord(
                raw_text=raw,
                answer=normalize_answer(answer),
                prompt_tokens=prompt_tokens,
                completion_tokens=completion_tokens,
                latency_ms=elapsed(),
                turn_index=turn_index,
            )
        raise AssertionError("unreachable")  # pragma: no cover

