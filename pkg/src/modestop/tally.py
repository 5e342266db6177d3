"""Answer normalization and the empirical answer distribution."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import Iterable, Optional

__all__ = [
    "normalize_answer",
    "VoteTally",
    "TopTwo",
    "DistributionStats",
    "top_two",
    "mode",
    "distribution_stats",
]

_DECIMAL_RE = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)")
_WS_RE = re.compile(r"\s+")


def normalize_answer(raw: str) -> str:
    """Canonical form of a raw answer string.

    Trims and lowercases. Plain decimal literals are re-rendered without
    leading zeros or trailing fractional zeros ("0127.50" -> "127.5",
    "127.0" -> "127"); anything else keeps its characters with internal
    whitespace runs collapsed. Fractions such as "99/28" are left as is.
    """
    text = raw.strip().lower()
    if _DECIMAL_RE.fullmatch(text):
        return _canonical_decimal(text)
    return _WS_RE.sub(" ", text)


def _canonical_decimal(text: str) -> str:
    try:
        value = Decimal(text)
    except InvalidOperation:  # pragma: no cover - regex admits only valid literals
        return text
    if value == 0:
        return "0"
    rendered = format(value.normalize(), "f")
    if "." in rendered:
        rendered = rendered.rstrip("0").rstrip(".")
    return rendered


@dataclass(frozen=True)
class TopTwo:
    first_key: Optional[str]
    n_first: int
    second_key: Optional[str]
    n_second: int


@dataclass(frozen=True)
class DistributionStats:
    """Plug-in statistics of a tally.

    ``p1_over_p2`` is ``inf`` when only one distinct answer was seen.
    ``p1_share`` is p1 / (p1 + p2), the other reading of the "ratio" plot.
    """

    p1: float
    p2: float
    p1_over_p2: float
    entropy_nats: float
    n_first: int
    n_second: int
    total: int
    n_distinct: int

    @property
    def p1_share(self) -> float:
        return self.n_first / (self.n_first + self.n_second)


class VoteTally:
    """Counts of normalized answers, remembering when each was first seen.

    Keys are already-normalized answers. Ties between equal counts are broken
    by the earliest first observation.
    """

    def __init__(self, answers: Iterable[str] = ()) -> None:
        self.counts: dict[str, int] = {}
        self.first_seen: dict[str, int] = {}
        self.total = 0
        for answer in answers:
            self.add(answer)

    def add(self, answer: str) -> None:
        if answer not in self.counts:
            self.counts[answer] = 0
            self.first_seen[answer] = self.total
        self.counts[answer] += 1
        self.total += 1

    def __len__(self) -> int:
        return len(self.counts)

    def __contains__(self, answer: object) -> bool:
        return answer in self.counts

    def __repr__(self) -> str:
        return f"VoteTally({self.counts!r})"

    def ranked(self) -> list[tuple[str, int]]:
        """All (answer, count) pairs, most frequent first, ties by first sighting."""
        return sorted(
            self.counts.items(), key=lambda kv: (-kv[1], self.first_seen[kv[0]])
        )

    def top_two(self) -> TopTwo:
        return top_two(self)

    def mode(self) -> Optional[str]:
        return mode(self)


def top_two(tally: VoteTally) -> TopTwo:
    first_key = second_key = None
    n_first = n_second = 0
    seen = tally.first_seen
    # Single pass; a strictly higher count wins, equal counts go to the earlier key.
    for key, n in tally.counts.items():
        if first_key is None or n > n_first or (n == n_first and seen[key] < seen[first_key]):
            second_key, n_second = first_key, n_first
            first_key, n_first = key, n
        elif second_key is None or n > n_second or (
            n == n_second and seen[key] < seen[second_key]
        ):
            second_key, n_second = key, n
    if second_key is None:
        n_second = 0
    return TopTwo(first_key, n_first, second_key, n_second)


def mode(tally: VoteTally) -> Optional[str]:
    return top_two(tally).first_key


def distribution_stats(tally: VoteTally) -> DistributionStats:
    if tally.total == 0:
        raise ValueError("distribution_stats needs at least one observation")
    top = top_two(tally)
    n = tally.total
    entropy = -math.fsum(c / n * math.log(c / n) for c in tally.counts.values())
    ratio = top.n_first / top.n_second if top.n_second else math.inf
    return DistributionStats(
        p1=top.n_first / n,
        p2=top.n_second / n,
        p1_over_p2=ratio,
        entropy_nats=max(0.0, entropy),
        n_first=top.n_first,
        n_second=top.n_second,
        total=n,
        n_distinct=len(tally.counts),
    )
