"""Stopping rules for majority voting over sampled answers.

Every rule looks only at the counts of the two most frequent answers
(``n_first >= n_second``) and, for fixed-N self-consistency, the number of
samples drawn so far. The sequential tests treat the top two as a Bernoulli
contest with H0: p' = 0.5 against H1: p' > 0.5, where p' is the leader's
share of the top-two votes.

Likelihood ratios and thresholds are kept in log space throughout.
"""

from __future__ import annotations

import enum
import math
from decimal import Decimal
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from typing import Any, ClassVar, NamedTuple

from . import numerics

__all__ = [
    "Decision",
    "Rule",
    "StoppingPolicy",
    "SelfConsistency",
    "PValue",
    "AdaCons",
    "Sprt",
    "Msprt",
    "SprtThresholds",
    "sprt_thresholds",
    "sprt_log_lr",
    "sprt_decide",
    "msprt_log_lr",
    "msprt_decide",
    "pvalue_decide",
    "adacons_decide",
    "self_consistency_decide",
    "hoeffding_sample_size",
    "decide",
    "make_policy",
    "policy_from_dict",
    "CALIBRATED_SPRT_BETA",
    "CALIBRATED_MSPRT_BETA",
]

# Calibrated Type II error rates used with p1 = 0.5001 and the Beta(1e6, 1e6) prior.
CALIBRATED_SPRT_BETA = 0.949976
CALIBRATED_MSPRT_BETA = 0.94994

class Decision(str, enum.Enum):
    STOP_DOMINANT = "stop_dominant"
    STOP_NO_DOMINANCE = "stop_no_dominance"
    CONTINUE = "continue"

    @property
    def stops(self) -> bool:
        return self is not Decision.CONTINUE


class Rule(str, enum.Enum):
    SELF_CONSISTENCY = "self_consistency"
    PVALUE = "pvalue"
    ADACONS = "adacons"
    SPRT = "sprt"
    MSPRT = "msprt"


class SprtThresholds(NamedTuple):
    """Wald boundaries; the log forms are what the rules compare against."""

    ln_A: float
    ln_B: float
    A: float
    B: float


def _check_open_unit(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value!r}")


def _check_ordered(n_first: int, n_second: int) -> None:
    if n_first < n_second:
        raise ValueError(
            f"expected top-two counts with n_first >= n_second, got ({n_first}, {n_second})"
        )
    if n_second < 0:
        raise ValueError(f"counts must be non-negative, got ({n_first}, {n_second})")


@dataclass(frozen=True)
class StoppingPolicy:
    """Base for the five rule configurations.

    Instances are immutable and hashable so decisions can be memoized.
    """

    rule: ClassVar[Rule]
    default_label: ClassVar[str]

    max_samples: int
    label: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if self.max_samples < 1:
            raise ValueError(f"max_samples must be >= 1, got {self.max_samples}")
        if not self.label:
            object.__setattr__(self, "label", self.default_label)

    def decide(self, n_first: int, n_second: int, n_total: int) -> Decision:
        """Decision on the current counts; ``n_total`` counts every sample drawn."""
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"rule": self.rule.value}
        for f in fields(self):
            out[f.name] = getattr(self, f.name)
        return out

    def with_params(self, **changes: Any) -> "StoppingPolicy":
        return replace(self, **changes)


@dataclass(frozen=True)
class SelfConsistency(StoppingPolicy):
    rule: ClassVar[Rule] = Rule.SELF_CONSISTENCY
    default_label: ClassVar[str] = "self-consistency"

    max_samples: int = 40
    label: str = field(default="", compare=False)
    fixed_n: int = 40

    def __post_init__(self) -> None:
        super().__post_init__()
        if not 1 <= self.fixed_n <= self.max_samples:
            raise ValueError(
                f"fixed_n must satisfy 1 <= fixed_n <= max_samples={self.max_samples}, "
                f"got {self.fixed_n}"
            )

    def decide(self, n_first: int, n_second: int, n_total: int) -> Decision:
        return self_consistency_decide(n_total, self, n_first=n_first)


@dataclass(frozen=True)
class PValue(StoppingPolicy):
    rule: ClassVar[Rule] = Rule.PVALUE
    default_label: ClassVar[str] = "p-value"

    max_samples: int = 40
    label: str = field(default="", compare=False)
    alpha_sig: float = 0.05

    def __post_init__(self) -> None:
        super().__post_init__()
        _check_open_unit("alpha_sig", self.alpha_sig)

    def decide(self, n_first: int, n_second: int, n_total: int) -> Decision:
        return pvalue_decide(n_first, n_second, self)


@dataclass(frozen=True)
class AdaCons(StoppingPolicy):
    """Adaptive-Consistency, Beta-posterior variant with a uniform prior."""

    rule: ClassVar[Rule] = Rule.ADACONS
    default_label: ClassVar[str] = "ada-cons"

    max_samples: int = 40
    label: str = field(default="", compare=False)
    confidence: float = 0.95

    def __post_init__(self) -> None:
        super().__post_init__()
        _check_open_unit("confidence", self.confidence)

    def decide(self, n_first: int, n_second: int, n_total: int) -> Decision:
        return adacons_decide(n_first, n_second, self)


@dataclass(frozen=True)
class Sprt(StoppingPolicy):
    """Wald SPRT of p' = 0.5 against the point alternative p' = p1.

    alpha + beta < 1 is not enforced; the calibrated setting has beta close
    to 1 - alpha on purpose.
    """

    rule: ClassVar[Rule] = Rule.SPRT
    default_label: ClassVar[str] = "sprt"

    max_samples: int = 256
    label: str = field(default="", compare=False)
    p1: float = 0.5001
    alpha: float = 0.05
    beta: float = CALIBRATED_SPRT_BETA

    def __post_init__(self) -> None:
        super().__post_init__()
        if not 0.5 < self.p1 < 1.0:
            raise ValueError(f"p1 must lie in (0.5, 1), got {self.p1!r}")
        _check_open_unit("alpha", self.alpha)
        _check_open_unit("beta", self.beta)

    @property
    def thresholds(self) -> SprtThresholds:
        return sprt_thresholds(self.alpha, self.beta)

    def decide(self, n_first: int, n_second: int, n_total: int) -> Decision:
        return sprt_decide(n_first, n_second, self)


@dataclass(frozen=True)
class Msprt(StoppingPolicy):
    """Mixture SPRT with a Beta(prior_alpha0, prior_beta0) prior on (0.5, 1].

    With ``truncate_prior=False`` the Beta density is integrated over
    (0.5, 1] without renormalizing; that only shifts the log ratio by
    ln(1 - I_0.5(alpha0, beta0)), i.e. -ln 2 for a symmetric prior.
    """

    rule: ClassVar[Rule] = Rule.MSPRT
    default_label: ClassVar[str] = "msprt"

    max_samples: int = 256
    label: str = field(default="", compare=False)
    prior_alpha0: float = 1e6
    prior_beta0: float = 1e6
    alpha: float = 0.05
    beta: float = CALIBRATED_MSPRT_BETA
    truncate_prior: bool = True

    def __post_init__(self) -> None:
        super().__post_init__()
        if not (self.prior_alpha0 > 0 and self.prior_beta0 > 0):
            raise ValueError(
                f"prior parameters must be positive, got "
                f"({self.prior_alpha0!r}, {self.prior_beta0!r})"
            )
        _check_open_unit("alpha", self.alpha)
        _check_open_unit("beta", self.beta)

    @property
    def thresholds(self) -> SprtThresholds:
        return sprt_thresholds(self.alpha, self.beta)

    def decide(self, n_first: int, n_second: int, n_total: int) -> Decision:
        return msprt_decide(n_first, n_second, self)


_POLICY_TYPES: dict[Rule, type[StoppingPolicy]] = {
    cls.rule: cls for cls in (SelfConsistency, PValue, AdaCons, Sprt, Msprt)
}


def sprt_thresholds(alpha: float, beta: float) -> SprtThresholds:
    """Wald's boundaries A = (1 - beta) / alpha and B = beta / (1 - alpha), in logs."""
    _check_open_unit("alpha", alpha)
    _check_open_unit("beta", beta)
    # Error rates are decimal quantities; evaluate the ratios on their shortest
    # decimal form so that e.g. (0.05, 0.10) gives A == 18.0 exactly.
    a = Decimal(repr(float(alpha)))
    b = Decimal(repr(float(beta)))
    upper = float((1 - b) / a)
    lower = float(b / (1 - a))
    return SprtThresholds(ln_A=math.log(upper), ln_B=math.log(lower), A=upper, B=lower)


def sprt_log_lr(n_first: int, n_second: int, p1: float) -> float:
    """ln of (p1 / 0.5)^n_first ((1 - p1) / 0.5)^n_second."""
    # log1p keeps p1 = 0.5001 accurate: ln(2 p1) = log1p(2 p1 - 1).
    shift = 2.0 * p1 - 1.0
    return n_first * math.log1p(shift) + n_second * math.log1p(-shift)


def _threshold_decision(log_lr: float, thresholds: SprtThresholds) -> Decision:
    if log_lr >= thresholds.ln_A:
        return Decision.STOP_DOMINANT
    if log_lr <= thresholds.ln_B:
        return Decision.STOP_NO_DOMINANCE
    return Decision.CONTINUE


@lru_cache(maxsize=None)
def _cached_thresholds(alpha: float, beta: float) -> SprtThresholds:
    return sprt_thresholds(alpha, beta)


@lru_cache(maxsize=None)
def _sprt_decide_cached(n_first: int, n_second: int, p1: float, alpha: float, beta: float) -> Decision:
    return _threshold_decision(sprt_log_lr(n_first, n_second, p1), _cached_thresholds(alpha, beta))


def sprt_decide(n_first: int, n_second: int, policy: Sprt) -> Decision:
    _check_ordered(n_first, n_second)
    return _sprt_decide_cached(n_first, n_second, policy.p1, policy.alpha, policy.beta)


@lru_cache(maxsize=4096)
def _log_upper_mass(a: float, b: float) -> float:
    """ln P(p > 1/2) for p ~ Beta(a, b), via I_0.5(b, a) = 1 - I_0.5(a, b)."""
    return math.log(numerics.reg_inc_beta(0.5, b, a))


@lru_cache(maxsize=None)
def _msprt_log_lr_cached(
    n_first: int, n_second: int, a: float, b: float, truncate: bool
) -> float:
    # Untruncated Beta(a, b) mixture restricted to (0.5, 1]:
    #   B(a+n1, b+n2) / B(a, b) * P_post(p > 1/2) / 0.5^(n1+n2)
    value = numerics.log_beta_ratio(a, b, n_first, n_second)
    value += _log_upper_mass(a + n_first, b + n_second)
    if truncate:
        value -= _log_upper_mass(a, b)
    return value


def msprt_log_lr(
    n_first: int,
    n_second: int,
    prior_alpha0: float,
    prior_beta0: float,
    truncate_prior: bool = True,
) -> float:
    """ln of the mixture likelihood ratio against p' = 0.5.

    The alternative averages p'^n_first (1 - p')^n_second over a
    Beta(prior_alpha0, prior_beta0) density restricted to (0.5, 1].

    Raises:
        ValueError: for non-positive prior parameters or negative counts.
    """
    if not (prior_alpha0 > 0 and prior_beta0 > 0):
        raise ValueError(
            f"prior parameters must be positive, got ({prior_alpha0!r}, {prior_beta0!r})"
        )
    if n_first < 0 or n_second < 0:
        raise ValueError(f"counts must be non-negative, got ({n_first}, {n_second})")
    if n_first == 0 and n_second == 0 and truncate_prior:
        return 0.0
    return _msprt_log_lr_cached(
        n_first, n_second, float(prior_alpha0), float(prior_beta0), bool(truncate_prior)
    )


def msprt_decide(n_first: int, n_second: int, policy: Msprt) -> Decision:
    _check_ordered(n_first, n_second)
    log_lr = msprt_log_lr(
        n_first, n_second, policy.prior_alpha0, policy.prior_beta0, policy.truncate_prior
    )
    return _threshold_decision(log_lr, _cached_thresholds(policy.alpha, policy.beta))


def pvalue_decide(n_first: int, n_second: int, policy: PValue) -> Decision:
    """One-sided binomial test of the leader against a fair split.

    Has no acceptance region: returns STOP_DOMINANT or CONTINUE only.
    """
    _check_ordered(n_first, n_second)
    p = numerics.binom_sf(n_first, n_first + n_second, 0.5)
    return Decision.STOP_DOMINANT if p < policy.alpha_sig else Decision.CONTINUE


def adacons_decide(n_first: int, n_second: int, policy: AdaCons) -> Decision:
    _check_ordered(n_first, n_second)
    # P(p' > 1/2) under Beta(n_first + 1, n_second + 1) equals I_0.5(n_second + 1, n_first + 1).
    prob = numerics.reg_inc_beta(0.5, n_second + 1, n_first + 1)
    return Decision.STOP_DOMINANT if prob >= policy.confidence else Decision.CONTINUE


def self_consistency_decide(
    n_observed_total: int, policy: SelfConsistency, *, n_first: int | None = None
) -> Decision:
    """Stop once ``fixed_n`` samples have been drawn.

    STOP_DOMINANT means "stop and take the mode". If the caller passes
    ``n_first`` and it is zero (every sample failed) the stop is reported as
    STOP_NO_DOMINANCE instead.
    """
    if n_observed_total < policy.fixed_n:
        return Decision.CONTINUE
    if n_first is not None and n_first < 1:
        return Decision.STOP_NO_DOMINANCE
    return Decision.STOP_DOMINANT


def hoeffding_sample_size(k: int, eps: float, delta: float) -> int:
    """Smallest n with 2 k exp(-2 n eps^2) <= delta (union bound over k categories)."""
    if k < 1:
        raise ValueError(f"k must be a positive integer, got {k}")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps!r}")
    if delta <= 0.0:
        raise ValueError(f"delta must be positive, got {delta!r}")
    if delta >= 2 * k:
        return 0
    n = math.ceil(math.log(2 * k / delta) / (2.0 * eps * eps))
    # Guard against the ceiling landing one above an exact boundary.
    if n > 0 and 2 * k * math.exp(-2.0 * (n - 1) * eps * eps) <= delta:
        n -= 1
    return n


def decide(policy: StoppingPolicy, n_first: int, n_second: int, n_total: int | None = None) -> Decision:
    if n_total is None:
        n_total = n_first + n_second
    return policy.decide(n_first, n_second, n_total)


_RULE_ALIASES = {
    "sc": Rule.SELF_CONSISTENCY,
    "self-consistency": Rule.SELF_CONSISTENCY,
    "self_consistency": Rule.SELF_CONSISTENCY,
    "selfconsistency": Rule.SELF_CONSISTENCY,
    "pvalue": Rule.PVALUE,
    "p-value": Rule.PVALUE,
    "adacons": Rule.ADACONS,
    "ada-cons": Rule.ADACONS,
    "sprt": Rule.SPRT,
    "msprt": Rule.MSPRT,
}


def parse_rule(name: str | Rule) -> Rule:
    if isinstance(name, Rule):
        return name
    try:
        return _RULE_ALIASES[name.strip().lower()]
    except KeyError:
        choices = ", ".join(sorted({r.value for r in Rule}))
        raise ValueError(f"unknown stopping rule {name!r}; choose one of: {choices}") from None


def policy_class(rule: str | Rule) -> type[StoppingPolicy]:
    return _POLICY_TYPES[parse_rule(rule)]


def make_policy(rule: str | Rule, **params: Any) -> StoppingPolicy:
    """Build a policy from a rule name and keyword parameters.

    Unset parameters take the calibrated defaults. Self-consistency with
    only ``fixed_n`` given gets ``max_samples = fixed_n``.
    """
    cls = policy_class(rule)
    params = {k: v for k, v in params.items() if v is not None}
    if cls is SelfConsistency and "fixed_n" in params and "max_samples" not in params:
        params["max_samples"] = params["fixed_n"]
    known = {f.name for f in fields(cls)}
    unknown = set(params) - known
    if unknown:
        raise ValueError(
            f"unknown parameter(s) for rule {cls.rule.value}: {', '.join(sorted(unknown))}"
        )
    return cls(**params)


def policy_from_dict(data: dict[str, Any]) -> StoppingPolicy:
    data = dict(data)
    rule = data.pop("rule")
    return make_policy(rule, **data)
