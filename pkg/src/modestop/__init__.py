"""Early stopping for majority-vote sampling of stochastic answer sources.

Draws answers in concurrent batches and stops as soon as a sequential test
says the leading answer dominates the runner-up.
"""

from importlib.metadata import PackageNotFoundError, version

from .stopping import (
    AdaCons,
    Decision,
    Msprt,
    PValue,
    Rule,
    SelfConsistency,
    Sprt,
    StoppingPolicy,
    make_policy,
)
from .tally import VoteTally, normalize_answer

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover - running from a source tree
    __version__ = "0.1.0"

__all__ = [
    "__version__",
    "AdaCons",
    "Decision",
    "Msprt",
    "PValue",
    "Rule",
    "SelfConsistency",
    "Sprt",
    "StoppingPolicy",
    "make_policy",
    "VoteTally",
    "normalize_answer",
]
