"""Preference-reasoning pipeline engine.

Builds and trains incremental user-preference summarizers: SFT data synthesis
with generate-validate-merge, curriculum pruning of preference corpora,
two-stage rollouts with cumulative rewards for policy optimization, streaming
inference over growing histories, and transfer benchmarks, plus a scripted
simulation lab for fully offline end-to-end runs.
"""

__version__ = "0.1.0"

from .core import HistorySegment, InteractionTriple, PreferenceSummary, UserHistory

__all__ = [
    "HistorySegment",
    "InteractionTriple",
    "PreferenceSummary",
    "UserHistory",
    "__version__",
]
