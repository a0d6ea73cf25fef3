"""Transfer-benchmark construction.

Three corpus transforms probe how well preference summaries carry across
contexts: cross-corpus matching (embed histories, pair the most similar users,
swap their evaluation targets), secondary-interest injection (dilute a primary
history with another user's interactions at a controlled intensity), and
positive-only reduction (drop every rejected item).
"""

import logging
import random
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from ._util import derive_seed
from .core import InteractionTriple, UserHistory
from .errors import ContractError, ValidationError
from .modelio import ModelClient
from .prompts import render_history_block

logger = logging.getLogger("prefpipe.transferbench")


@dataclass(frozen=True)
class UserPair:
    user_a: str
    user_b: str
    similarity: float


@dataclass(frozen=True)
class NoiseConfig:
    """Secondary-interest injection settings. ``intensity`` is the fraction of
    the fused history that comes from the donor."""

    intensity: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.intensity < 1.0):
            raise ValidationError(f"intensity must be in [0, 1), got {self.intensity}")


@dataclass(frozen=True)
class InjectionResult:
    """A fused history plus the provenance needed to reverse the injection.

    ``injected_positions`` are the fused positions holding donor triples;
    ``source_indices`` the original index of every fused triple in its source
    history (primary or donor).
    """

    history: UserHistory
    donor_user: str
    injected_positions: tuple[int, ...]
    source_indices: tuple[int, ...]


def embed_history(client: ModelClient, history: UserHistory) -> np.ndarray:
    """Embed the labeled interaction-history rendering of a full history."""
    return client.embed(render_history_block(history.triples), meta={"user_id": history.user_id})


def match_users(
    client: ModelClient,
    corpus_a: Sequence[UserHistory],
    corpus_b: Sequence[UserHistory],
    top_k: int,
) -> list[UserPair]:
    """Pair users across two corpora by embedding similarity.

    Builds the full |A| x |B| similarity matrix (exact inner products of the
    unit embeddings) and returns the top_k pairs in descending similarity, ties
    broken on user ids. A user may appear in several pairs; callers who care
    can detect that from the result.
    """
    if top_k < 1:
        raise ValidationError(f"top_k must be >= 1, got {top_k}")
    if not corpus_a or not corpus_b:
        raise ValidationError("both corpora must be non-empty")
    total = len(corpus_a) * len(corpus_b)
    if top_k > total:
        raise ValidationError(f"top_k {top_k} exceeds the {total} available pairs")
    emb_a = np.stack([embed_history(client, h) for h in corpus_a])
    emb_b = np.stack([embed_history(client, h) for h in corpus_b])
    if emb_a.shape[1] != emb_b.shape[1]:
        raise ContractError(
            f"embedding dimension mismatch: {emb_a.shape[1]} vs {emb_b.shape[1]}"
        )
    sims = emb_a @ emb_b.T
    flat = [
        (float(sims[i, j]), corpus_a[i].user_id, corpus_b[j].user_id)
        for i in range(len(corpus_a))
        for j in range(len(corpus_b))
    ]
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    pairs = [UserPair(user_a=a, user_b=b, similarity=s) for s, a, b in flat[:top_k]]
    dup_a = len(pairs) - len({p.user_a for p in pairs})
    dup_b = len(pairs) - len({p.user_b for p in pairs})
    if dup_a or dup_b:
        logger.info("matched pairs reuse users: %d repeats on side A, %d on side B", dup_a, dup_b)
    return pairs


def swap_targets(
    pairs: Sequence[UserPair], targets: Mapping[str, InteractionTriple]
) -> tuple[list[dict], dict]:
    """Emit cross-evaluation instances: each pair yields (history A, target B)
    and (history B, target A). Pairs missing a usable target (absent, or a
    positive-only triple) are skipped and counted."""
    instances = []
    skipped = 0
    for pair in pairs:
        t_a, t_b = targets.get(pair.user_a), targets.get(pair.user_b)
        if t_a is None or t_b is None or t_a.rejected is None or t_b.rejected is None:
            skipped += 1
            logger.info("pair (%s, %s) skipped: missing or pairless target", pair.user_a, pair.user_b)
            continue
        for history_user, target_user, triple in (
            (pair.user_a, pair.user_b, t_b),
            (pair.user_b, pair.user_a, t_a),
        ):
            instances.append(
                {
                    "user_id": history_user,
                    "target_user": target_user,
                    "context": triple.context,
                    "item_a": triple.chosen,
                    "item_b": triple.rejected,
                    "truth": "A",
                    "origin": "cross-swap",
                    "similarity": pair.similarity,
                }
            )
    return instances, {"pairs_in": len(pairs), "pairs_skipped": skipped, "instances": len(instances)}


def inject_secondary(primary: UserHistory, donor: UserHistory, config: NoiseConfig) -> InjectionResult:
    """Dilute ``primary`` with donor triples at the configured intensity.

    The donor count m solves m / (n + m) = intensity, rounded half-up. Donor
    triples are sampled without replacement and spliced at uniformly random
    positions; both source orders are preserved. Fused indices are renumbered
    0..n+m-1; the original index of every triple is recorded so the primary can
    be reconstructed exactly.
    """
    n = len(primary)
    if n == 0:
        raise ValidationError(f"primary history {primary.user_id} is empty")
    m = int(config.intensity * n / (1.0 - config.intensity) + 0.5)
    if m == 0:
        return InjectionResult(
            history=primary,
            donor_user=donor.user_id,
            injected_positions=(),
            source_indices=tuple(t.index for t in primary.triples),
        )
    if m > len(donor):
        logger.warning(
            "donor %s has %d triples, wanted %d; capping", donor.user_id, len(donor), m
        )
        m = len(donor)
    rng = random.Random(derive_seed(config.seed, "inject", primary.user_id, donor.user_id))
    donor_picks = [donor.triples[i] for i in sorted(rng.sample(range(len(donor)), m))]
    donor_slots = set(rng.sample(range(n + m), m))
    fused: list[InteractionTriple] = []
    sources: list[int] = []
    positions: list[int] = []
    it_primary = iter(primary.triples)
    it_donor = iter(donor_picks)
    for slot in range(n + m):
        src = next(it_donor) if slot in donor_slots else next(it_primary)
        if slot in donor_slots:
            positions.append(slot)
        fused.append(replace(src, index=slot))
        sources.append(src.index)
    return InjectionResult(
        history=UserHistory(
            user_id=primary.user_id, triples=tuple(fused), dataset_tag=primary.dataset_tag
        ),
        donor_user=donor.user_id,
        injected_positions=tuple(positions),
        source_indices=tuple(sources),
    )


def reconstruct_primary(result: InjectionResult) -> UserHistory:
    """Undo an injection: drop the injected positions and restore the surviving
    triples' original indices."""
    injected = set(result.injected_positions)
    triples = tuple(
        replace(t, index=result.source_indices[pos])
        for pos, t in enumerate(result.history.triples)
        if pos not in injected
    )
    return UserHistory(
        user_id=result.history.user_id, triples=triples, dataset_tag=result.history.dataset_tag
    )
