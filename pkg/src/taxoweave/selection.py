"""Hybrid parent candidate selection.

Two complementary routes per term: yes/no is-a template voting by the
lightweight model, and cosine similarity between definition embeddings.
The routes are fused order-preservingly, is-a candidates first.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import prompts
from .core import PipelineConfig, TaxoweaveError, TermRecord, canonical_order
from .definitions import DefinitionEntry
from .gateway import Gateway, ParseError, SchemaError, map_concurrent

log = logging.getLogger(__name__)


class MissingEmbedding(TaxoweaveError):
    """A term required for definition matching has no embedding."""


@dataclass(frozen=True)
class TemplateSet:
    """Ordered hypernymy sentence patterns with <query> and <anchor> slots."""

    templates: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.templates:
            raise ValueError("template set must be non-empty")
        for pattern in self.templates:
            if pattern.count("<query>") != 1 or pattern.count("<anchor>") != 1:
                raise ValueError(
                    f"template {pattern!r} must contain <query> and <anchor> exactly once"
                )

    def __len__(self) -> int:
        return len(self.templates)

    def instantiate(self, index: int, query: str, anchor: str) -> str:
        return self.templates[index].replace("<query>", query).replace("<anchor>", anchor)


@dataclass(frozen=True)
class IsaVote:
    """Per-template yes/no judgments for one (query, anchor) pair."""

    query: str
    anchor: str
    per_template: tuple[bool, ...]

    @property
    def score(self) -> int:
        return sum(1 for flag in self.per_template if flag)


def isa_vote(
    gateway: Gateway,
    model_id: str,
    templates: TemplateSet,
    query: str,
    anchor: str,
    max_output_tokens: int = 64,
) -> IsaVote:
    """Ask the lightweight model once per template whether anchor subsumes query.

    A judgment that stays unparseable after the bounded reprompt counts as a
    "no" and is logged; transport-level failures propagate.
    """
    if query == anchor:
        raise ValueError("query and anchor must differ")
    flags: list[bool] = []
    for index in range(len(templates)):
        sentence = templates.instantiate(index, query, anchor)
        req = prompts.isa_request(model_id, sentence, query, anchor, index, max_output_tokens)
        try:
            verdict = bool(gateway.chat_structured(req))
        except (ParseError, SchemaError) as exc:
            log.warning(
                "is-a judgment failed for (%r, %r) template %d: %s", query, anchor, index, exc
            )
            verdict = False
        flags.append(verdict)
    return IsaVote(query, anchor, tuple(flags))


def build_vote_matrix(
    gateway: Gateway,
    model_id: str,
    templates: TemplateSet,
    children: Sequence[str],
    vocabulary: Sequence[str],
    max_output_tokens: int = 64,
) -> dict[tuple[str, str], IsaVote]:
    """Votes for every ordered (query, anchor) pair with query a child term."""
    pairs = [
        (query, anchor)
        for query in sorted(children)
        for anchor in sorted(vocabulary)
        if anchor != query
    ]
    votes = map_concurrent(
        lambda pair: isa_vote(gateway, model_id, templates, *pair, max_output_tokens),
        pairs,
        gateway.max_in_flight,
    )
    return {(vote.query, vote.anchor): vote for vote in votes}


def isa_candidates(
    query: str,
    votes: Mapping[tuple[str, str], IsaVote],
    k_isa: int,
    mutuality: str = "reciprocal-prune",
) -> list[str]:
    """Top anchors by vote score; zero-score anchors are never returned.

    With reciprocal pruning, an anchor whose reverse-direction score strictly
    dominates is dropped: a term judged more strongly to be the query's child
    cannot be its parent.  Reverse scores that were never voted (the root is
    never a query) count as zero.
    """
    scores = {
        anchor: float(vote.score)
        for (child, anchor), vote in votes.items()
        if child == query
    }
    ranked = canonical_order(scores.keys(), scores)
    out: list[str] = []
    for anchor in ranked:
        if scores[anchor] <= 0:
            continue
        if mutuality == "reciprocal-prune":
            reverse = votes.get((anchor, query))
            if reverse is not None and reverse.score > scores[anchor]:
                continue
        out.append(anchor)
        if len(out) == k_isa:
            break
    return out


def definition_similarities(
    query: str, records: Mapping[str, TermRecord]
) -> dict[str, float]:
    """Cosine similarity of the query against every other term's embedding."""
    record = records.get(query)
    if record is None or record.embedding is None:
        raise MissingEmbedding(f"no embedding for {query!r}")
    sims: dict[str, float] = {}
    for name in sorted(records):
        if name == query:
            continue
        other = records[name]
        if other.embedding is None:
            raise MissingEmbedding(f"no embedding for {name!r}")
        # fsum pins the summation order so similarities are platform-stable
        sims[name] = math.fsum(a * b for a, b in zip(record.embedding, other.embedding))
    return sims


def definition_candidates(
    query: str, records: Mapping[str, TermRecord], k_def: int
) -> list[tuple[str, float]]:
    sims = definition_similarities(query, records)
    ranked = canonical_order(sims.keys(), sims)
    return [(name, sims[name]) for name in ranked[:k_def]]


def fuse_candidates(
    isa: Sequence[str], defs: Sequence[str], k1: int
) -> list[str]:
    """Order-preserving union, is-a block first, deduplicated, truncated to k1."""
    out: list[str] = []
    seen: set[str] = set()
    for name in list(isa) + list(defs):
        if name in seen:
            continue
        seen.add(name)
        out.append(name)
        if len(out) == k1:
            break
    return out


@dataclass(frozen=True)
class CandidateInfo:
    """One fused candidate with its per-route evidence (None when a route is off)."""

    parent: str
    isa_score: int | None
    def_sim: float | None


def build_term_records(
    gateway: Gateway, definitions: Mapping[str, str]
) -> dict[str, TermRecord]:
    """Embed "name: definition" for every term and wrap into TermRecords."""
    names = sorted(definitions)
    plain = [TermRecord(name, definitions[name]) for name in names]
    vectors = gateway.embed([record.embedding_text() for record in plain])
    return {
        record.name: TermRecord(record.name, record.definition, vector)
        for record, vector in zip(plain, vectors)
    }


def select_candidates(
    gateway: Gateway,
    task,
    definitions: Mapping[str, DefinitionEntry],
    config: PipelineConfig,
) -> dict[str, list[CandidateInfo]]:
    """Fused candidate parents for every non-root term.

    With hybrid selection disabled, every other term (including the root) is
    a candidate and no model calls are made.
    """
    names = sorted(task.node_names)
    children = [name for name in names if name != task.root]
    if not config.enable_hpcs:
        return {
            child: [CandidateInfo(other, None, None) for other in names if other != child]
            for child in children
        }

    records = build_term_records(
        gateway, {name: definitions[name].refined for name in names}
    )
    templates = TemplateSet(config.templates)
    votes = build_vote_matrix(
        gateway, config.provider.small_model, templates, children, names
    )
    k1 = config.resolved_k1()
    out: dict[str, list[CandidateInfo]] = {}
    for child in children:
        sims = definition_similarities(child, records)
        def_ranked = canonical_order(sims.keys(), sims)[: config.k_def]
        isa_ranked = isa_candidates(child, votes, config.k_isa, config.mutuality)
        fused = fuse_candidates(isa_ranked, def_ranked, k1)
        out[child] = [
            CandidateInfo(parent, votes[(child, parent)].score, sims[parent])
            for parent in fused
        ]
    return out
