"""Joint ranking and confidence scoring of fused candidates by the large model."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import prompts
from .core import CandidateEdge, TaxoweaveError
from .definitions import DefinitionEntry
from .gateway import Gateway, map_concurrent
from .selection import CandidateInfo

log = logging.getLogger(__name__)

FALLBACK_CONFIDENCE = 0.05


class EmptySelection(TaxoweaveError):
    """The model returned no valid parent for a child term."""


@dataclass(frozen=True)
class RankedParentSet:
    """At most k2 candidate parents for one child, confidence-descending."""

    child: str
    parents: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        previous = None
        for name, confidence in self.parents:
            if name == self.child:
                raise ValueError(f"child {self.child!r} cannot be its own parent")
            if name in seen:
                raise ValueError(f"duplicate parent {name!r} for {self.child!r}")
            seen.add(name)
            value = float(confidence)
            if not math.isfinite(value) or not 0.0 < value < 1.0:
                raise ValueError(f"confidence out of (0, 1): {value}")
            if previous is not None and value > previous:
                raise ValueError("parents must be ordered by descending confidence")
            previous = value


def rank_and_score(
    gateway: Gateway,
    model_id: str,
    child: str,
    child_definition: str,
    candidates: Sequence[tuple[str, str]],
    root: str,
    root_definition: str,
    k2: int,
    max_output_tokens: int = 512,
) -> RankedParentSet:
    """Jointly rank `candidates` (name, definition pairs) and keep the top k2.

    Entries naming terms outside the candidate list are dropped; when nothing
    valid remains the call raises EmptySelection so the caller can fall back.
    """
    if not candidates:
        raise ValueError("candidates must be non-empty")
    names = frozenset(name for name, _ in candidates)
    req = prompts.rank_request(
        model_id, root, root_definition, child, child_definition,
        list(candidates), k2, max_output_tokens,
    )
    entries = gateway.chat_structured(req, vocabulary=names, on_unknown="drop")
    entries = [(name, confidence) for name, confidence in entries if name != child]
    if not entries:
        raise EmptySelection(f"no valid parent selected for {child!r}")
    entries.sort(key=lambda item: (-item[1], item[0]))
    limit = min(k2, len(candidates))
    return RankedParentSet(child, tuple(entries[:limit]))


def rank_all(
    gateway: Gateway,
    model_id: str,
    task,
    definitions: Mapping[str, DefinitionEntry],
    candidate_map: Mapping[str, Sequence[CandidateInfo]],
    k2: int,
) -> dict[str, RankedParentSet]:
    """Ranked parent sets for every child; attachability is always preserved.

    Children with no candidates, or for which the model selects nothing
    valid, are attached to the root with a low fallback confidence so the
    arborescence stage can still span every term.
    """
    children = sorted(candidate_map)
    root_definition = definitions[task.root].refined

    def _one(child: str) -> RankedParentSet:
        infos = candidate_map[child]
        if not infos:
            log.warning("no candidates for %r; attaching to root", child)
            return RankedParentSet(child, ((task.root, FALLBACK_CONFIDENCE),))
        candidates = [(info.parent, definitions[info.parent].refined) for info in infos]
        try:
            return rank_and_score(
                gateway, model_id, child, definitions[child].refined,
                candidates, task.root, root_definition, k2,
            )
        except EmptySelection:
            log.warning("model selected no valid parent for %r; attaching to root", child)
            return RankedParentSet(child, ((task.root, FALLBACK_CONFIDENCE),))

    results = map_concurrent(_one, children, gateway.max_in_flight)
    return dict(zip(children, results))


def ranked_edges(ranked: Mapping[str, RankedParentSet]) -> list[CandidateEdge]:
    edges: list[CandidateEdge] = []
    for child in sorted(ranked):
        for parent, confidence in ranked[child].parents:
            edges.append(CandidateEdge(child, parent, confidence, "ranked"))
    return edges
