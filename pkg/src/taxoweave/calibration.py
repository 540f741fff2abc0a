"""Structure-aware score calibration.

Pipeline order: drop unreliable mutual edges, min-max normalize the
surviving scores, compute six structural features per edge, ask the large
model for a penalty per candidate parent, and shrink each score by its
penalty.  With calibration disabled the filtered, normalized edges pass
through unchanged.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from . import prompts
from .core import CandidateEdge, PipelineConfig
from .gateway import Gateway, ParseError, SchemaError, map_concurrent

log = logging.getLogger(__name__)

FINAL_SCORE_TOL = 1e-9

EdgeKey = tuple[str, str]


@dataclass(frozen=True)
class StructuralFeatures:
    """Per-edge evidence fed to the penalty prompt.

    margin: score advantage over the child's best other candidate, in [-1, 1].
    popularity: fraction of all child terms that propose this parent.
    pullback: fraction of the child's other candidates that themselves treat
        this parent as a candidate with weaker supporting scores.
    skip_support: strength of the best two-hop path suggesting the parent is
        an ancestor rather than the direct parent.
    sibling_cohesion: mean Jaccard overlap between the child's candidate set
        and those of the parent's other candidate children.
    depth_penalty: shallowness of the parent in the candidate graph, in
        [0, 0.5]; unreachable parents get the neutral 0.25.
    """

    margin: float
    popularity: float
    pullback: float
    skip_support: float
    sibling_cohesion: float
    depth_penalty: float

    def as_dict(self) -> dict[str, float]:
        return {
            "margin": self.margin,
            "popularity": self.popularity,
            "pullback": self.pullback,
            "skip_support": self.skip_support,
            "sibling_cohesion": self.sibling_cohesion,
            "depth_penalty": self.depth_penalty,
        }


@dataclass(frozen=True)
class CalibratedEdge:
    """An edge after penalty shrinkage: final = base * (1 - penalty)."""

    child: str
    parent: str
    base_score: float
    penalty: float
    final_score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.penalty <= 0.5:
            raise ValueError(f"penalty out of [0, 0.5]: {self.penalty}")
        expected = self.base_score * (1.0 - self.penalty)
        if abs(self.final_score - expected) > FINAL_SCORE_TOL:
            raise ValueError("final_score must equal base_score * (1 - penalty)")

    @classmethod
    def apply(cls, child: str, parent: str, base_score: float, penalty: float) -> "CalibratedEdge":
        return cls(child, parent, base_score, penalty, base_score * (1.0 - penalty))


def filter_mutual_edges(
    edges: Iterable[CandidateEdge], tau_m: float
) -> list[CandidateEdge]:
    """Resolve pairs present in both directions.

    Scores within tau_m of each other are contradictory evidence: both
    directions are dropped.  Otherwise only the higher-scored direction
    survives.  Edges without a reverse pass through unchanged.
    """
    by_key: dict[EdgeKey, CandidateEdge] = {}
    for edge in edges:
        key = (edge.child, edge.parent)
        current = by_key.get(key)
        if current is None or edge.score > current.score:
            by_key[key] = edge
    kept: list[CandidateEdge] = []
    for key in sorted(by_key):
        child, parent = key
        edge = by_key[key]
        reverse = by_key.get((parent, child))
        if reverse is None:
            kept.append(edge)
        elif abs(edge.score - reverse.score) <= tau_m:
            continue
        elif edge.score > reverse.score:
            kept.append(edge)
    return kept


def normalize_scores(edges: Sequence[CandidateEdge]) -> list[CandidateEdge]:
    """Global min-max normalization; a degenerate range maps every score to 1."""
    if not edges:
        raise ValueError("at least one edge is required")
    scores = [edge.score for edge in edges]
    low, high = min(scores), max(scores)
    if high == low:
        return [CandidateEdge(e.child, e.parent, 1.0, e.stage) for e in edges]
    return [
        CandidateEdge(e.child, e.parent, (e.score - low) / (high - low), e.stage)
        for e in edges
    ]


def _parent_sets(edges: Sequence[CandidateEdge]) -> dict[str, dict[str, float]]:
    parent_sets: dict[str, dict[str, float]] = {}
    for edge in edges:
        parent_sets.setdefault(edge.child, {})[edge.parent] = edge.score
    return parent_sets


def compute_features(
    edges: Sequence[CandidateEdge], root: str, delta: float = 0.05
) -> dict[EdgeKey, StructuralFeatures]:
    """Six structural features per candidate edge, computed on one snapshot.

    Depth comes from a BFS from the root over the parent-to-child graph of
    all candidate edges; the denominator of popularity is the number of
    distinct child terms.
    """
    parent_sets = _parent_sets(edges)
    children_of: dict[str, set[str]] = {}
    for edge in edges:
        children_of.setdefault(edge.parent, set()).add(edge.child)
    n_children = len(parent_sets)

    adjacency: dict[str, list[str]] = {}
    for edge in edges:
        adjacency.setdefault(edge.parent, []).append(edge.child)
    depth: dict[str, int] = {root: 0}
    queue = deque([root])
    while queue:
        node = queue.popleft()
        for nxt in sorted(adjacency.get(node, ())):
            if nxt not in depth:
                depth[nxt] = depth[node] + 1
                queue.append(nxt)
    d_max = max(depth.values())

    features: dict[EdgeKey, StructuralFeatures] = {}
    for edge in sorted(edges, key=lambda e: (e.child, e.parent)):
        child, parent, score = edge.child, edge.parent, edge.score
        candidates = parent_sets[child]

        others = [candidates[q] for q in candidates if q != parent]
        margin = score - max(others) if others else 0.0

        popularity = len(children_of.get(parent, ())) / n_children

        if len(candidates) <= 1:
            pullback = 0.0
        else:
            supporting = 0
            for mid in candidates:
                if mid == parent:
                    continue
                mid_candidates = parent_sets.get(mid)
                if mid_candidates is None or parent not in mid_candidates:
                    continue
                if min(mid_candidates[parent], candidates[mid]) < score:
                    supporting += 1
            pullback = supporting / (len(candidates) - 1)

        skip_support = 0.0
        for mid in candidates:
            if mid == parent or candidates[mid] < score - delta:
                continue
            mid_candidates = parent_sets.get(mid)
            if mid_candidates is None or parent not in mid_candidates:
                continue
            skip_support = max(skip_support, min(candidates[mid], mid_candidates[parent]))

        siblings = [t for t in sorted(children_of.get(parent, ())) if t != child]
        if siblings:
            own = set(candidates)
            total = 0.0
            for sibling in siblings:
                other_set = set(parent_sets[sibling])
                total += len(own & other_set) / len(own | other_set)
            cohesion = total / len(siblings)
        else:
            cohesion = 0.0

        if parent in depth:
            depth_penalty = 0.5 if d_max == 0 else 0.5 * (1.0 - depth[parent] / d_max)
        else:
            depth_penalty = 0.25

        features[(child, parent)] = StructuralFeatures(
            margin, popularity, pullback, skip_support, cohesion, depth_penalty
        )
    return features


def llm_penalties(
    gateway: Gateway,
    model_id: str,
    root: str,
    child: str,
    parent_rows: Sequence[tuple[str, float, StructuralFeatures]],
    max_output_tokens: int = 512,
) -> dict[str, float]:
    """Penalty in [0, 0.5] per candidate parent of one child.

    Parents missing from the reply default to 0.  A reply that stays
    unparseable after the bounded reprompt degrades to all-zero penalties
    for this child (calibration becomes the identity) and is logged.
    """
    if not parent_rows:
        raise ValueError("parent_rows must be non-empty")
    names = [name for name, _, _ in parent_rows]
    req = prompts.penalty_request(
        model_id, root, child,
        [(name, base, feats.as_dict()) for name, base, feats in parent_rows],
        max_output_tokens,
    )
    try:
        parsed = gateway.chat_structured(req, vocabulary=frozenset(names), on_unknown="drop")
    except (ParseError, SchemaError) as exc:
        log.warning("penalty estimation failed for %r (%s); using zero penalties", child, exc)
        parsed = {}
    return {name: parsed.get(name, 0.0) for name in names}


def calibrate(
    gateway: Gateway,
    edges: Sequence[CandidateEdge],
    root: str,
    config: PipelineConfig,
    model_id: str | None = None,
) -> tuple[list[CalibratedEdge], dict[EdgeKey, StructuralFeatures]]:
    """Full calibration pass over a candidate edge set.

    Returns the adjusted edges in canonical order plus the features used,
    which are empty when calibration is disabled.
    """
    model_id = model_id or config.provider.large_model
    filtered = filter_mutual_edges(edges, config.tau_m)
    if not filtered:
        return [], {}
    normalized = normalize_scores(filtered)

    if not config.enable_lscsf:
        return (
            [CalibratedEdge.apply(e.child, e.parent, e.score, 0.0) for e in normalized],
            {},
        )

    features = compute_features(normalized, root, config.delta)
    parent_sets = _parent_sets(normalized)
    children = sorted(parent_sets)

    def _one(child: str) -> dict[str, float]:
        candidates = parent_sets[child]
        order = sorted(candidates, key=lambda name: (-candidates[name], name))
        rows = [(name, candidates[name], features[(child, name)]) for name in order]
        return llm_penalties(
            gateway, model_id, root, child, rows, config.provider.max_output_tokens
        )

    penalty_maps = dict(
        zip(children, map_concurrent(_one, children, gateway.max_in_flight))
    )
    calibrated = [
        CalibratedEdge.apply(
            e.child, e.parent, e.score, penalty_maps[e.child].get(e.parent, 0.0)
        )
        for e in sorted(normalized, key=lambda e: (e.child, e.parent))
    ]
    return calibrated, features
