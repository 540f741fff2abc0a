"""Ancestor-level and edge-level precision/recall/F1 against gold taxonomies."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

from .core import MetricsReport, TaxoweaveError, Taxonomy, validate_taxonomy


class InvalidTaxonomy(TaxoweaveError):
    """A taxonomy handed to evaluation violates its structural invariants."""


class NodeSetMismatch(TaxoweaveError):
    """Predicted and gold taxonomies cover different node sets or roots."""


def ancestor_closure(taxonomy: Taxonomy) -> frozenset[tuple[str, str]]:
    """Transitive closure of the parent relation as (ancestor, descendant) pairs.

    A pair (a, d) is included exactly when a lies on the path from the root
    to d; reflexive pairs are excluded.
    """
    violations = validate_taxonomy(taxonomy)
    if violations:
        raise InvalidTaxonomy("; ".join(violations))
    children: dict[str, list[str]] = defaultdict(list)
    for child, parent in taxonomy.sorted_edges():
        children[parent].append(child)
    pairs: set[tuple[str, str]] = set()
    stack: list[tuple[str, tuple[str, ...]]] = [(taxonomy.root, ())]
    while stack:
        node, ancestors = stack.pop()
        for ancestor in ancestors:
            pairs.add((ancestor, node))
        lineage = ancestors + (node,)
        for child in children.get(node, ()):
            stack.append((child, lineage))
    return frozenset(pairs)


@dataclass(frozen=True)
class MatchCounts:
    """Raw intersection/prediction/gold sizes; the unit pooled by micro averaging."""

    ancestor_hit: int
    ancestor_pred: int
    ancestor_gold: int
    edge_hit: int
    edge_pred: int
    edge_gold: int

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(
            self.ancestor_hit + other.ancestor_hit,
            self.ancestor_pred + other.ancestor_pred,
            self.ancestor_gold + other.ancestor_gold,
            self.edge_hit + other.edge_hit,
            self.edge_pred + other.edge_pred,
            self.edge_gold + other.edge_gold,
        )

    def as_dict(self) -> dict[str, int]:
        return {
            "ancestor_hit": self.ancestor_hit,
            "ancestor_pred": self.ancestor_pred,
            "ancestor_gold": self.ancestor_gold,
            "edge_hit": self.edge_hit,
            "edge_pred": self.edge_pred,
            "edge_gold": self.edge_gold,
        }


def count_matches(pred: Taxonomy, gold: Taxonomy) -> MatchCounts:
    if pred.root != gold.root or pred.nodes != gold.nodes:
        raise NodeSetMismatch(
            "predicted and gold taxonomies must share the same root and node set"
        )
    pred_closure = ancestor_closure(pred)
    gold_closure = ancestor_closure(gold)
    return MatchCounts(
        len(pred_closure & gold_closure),
        len(pred_closure),
        len(gold_closure),
        len(pred.edges & gold.edges),
        len(pred.edges),
        len(gold.edges),
    )


def _ratio(hit: int, size: int, other_size: int) -> float:
    # Both sides empty is vacuous agreement (a single-node taxonomy against
    # itself must score perfectly); an empty side against a non-empty one is 0.
    if size == 0:
        return 1.0 if other_size == 0 else 0.0
    return hit / size


def report_from_counts(counts: MatchCounts) -> MetricsReport:
    return MetricsReport.from_precision_recall(
        _ratio(counts.ancestor_hit, counts.ancestor_pred, counts.ancestor_gold),
        _ratio(counts.ancestor_hit, counts.ancestor_gold, counts.ancestor_pred),
        _ratio(counts.edge_hit, counts.edge_pred, counts.edge_gold),
        _ratio(counts.edge_hit, counts.edge_gold, counts.edge_pred),
    )


def score(pred: Taxonomy, gold: Taxonomy) -> MetricsReport:
    """All six metrics for one predicted taxonomy against its gold tree."""
    return report_from_counts(count_matches(pred, gold))


def micro_average(counts: Sequence[MatchCounts]) -> MetricsReport:
    """Pool raw counts across taxonomies before computing precision/recall/F1."""
    if not counts:
        raise ValueError("micro_average requires at least one count tuple")
    total = counts[0]
    for item in counts[1:]:
        total = total + item
    return report_from_counts(total)
