"""Maximum spanning arborescence over calibrated candidate edges.

Greedy best-incoming selection with cycle contraction, the classic
recursive scheme.  Ties are broken by the canonical order of the original
(parent, child) pair, which makes the result independent of input arc
order and stable across platforms.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable

from .core import TaxoweaveError, Taxonomy

FALLBACK_WEIGHT = 1e-4


class Infeasible(TaxoweaveError):
    """No spanning arborescence exists for the requested root."""


@dataclass(frozen=True)
class WeightedDigraph:
    """Candidate graph for assembly.

    Arcs are stored as (child, parent, weight) in hypernym orientation; the
    solver treats each one as a parent-to-child arc of that weight.
    """

    nodes: frozenset[str]
    arcs: tuple[tuple[str, str, float], ...]

    def __post_init__(self) -> None:
        for child, parent, weight in self.arcs:
            if child == parent:
                raise ValueError(f"self-loop arc on {child!r}")
            if child not in self.nodes or parent not in self.nodes:
                raise ValueError(f"arc ({child!r}, {parent!r}) references unknown node")
            if not (weight == weight and abs(weight) != float("inf")):
                raise ValueError(f"non-finite weight on ({child!r}, {parent!r})")

    @classmethod
    def build(
        cls, nodes: Iterable[str], arcs: Iterable[tuple[str, str, float]]
    ) -> "WeightedDigraph":
        """Normalize arcs: duplicates of a (child, parent) pair keep the max weight."""
        best: dict[tuple[str, str], float] = {}
        for child, parent, weight in arcs:
            key = (child, parent)
            if key not in best or weight > best[key]:
                best[key] = float(weight)
        ordered = tuple(
            (child, parent, best[(child, parent)]) for child, parent in sorted(best)
        )
        return cls(frozenset(nodes), ordered)


def unreachable_nodes(graph: WeightedDigraph, root: str) -> list[str]:
    """Nodes with no path from the root through the parent-to-child arcs."""
    if root not in graph.nodes:
        raise ValueError(f"root {root!r} is not a node of the graph")
    children_of: dict[str, list[str]] = {}
    for child, parent, _ in graph.arcs:
        children_of.setdefault(parent, []).append(child)
    reachable = {root}
    queue = deque([root])
    while queue:
        node = queue.popleft()
        for nxt in children_of.get(node, ()):
            if nxt not in reachable:
                reachable.add(nxt)
                queue.append(nxt)
    return sorted(graph.nodes - reachable)


def ensure_attachable(graph: WeightedDigraph, root: str) -> WeightedDigraph:
    """Guarantee that an arborescence rooted at `root` exists.

    Every node not reachable from the root through the parent-to-child arcs
    gains a fallback arc from the root whose weight is far below any real
    evidence, so repairs never displace scored edges.
    """
    missing = unreachable_nodes(graph, root)
    if not missing:
        return graph
    repaired = list(graph.arcs) + [(node, root, FALLBACK_WEIGHT) for node in missing]
    return WeightedDigraph.build(graph.nodes, repaired)


@dataclass(frozen=True)
class _Arc:
    parent: str
    child: str
    weight: float
    origin: tuple[str, str]


def max_arborescence(graph: WeightedDigraph, root: str) -> Taxonomy:
    """Spanning arborescence rooted at `root` with maximum total weight.

    Arcs into the root are ignored.  Raises Infeasible when some node cannot
    be spanned; run ensure_attachable first to guarantee feasibility.
    """
    missing = unreachable_nodes(graph, root)
    if missing:
        raise Infeasible(f"nodes not reachable from the root: {', '.join(missing)}")
    arcs = [
        _Arc(parent, child, weight, (parent, child))
        for child, parent, weight in graph.arcs
        if child != root
    ]
    chosen = _solve(frozenset(graph.nodes), arcs, root)
    edges = frozenset((child, parent) for parent, child in chosen)
    return Taxonomy(root, frozenset(graph.nodes), edges)


def arborescence_weight(graph: WeightedDigraph, taxonomy: Taxonomy) -> float:
    """Total weight of a taxonomy's edges under the graph's arc weights."""
    import math

    weights = {(child, parent): weight for child, parent, weight in graph.arcs}
    return math.fsum(sorted(weights[edge] for edge in taxonomy.edges))


def _best_incoming(nodes: frozenset[str], arcs: list[_Arc], root: str) -> dict[str, _Arc]:
    best: dict[str, _Arc] = {}
    # Canonical scan order makes tie-breaking (first strictly-better wins)
    # independent of input arc order.
    for arc in sorted(arcs, key=lambda a: a.origin):
        if arc.child == root or arc.parent == arc.child:
            continue
        current = best.get(arc.child)
        if current is None or arc.weight > current.weight:
            best[arc.child] = arc
    for node in sorted(nodes):
        if node != root and node not in best:
            raise Infeasible(f"node {node!r} has no incoming arc")
    return best


def _find_cycle(best: dict[str, _Arc], root: str) -> list[str] | None:
    state: dict[str, str] = {}
    for start in sorted(best):
        if state.get(start) == "done":
            continue
        path: list[str] = []
        node = start
        while True:
            if node == root or state.get(node) == "done":
                break
            if state.get(node) == "active":
                return path[path.index(node):]
            state[node] = "active"
            path.append(node)
            arc = best.get(node)
            if arc is None:
                break
            node = arc.parent
        for visited in path:
            state[visited] = "done"
    return None


def _fresh_id(nodes: frozenset[str]) -> str:
    index = 0
    while True:
        token = f"\x00cycle{index}"
        if token not in nodes:
            return token
        index += 1


def _solve(nodes: frozenset[str], arcs: list[_Arc], root: str) -> set[tuple[str, str]]:
    best = _best_incoming(nodes, arcs, root)
    cycle = _find_cycle(best, root)
    if cycle is None:
        return {arc.origin for arc in best.values()}

    cycle_set = set(cycle)
    cycle_arc = {node: best[node] for node in cycle}
    super_id = _fresh_id(nodes)

    contracted: list[_Arc] = []
    entering: dict[tuple[str, str], _Arc] = {}
    for arc in arcs:
        parent_in = arc.parent in cycle_set
        child_in = arc.child in cycle_set
        if parent_in and child_in:
            continue
        if child_in:
            # Entering the cycle displaces that node's cycle arc; the net
            # gain is the weight difference.
            adjusted = arc.weight - cycle_arc[arc.child].weight
            contracted.append(_Arc(arc.parent, super_id, adjusted, arc.origin))
            entering[arc.origin] = arc
        elif parent_in:
            contracted.append(_Arc(super_id, arc.child, arc.weight, arc.origin))
        else:
            contracted.append(arc)

    sub_nodes = frozenset(nodes - cycle_set) | {super_id}
    chosen = set(_solve(sub_nodes, contracted, root))

    enter_origins = [origin for origin in sorted(chosen) if origin in entering]
    assert len(enter_origins) == 1, "exactly one arc must enter the contracted cycle"
    displaced = entering[enter_origins[0]].child
    for node in cycle:
        if node != displaced:
            chosen.add(cycle_arc[node].origin)
    return chosen
