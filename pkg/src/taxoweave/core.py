"""Shared domain types, deterministic ordering rules, and taxonomy validation."""

from __future__ import annotations

import hashlib
import json
import math
import unicodedata
from collections import defaultdict, deque
from dataclasses import dataclass, field, fields
from typing import Any, Iterable, Mapping, Sequence

EMBEDDING_NORM_TOL = 1e-6
F1_IDENTITY_TOL = 1e-9

DEFAULT_TEMPLATES: tuple[str, ...] = (
    "<query> is a/an <anchor>",
    "<query> is a kind of <anchor>",
    "<query> is a type of <anchor>",
    "<query> is an example of <anchor>",
    "<anchor> such as <query>",
)

EDGE_STAGES = ("selected", "ranked", "calibrated")

MUTUALITY_MODES = ("reciprocal-prune", "off")


class TaxoweaveError(Exception):
    """Base class for all package errors."""


class DuplicateTerm(TaxoweaveError):
    """A term name occurs more than once within one input."""


class ConfigError(TaxoweaveError):
    """A configuration value violates its invariants."""


def normalize_term(name: str) -> str:
    """Normalize a term name: Unicode NFC plus surrounding-whitespace trim."""
    return unicodedata.normalize("NFC", name).strip()


def canonical_order(
    terms: Iterable[str], scores: Mapping[str, float] | None = None
) -> list[str]:
    """Deterministic total order over term names.

    Sorts by descending score (terms without a score count as 0) and breaks
    ties lexicographically.  Duplicate names are a hard error because every
    downstream stage assumes names identify terms uniquely.
    """
    names = list(terms)
    seen: set[str] = set()
    for name in names:
        if name in seen:
            raise DuplicateTerm(f"duplicate term {name!r}")
        seen.add(name)
    if scores is None:
        return sorted(names)
    return sorted(names, key=lambda n: (-float(scores.get(n, 0.0)), n))


def canonical_json(value: Any) -> str:
    """Compact JSON with sorted keys, the basis for all content digests."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def stable_digest(value: Any) -> str:
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    with open(path, "rb") as handle:
        return hashlib.sha256(handle.read()).hexdigest()


@dataclass(frozen=True)
class TermRecord:
    """A term, its definition text, and (optionally) its unit embedding."""

    name: str
    definition: str = ""
    embedding: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        normalized = normalize_term(self.name)
        if not normalized:
            raise ValueError("term name must be non-empty after trimming")
        object.__setattr__(self, "name", normalized)
        if self.embedding is not None:
            vec = tuple(float(x) for x in self.embedding)
            norm = math.sqrt(math.fsum(x * x for x in vec))
            if abs(norm - 1.0) > EMBEDDING_NORM_TOL:
                raise ValueError(f"embedding of {normalized!r} is not unit norm ({norm})")
            object.__setattr__(self, "embedding", vec)

    def embedding_text(self) -> str:
        """Text fed to the embedding model: the name prefixed to the definition."""
        return f"{self.name}: {self.definition}"


@dataclass(frozen=True)
class Taxonomy:
    """A rooted hierarchy: a set of nodes plus directed (child, parent) edges."""

    root: str
    nodes: frozenset[str]
    edges: frozenset[tuple[str, str]]

    @classmethod
    def from_edges(cls, root: str, edges: Iterable[tuple[str, str]]) -> "Taxonomy":
        edge_set = frozenset((child, parent) for child, parent in edges)
        nodes = {root}
        for child, parent in edge_set:
            nodes.add(child)
            nodes.add(parent)
        return cls(root, frozenset(nodes), edge_set)

    def sorted_edges(self) -> list[tuple[str, str]]:
        return sorted(self.edges)

    def parent_map(self) -> dict[str, str]:
        """Child-to-parent mapping; assumes at most one parent per child."""
        return {child: parent for child, parent in self.sorted_edges()}

    def child_map(self) -> dict[str, list[str]]:
        children: dict[str, list[str]] = defaultdict(list)
        for child, parent in self.sorted_edges():
            children[parent].append(child)
        return dict(children)


def validate_taxonomy(taxonomy: Taxonomy) -> list[str]:
    """Check every structural invariant of a final taxonomy.

    Returns human-readable violations, one per broken rule, each naming the
    offending node or edge.  An empty list means the taxonomy is a valid
    arborescence: single root, one parent per non-root node, acyclic, and
    fully connected to the root.
    """
    violations: list[str] = []
    if taxonomy.root not in taxonomy.nodes:
        violations.append(f"root: root {taxonomy.root!r} is not a member of nodes")

    parents: dict[str, list[str]] = defaultdict(list)
    for child, parent in taxonomy.sorted_edges():
        if child == parent:
            violations.append(f"self-loop: edge ({child!r}, {parent!r})")
            continue
        for endpoint in (child, parent):
            if endpoint not in taxonomy.nodes:
                violations.append(
                    f"unknown-node: edge ({child!r}, {parent!r}) references {endpoint!r}"
                )
        if child == taxonomy.root:
            violations.append(f"root-parent: root {taxonomy.root!r} has parent {parent!r}")
        parents[child].append(parent)

    for node in sorted(taxonomy.nodes):
        if node == taxonomy.root:
            continue
        count = len(parents.get(node, ()))
        if count == 0:
            violations.append(f"missing-parent: node {node!r} has no parent")
        elif count > 1:
            violations.append(f"multiple-parents: node {node!r} has {count} parents")

    violations.extend(_find_cycles(taxonomy, parents))

    children: dict[str, list[str]] = defaultdict(list)
    for child, parent in taxonomy.edges:
        if child != parent:
            children[parent].append(child)
    reachable: set[str] = set()
    if taxonomy.root in taxonomy.nodes:
        reachable.add(taxonomy.root)
        queue = deque([taxonomy.root])
        while queue:
            node = queue.popleft()
            for child in sorted(children.get(node, ())):
                if child not in reachable:
                    reachable.add(child)
                    queue.append(child)
    for node in sorted(taxonomy.nodes - reachable):
        if node != taxonomy.root:
            violations.append(f"connectivity: node {node!r} is not reachable from the root")
    return violations


def _find_cycles(taxonomy: Taxonomy, parents: Mapping[str, list[str]]) -> list[str]:
    adjacency = {
        node: sorted(p for p in parents.get(node, ()) if p in taxonomy.nodes)
        for node in sorted(taxonomy.nodes)
    }
    violations: list[str] = []
    color: dict[str, int] = dict.fromkeys(taxonomy.nodes, 0)
    for start in sorted(taxonomy.nodes):
        if color[start] != 0:
            continue
        path = [start]
        stack = [(start, iter(adjacency.get(start, ())))]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                color[node] = 2
                continue
            if color.get(nxt, 2) == 1:
                idx = path.index(nxt)
                violations.append("cycle: " + " -> ".join(path[idx:] + [nxt]))
            elif color.get(nxt, 2) == 0:
                color[nxt] = 1
                path.append(nxt)
                stack.append((nxt, iter(adjacency.get(nxt, ()))))
    return violations


def taxonomy_to_json(
    taxonomy: Taxonomy, edge_scores: Mapping[tuple[str, str], float] | None = None
) -> dict[str, Any]:
    """Predicted-taxonomy wire format; edge score keys join child and parent with '|'."""
    scores = edge_scores or {}
    return {
        "root": taxonomy.root,
        "edges": [[child, parent] for child, parent in taxonomy.sorted_edges()],
        "edge_scores": {
            f"{child}|{parent}": float(scores[(child, parent)])
            for child, parent in taxonomy.sorted_edges()
            if (child, parent) in scores
        },
    }


def taxonomy_from_json(obj: Mapping[str, Any]) -> tuple[Taxonomy, dict[tuple[str, str], float]]:
    if not isinstance(obj, Mapping) or "root" not in obj or "edges" not in obj:
        raise ValueError("taxonomy JSON must contain 'root' and 'edges'")
    root = str(obj["root"])
    edges = []
    for item in obj["edges"]:
        if not isinstance(item, Sequence) or len(item) != 2:
            raise ValueError(f"malformed edge entry: {item!r}")
        edges.append((str(item[0]), str(item[1])))
    scores: dict[tuple[str, str], float] = {}
    for key, value in (obj.get("edge_scores") or {}).items():
        child, sep, parent = str(key).partition("|")
        if not sep:
            raise ValueError(f"malformed edge score key: {key!r}")
        scores[(child, parent)] = float(value)
    return Taxonomy.from_edges(root, edges), scores


@dataclass(frozen=True)
class CandidateEdge:
    """A directed child-to-parent hypothesis with a score in [0, 1]."""

    child: str
    parent: str
    score: float
    stage: str

    def __post_init__(self) -> None:
        if self.child == self.parent:
            raise ValueError(f"candidate edge may not be a self-loop: {self.child!r}")
        if self.stage not in EDGE_STAGES:
            raise ValueError(f"unknown edge stage {self.stage!r}")
        value = float(self.score)
        if not math.isfinite(value) or not 0.0 <= value <= 1.0:
            raise ValueError(f"edge score out of range: {value}")
        object.__setattr__(self, "score", value)


def _harmonic(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class MetricsReport:
    """Ancestor and edge precision/recall/F1, all fractions in [0, 1]."""

    ancestor_precision: float
    ancestor_recall: float
    ancestor_f1: float
    edge_precision: float
    edge_recall: float
    edge_f1: float

    def __post_init__(self) -> None:
        for spec in fields(self):
            value = float(getattr(self, spec.name))
            if not math.isfinite(value) or not 0.0 <= value <= 1.0:
                raise ValueError(f"{spec.name} out of range: {value}")
            object.__setattr__(self, spec.name, value)
        pairs = (
            (self.ancestor_precision, self.ancestor_recall, self.ancestor_f1),
            (self.edge_precision, self.edge_recall, self.edge_f1),
        )
        for precision, recall, f1 in pairs:
            if abs(f1 - _harmonic(precision, recall)) > F1_IDENTITY_TOL:
                raise ValueError("F1 must be the harmonic mean of precision and recall")

    @classmethod
    def from_precision_recall(
        cls, ancestor_precision: float, ancestor_recall: float,
        edge_precision: float, edge_recall: float,
    ) -> "MetricsReport":
        return cls(
            ancestor_precision,
            ancestor_recall,
            _harmonic(ancestor_precision, ancestor_recall),
            edge_precision,
            edge_recall,
            _harmonic(edge_precision, edge_recall),
        )

    def as_percentages(self) -> dict[str, float]:
        """Report values as percentages rounded to two decimals."""
        return {
            spec.name: round(getattr(self, spec.name) * 100.0, 2) for spec in fields(self)
        }


@dataclass(frozen=True)
class ProviderConfig:
    """Endpoints, model identifiers, and transport tuning for the LLM gateway."""

    chat_endpoint: str = "http://localhost:8000/v1/chat/completions"
    embed_endpoint: str = "http://localhost:8000/v1/embeddings"
    large_model: str = "gpt-4o"
    small_model: str = "qwen3-4b"
    embed_model: str = "all-mpnet-base-v2"
    api_key_env: str = "TAXOWEAVE_API_KEY"
    max_in_flight: int = 4
    max_retries: int = 3
    backoff_base: float = 0.5
    request_timeout: float = 60.0
    max_output_tokens: int = 512
    embed_batch_size: int = 64

    def to_json(self) -> dict[str, Any]:
        return {spec.name: getattr(self, spec.name) for spec in fields(self)}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ProviderConfig":
        known = {spec.name for spec in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown provider config keys: {sorted(unknown)}")
        return cls(**dict(obj))


@dataclass(frozen=True)
class PipelineConfig:
    """All pipeline tunables; a single value of this type defines a run."""

    k_isa: int = 10
    k_def: int = 5
    k1: int | None = None
    k2: int = 3
    delta: float = 0.05
    tau_m: float = 0.05
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    enable_hpcs: bool = True
    enable_lscsf: bool = True
    mutuality: str = "reciprocal-prune"
    seed: int = 0
    provider: ProviderConfig = field(default_factory=ProviderConfig)

    def resolved_k1(self) -> int:
        return self.k1 if self.k1 is not None else self.k_isa + self.k_def

    def validate(self) -> None:
        for name in ("k_isa", "k_def", "k2"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.resolved_k1() < 1:
            raise ConfigError("k1 must be a positive integer")
        if self.k2 > self.resolved_k1():
            raise ConfigError(f"k2 ({self.k2}) must not exceed k1 ({self.resolved_k1()})")
        for name in ("delta", "tau_m"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0.0:
                raise ConfigError(f"{name} must be finite and non-negative")
        if not self.templates:
            raise ConfigError("template set must be non-empty")
        for pattern in self.templates:
            if pattern.count("<query>") != 1 or pattern.count("<anchor>") != 1:
                raise ConfigError(
                    f"template {pattern!r} must contain <query> and <anchor> exactly once"
                )
        if self.mutuality not in MUTUALITY_MODES:
            raise ConfigError(f"mutuality must be one of {MUTUALITY_MODES}")

    def to_json(self) -> dict[str, Any]:
        return {
            "k_isa": self.k_isa,
            "k_def": self.k_def,
            "k1": self.resolved_k1(),
            "k2": self.k2,
            "delta": self.delta,
            "tau_m": self.tau_m,
            "templates": list(self.templates),
            "enable_hpcs": self.enable_hpcs,
            "enable_lscsf": self.enable_lscsf,
            "mutuality": self.mutuality,
            "seed": self.seed,
            "provider": self.provider.to_json(),
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "PipelineConfig":
        known = {spec.name for spec in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(obj)
        if "templates" in data:
            data["templates"] = tuple(str(t) for t in data["templates"])
        if "provider" in data:
            data["provider"] = ProviderConfig.from_json(data["provider"])
        config = cls(**data)
        config.validate()
        return config
