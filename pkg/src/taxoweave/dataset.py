"""Task file loading, validation, and conversion of external benchmark formats."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .core import (
    DuplicateTerm,
    TaxoweaveError,
    Taxonomy,
    TermRecord,
    normalize_term,
    validate_taxonomy,
)


class TaskParseError(TaxoweaveError):
    """The task file does not match the expected JSON shape."""


class TermMismatch(TaxoweaveError):
    """Gold edges reference terms outside the task's term set."""


class GoldInvalid(TaxoweaveError):
    """The gold edge set is not a valid taxonomy over the task's terms."""


class MultipleRoots(TaxoweaveError):
    """An external edge list does not have exactly one parentless node."""


class CycleInGold(TaxoweaveError):
    """An external edge list contains a directed cycle."""


@dataclass(frozen=True)
class Task:
    """One induction problem: a root concept, its flat term set, optional gold tree."""

    root: str
    root_definition: str | None
    terms: tuple[TermRecord, ...]
    gold: Taxonomy | None

    @property
    def node_names(self) -> tuple[str, ...]:
        return tuple(sorted({self.root} | {record.name for record in self.terms}))


def _clean_name(raw: Any, where: str) -> str:
    if not isinstance(raw, str):
        raise TaskParseError(f"{where}: name must be a string, got {raw!r}")
    name = normalize_term(raw)
    if not name:
        raise TaskParseError(f"{where}: name must be non-empty")
    if "|" in name:
        # '|' is the delimiter of predicted-taxonomy edge score keys.
        raise TaskParseError(f"{where}: name {name!r} must not contain '|'")
    return name


def load_task(path: str | Path) -> Task:
    """Load and validate a task file.

    The gold taxonomy, when present, must cover exactly the task's node set
    and pass full structural validation.
    """
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise TaskParseError(f"task file {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, Mapping):
        raise TaskParseError(f"task file {path} must contain a JSON object")
    if "root" not in obj or "terms" not in obj:
        raise TaskParseError(f"task file {path} must define 'root' and 'terms'")

    root = _clean_name(obj["root"], "root")
    raw_root_def = obj.get("root_definition")
    root_definition = str(raw_root_def).strip() if raw_root_def else None

    if not isinstance(obj["terms"], list):
        raise TaskParseError("'terms' must be a list")
    records: list[TermRecord] = []
    seen = {root}
    for index, item in enumerate(obj["terms"]):
        if not isinstance(item, Mapping) or "name" not in item:
            raise TaskParseError(f"terms[{index}] must be an object with a 'name'")
        name = _clean_name(item["name"], f"terms[{index}]")
        if name in seen:
            raise DuplicateTerm(f"duplicate term {name!r} in task file")
        seen.add(name)
        definition = item.get("definition")
        records.append(TermRecord(name, str(definition).strip() if definition else ""))
    records.sort(key=lambda record: record.name)

    gold: Taxonomy | None = None
    raw_edges = obj.get("gold_edges")
    if raw_edges is not None:
        if not isinstance(raw_edges, list):
            raise TaskParseError("'gold_edges' must be a list of [child, parent] pairs")
        nodes = frozenset(seen)
        edges = set()
        for index, pair in enumerate(raw_edges):
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise TaskParseError(f"gold_edges[{index}] must be a [child, parent] pair")
            child = _clean_name(pair[0], f"gold_edges[{index}]")
            parent = _clean_name(pair[1], f"gold_edges[{index}]")
            for endpoint in (child, parent):
                if endpoint not in nodes:
                    raise TermMismatch(
                        f"gold edge ({child!r}, {parent!r}) references unknown term {endpoint!r}"
                    )
            edges.add((child, parent))
        gold = Taxonomy(root, nodes, frozenset(edges))
        violations = validate_taxonomy(gold)
        if violations:
            raise GoldInvalid("; ".join(violations))
    return Task(root, root_definition, tuple(records), gold)


def task_to_json(task: Task) -> dict[str, Any]:
    return {
        "root": task.root,
        "root_definition": task.root_definition,
        "terms": [
            {"name": record.name, "definition": record.definition or None}
            for record in task.terms
        ],
        "gold_edges": (
            [[child, parent] for child, parent in task.gold.sorted_edges()]
            if task.gold is not None
            else None
        ),
    }


def _read_edge_lines(path: Path) -> list[tuple[str, str]]:
    edges: list[tuple[str, str]] = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TaskParseError(
                f"{path}:{line_no}: expected 'child<TAB>parent', got {line!r}"
            )
        child = _clean_name(parts[0], f"{path}:{line_no}")
        parent = _clean_name(parts[1], f"{path}:{line_no}")
        if child == parent:
            raise CycleInGold(f"{path}:{line_no}: self-loop on {child!r}")
        edges.append((child, parent))
    return edges


def convert_external(
    fmt: str, path: str | Path, terms_path: str | Path | None = None
) -> dict[str, Any]:
    """Convert an external gold file into the canonical task JSON object.

    "edges" expects one 'child<TAB>parent' pair per line; "terms-relations"
    additionally takes a term list file (one name per line) that must be
    covered exactly by the relation file.  The root is inferred as the unique
    node without a parent.
    """
    path = Path(path)
    if fmt == "edges":
        edges = _read_edge_lines(path)
        nodes = {name for pair in edges for name in pair}
    elif fmt == "terms-relations":
        if terms_path is None:
            raise TaskParseError("terms-relations format requires a terms file")
        edges = _read_edge_lines(path)
        nodes = set()
        for line_no, line in enumerate(Path(terms_path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            name = _clean_name(line, f"{terms_path}:{line_no}")
            if name in nodes:
                raise DuplicateTerm(f"duplicate term {name!r} in {terms_path}")
            nodes.add(name)
        for child, parent in edges:
            for endpoint in (child, parent):
                if endpoint not in nodes:
                    raise TermMismatch(
                        f"relation ({child!r}, {parent!r}) references unknown term {endpoint!r}"
                    )
    else:
        raise TaskParseError(f"unknown external format {fmt!r}")

    if not nodes:
        raise TaskParseError(f"{path} contains no edges")
    with_parent = {child for child, _ in edges}
    roots = sorted(node for node in nodes if node not in with_parent)
    if not roots:
        raise CycleInGold(f"{path}: every node has a parent, the edge list contains a cycle")
    if len(roots) > 1:
        raise MultipleRoots(f"{path}: multiple parentless nodes: {', '.join(roots)}")
    root = roots[0]

    gold = Taxonomy(root, frozenset(nodes), frozenset(edges))
    violations = validate_taxonomy(gold)
    if violations:
        if any(v.startswith("cycle") for v in violations):
            raise CycleInGold(f"{path}: " + "; ".join(violations))
        raise GoldInvalid(f"{path}: " + "; ".join(violations))

    return {
        "root": root,
        "root_definition": None,
        "terms": [
            {"name": name, "definition": None} for name in sorted(nodes) if name != root
        ],
        "gold_edges": [[child, parent] for child, parent in sorted(set(edges))],
    }


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture file, e.g. 'wordnet_sample/task.json'."""
    base = Path(__file__).resolve().parent / "fixtures"
    path = base / name
    if not path.exists():
        raise FileNotFoundError(f"no bundled fixture {name!r} under {base}")
    return path
