"""Retrieval-augmented definition acquisition and LLM refinement.

Raw definitions come from an encyclopedia source (live Wikipedia or an
offline snapshot); the large model then rewrites each one into a concise
definition grounded in the root topic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, MutableMapping

import requests

from . import prompts
from .core import ConfigError, canonical_order
from .gateway import Gateway, TransportError, map_concurrent

log = logging.getLogger(__name__)

SOURCE_KINDS = ("live_encyclopedia", "offline_snapshot", "none")
WIKIPEDIA_API = "https://en.wikipedia.org/w/api.php"

MAX_REFINED_WORDS = 60
# Hard safety net applied after parsing, independent of prompt compliance.
HARD_CAP_WORDS = 100


@dataclass(frozen=True)
class DefinitionSource:
    kind: str
    cache_path: Path | None = None

    def __post_init__(self) -> None:
        if self.kind not in SOURCE_KINDS:
            raise ConfigError(f"unknown definition source kind {self.kind!r}")
        if self.kind == "offline_snapshot" and self.cache_path is None:
            raise ConfigError("offline_snapshot source requires a snapshot path")


@dataclass(frozen=True)
class DefinitionEntry:
    """Raw retrieved text (absent when no entry exists) plus the refined definition."""

    raw: str | None
    refined: str


def source_from_spec(spec: str) -> DefinitionSource:
    if spec == "live":
        return DefinitionSource("live_encyclopedia")
    if spec.startswith("snapshot:"):
        return DefinitionSource("offline_snapshot", Path(spec.split(":", 1)[1]))
    if spec == "none":
        return DefinitionSource("none")
    raise ConfigError(f"unknown definitions mode {spec!r}")


@lru_cache(maxsize=8)
def _load_snapshot(path_str: str) -> Mapping[str, str]:
    path = Path(path_str)
    if not path.exists():
        raise ConfigError(f"definition snapshot not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ConfigError(f"definition snapshot is not valid JSON: {path}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"definition snapshot must be a JSON object: {path}")
    return {str(k): str(v) for k, v in data.items()}


def snapshot_lookup(term: str, snapshot: Mapping[str, str]) -> str | None:
    """Exact title first, then case-insensitive; absent entries return None."""
    if term in snapshot:
        return snapshot[term]
    folded = term.casefold()
    matches = [title for title in snapshot if title.casefold() == folded]
    if matches:
        return snapshot[canonical_order(matches)[0]]
    return None


def _wiki_page_extract(
    title: str, session: requests.Session, api_base: str
) -> str | None:
    params = {
        "action": "query",
        "format": "json",
        "prop": "extracts|pageprops",
        "ppprop": "disambiguation",
        "exintro": 1,
        "explaintext": 1,
        "redirects": 1,
        "titles": title,
    }
    try:
        resp = session.get(api_base, params=params, timeout=30)
        resp.raise_for_status()
        pages = resp.json().get("query", {}).get("pages", {})
    except requests.RequestException as exc:
        raise TransportError(f"encyclopedia lookup failed for {title!r}: {exc}") from exc
    except ValueError as exc:
        raise TransportError(f"malformed encyclopedia response for {title!r}") from exc
    for page in pages.values():
        if "missing" in page:
            return None
        if "pageprops" in page and "disambiguation" in page["pageprops"]:
            # Disambiguation pages carry no usable sense; the refiner decides.
            return None
        extract = page.get("extract", "").strip()
        return extract or None
    return None


def _wiki_search_title(
    term: str, session: requests.Session, api_base: str
) -> str | None:
    params = {
        "action": "query",
        "format": "json",
        "list": "search",
        "srsearch": term,
        "srlimit": 1,
    }
    try:
        resp = session.get(api_base, params=params, timeout=30)
        resp.raise_for_status()
        hits = resp.json().get("query", {}).get("search", [])
    except requests.RequestException as exc:
        raise TransportError(f"encyclopedia search failed for {term!r}: {exc}") from exc
    except ValueError as exc:
        raise TransportError(f"malformed encyclopedia search reply for {term!r}") from exc
    if hits:
        return hits[0].get("title")
    return None


def retrieve_definition(
    term: str,
    source: DefinitionSource,
    cache: MutableMapping[str, str | None] | None = None,
    session: requests.Session | None = None,
    api_base: str = WIKIPEDIA_API,
) -> str | None:
    """Lead summary for the best lexical match, or None when no entry exists."""
    if cache is not None and term in cache:
        return cache[term]
    result: str | None
    if source.kind == "none":
        result = None
    elif source.kind == "offline_snapshot":
        result = snapshot_lookup(term, _load_snapshot(str(source.cache_path)))
    else:
        http = session or requests.Session()
        result = _wiki_page_extract(term, http, api_base)
        if result is None:
            title = _wiki_search_title(term, http, api_base)
            if title and title != term:
                result = _wiki_page_extract(title, http, api_base)
    if cache is not None:
        cache[term] = result
    return result


def refine_definition(
    gateway: Gateway,
    model_id: str,
    term: str,
    raw: str | None,
    root: str,
    root_definition: str,
    max_words: int = MAX_REFINED_WORDS,
    max_output_tokens: int = 512,
) -> str:
    """Rewrite a (possibly absent) raw definition into a concise, grounded one."""
    if not root:
        raise ValueError("root must be non-empty")
    req = prompts.refine_request(
        model_id, term, raw or "", root, root_definition, max_words, max_output_tokens
    )
    definition = gateway.chat_structured(req)
    definition = " ".join(definition.split())
    words = definition.split(" ")
    if len(words) > HARD_CAP_WORDS:
        definition = " ".join(words[:HARD_CAP_WORDS])
    return definition


def definitions_stage(
    gateway: Gateway,
    task,
    mode_spec: str,
    model_id: str,
    max_output_tokens: int = 512,
) -> dict[str, DefinitionEntry]:
    """Produce a non-empty definition for every node, including the root.

    mode_spec is "skip" (use task definitions verbatim), "live",
    "snapshot:<path>", or "none" (no retrieval, refine from task text alone).
    A term with no usable text at all falls back to its own name so that the
    downstream embedding text is never empty.
    """
    entries: dict[str, DefinitionEntry] = {}
    if mode_spec == "skip":
        for record in task.terms:
            entries[record.name] = DefinitionEntry(None, record.definition or record.name)
        entries[task.root] = DefinitionEntry(None, task.root_definition or task.root)
        return entries

    source = source_from_spec(mode_spec)
    cache: dict[str, str | None] = {}

    if task.root_definition:
        root_raw: str | None = None
        root_def = task.root_definition
    else:
        root_raw = retrieve_definition(task.root, source, cache)
        root_def = refine_definition(
            gateway, model_id, task.root, root_raw, task.root,
            root_raw or task.root, max_output_tokens=max_output_tokens,
        )
    entries[task.root] = DefinitionEntry(root_raw, root_def)

    def _one(record) -> tuple[str, DefinitionEntry]:
        raw = retrieve_definition(record.name, source, cache)
        current = raw if raw is not None else (record.definition or "")
        refined = refine_definition(
            gateway, model_id, record.name, current, task.root, root_def,
            max_output_tokens=max_output_tokens,
        )
        return record.name, DefinitionEntry(raw, refined)

    ordered = sorted(task.terms, key=lambda record: record.name)
    results = map_concurrent(_one, ordered, gateway.max_in_flight)
    entries.update(dict(results))
    return entries


def save_definition_cache(entries: Mapping[str, DefinitionEntry], path: Path) -> None:
    payload = {
        name: {"raw": entry.raw, "refined": entry.refined}
        for name, entry in sorted(entries.items())
    }
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def load_definition_cache(path: Path) -> dict[str, DefinitionEntry]:
    data = json.loads(path.read_text(encoding="utf-8"))
    out: dict[str, DefinitionEntry] = {}
    for name, item in data.items():
        raw = item.get("raw")
        out[str(name)] = DefinitionEntry(
            str(raw) if raw is not None else None, str(item["refined"])
        )
    return out
