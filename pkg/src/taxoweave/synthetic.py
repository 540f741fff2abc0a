"""Deterministic offline backends for fixtures and tests.

`GoldOracleBackend` answers every pipeline request from a task's gold tree:
is-a judgments affirm exactly the gold parent, ranking puts the gold parent
on top with a fixed high confidence, penalties are zero, and embeddings are
hash-seeded unit vectors.  Recording a run against it produces a transcript
that replays the pipeline offline and reconstructs the gold tree exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Sequence

import numpy as np

from .dataset import Task
from .gateway import ChatRequest


def hash_unit_vector(model: str, text: str, dim: int = 32) -> list[float]:
    """Unit vector drawn from an RNG seeded by the (model, text) pair."""
    seed_bytes = hashlib.sha256(f"{model}\x00{text}".encode("utf-8")).digest()
    seed = int.from_bytes(seed_bytes[:8], "big")
    rng = np.random.default_rng(seed)
    vec = rng.standard_normal(dim)
    norm = math.sqrt(math.fsum(float(x) * float(x) for x in vec))
    return [float(x) / norm for x in vec]


class GoldOracleBackend:
    """Backend double that answers requests from a task's gold taxonomy."""

    def __init__(
        self,
        task: Task,
        top_score: float = 0.95,
        noise_start: float = 0.45,
        noise_step: float = 0.03,
        noise_floor: float = 0.05,
        embed_dim: int = 32,
    ):
        if task.gold is None:
            raise ValueError("GoldOracleBackend requires a task with gold edges")
        self._parent = task.gold.parent_map()
        self._definitions = {record.name: record.definition for record in task.terms}
        self._definitions[task.root] = task.root_definition or task.root
        self._root = task.root
        self._top_score = top_score
        self._noise_start = noise_start
        self._noise_step = noise_step
        self._noise_floor = noise_floor
        self._embed_dim = embed_dim

    def complete(self, req: ChatRequest) -> str:
        tag = req.response_schema_tag
        meta = req.meta
        if tag == "refine_definition":
            term = meta["term"]
            definition = self._definitions.get(term) or f"{term}, a concept under {self._root}."
            return json.dumps({"definition": definition})
        if tag == "isa_judgment":
            answer = "yes" if self._parent.get(meta["query"]) == meta["anchor"] else "no"
            return json.dumps({"answer": answer})
        if tag == "rank_and_score":
            child = meta["child"]
            candidates = list(meta["candidates"])
            k2 = int(meta["k2"])
            gold_parent = self._parent.get(child)
            entries: list[dict[str, float | str]] = []
            if gold_parent in candidates:
                entries.append({"parent": gold_parent, "score": self._top_score})
            noise_rank = 0
            for name in candidates:
                if len(entries) >= k2:
                    break
                if name == gold_parent:
                    continue
                score = max(
                    self._noise_floor, self._noise_start - self._noise_step * noise_rank
                )
                entries.append({"parent": name, "score": round(score, 4)})
                noise_rank += 1
            return json.dumps({"parents": entries})
        if tag == "penalty":
            return json.dumps(
                {"penalties": [{"parent": name, "penalty": 0.0} for name in meta["parents"]]}
            )
        raise ValueError(f"unexpected schema tag {tag!r}")

    def embed_batch(self, model: str, texts: Sequence[str]) -> list[list[float]]:
        return [hash_unit_vector(model, text, self._embed_dim) for text in texts]
