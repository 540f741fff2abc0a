"""End-to-end induction runs: stage orchestration, artifacts, manifest, resume.

Every stage writes one artifact with a stable name under the run's output
directory.  The manifest contains only deterministic content (wall-clock
timings live in a sidecar file), so two replay runs with the same task,
transcript, and seed produce byte-identical manifests and predictions.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import __version__
from .arborescence import (
    FALLBACK_WEIGHT,
    WeightedDigraph,
    ensure_attachable,
    max_arborescence,
)
from .calibration import CalibratedEdge, StructuralFeatures, calibrate
from .core import (
    MetricsReport,
    PipelineConfig,
    Taxonomy,
    canonical_json,
    file_digest,
    stable_digest,
    taxonomy_to_json,
)
from .dataset import Task, load_task
from .definitions import (
    DefinitionEntry,
    definitions_stage,
    load_definition_cache,
    save_definition_cache,
)
from .evaluation import MatchCounts, count_matches, micro_average, report_from_counts
from .gateway import Backend, Gateway, HttpBackend, Transcript, map_concurrent
from .ranking import RankedParentSet, rank_all, ranked_edges
from .selection import CandidateInfo, select_candidates

log = logging.getLogger(__name__)

# Bumped whenever canonical prompt wording changes; part of every stage digest.
PROMPT_REVISION = 1

DEFINITIONS_FILE = "definitions.json"
CANDIDATES_FILE = "candidates.jsonl"
RANKED_FILE = "ranked.jsonl"
CALIBRATED_FILE = "calibrated.jsonl"
PREDICTED_FILE = "predicted.json"
METRICS_FILE = "metrics.json"
MANIFEST_FILE = "manifest.json"
TIMINGS_FILE = "timings.json"
MICRO_METRICS_FILE = "metrics_micro.json"


@dataclass
class RunResult:
    task: Task
    taxonomy: Taxonomy
    edge_scores: dict[tuple[str, str], float]
    report: MetricsReport | None
    counts: MatchCounts | None
    out_dir: Path
    manifest: dict[str, Any]


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(
        json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _write_jsonl(path: Path, rows: Sequence[Mapping[str, Any]]) -> None:
    lines = [canonical_json(row) for row in rows]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _read_jsonl(path: Path) -> list[dict[str, Any]]:
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def _dump_candidates(candidates: Mapping[str, Sequence[CandidateInfo]], path: Path) -> None:
    rows = [
        {
            "child": child,
            "candidates": [
                {"parent": info.parent, "isa_score": info.isa_score, "def_sim": info.def_sim}
                for info in candidates[child]
            ],
        }
        for child in sorted(candidates)
    ]
    _write_jsonl(path, rows)


def _load_candidates(path: Path) -> dict[str, list[CandidateInfo]]:
    out: dict[str, list[CandidateInfo]] = {}
    for row in _read_jsonl(path):
        out[row["child"]] = [
            CandidateInfo(item["parent"], item.get("isa_score"), item.get("def_sim"))
            for item in row["candidates"]
        ]
    return out


def _dump_ranked(ranked: Mapping[str, RankedParentSet], path: Path) -> None:
    rows = [
        {
            "child": child,
            "ranked": [
                {"parent": parent, "score": score}
                for parent, score in ranked[child].parents
            ],
        }
        for child in sorted(ranked)
    ]
    _write_jsonl(path, rows)


def _load_ranked(path: Path) -> dict[str, RankedParentSet]:
    out: dict[str, RankedParentSet] = {}
    for row in _read_jsonl(path):
        out[row["child"]] = RankedParentSet(
            row["child"],
            tuple((item["parent"], float(item["score"])) for item in row["ranked"]),
        )
    return out


def _dump_calibrated(
    value: tuple[list[CalibratedEdge], Mapping[tuple[str, str], StructuralFeatures]],
    path: Path,
) -> None:
    edges, features = value
    rows = []
    for edge in edges:
        feats = features.get((edge.child, edge.parent))
        rows.append(
            {
                "child": edge.child,
                "parent": edge.parent,
                "base_score": edge.base_score,
                "features": feats.as_dict() if feats is not None else None,
                "penalty": edge.penalty,
                "final_score": edge.final_score,
            }
        )
    _write_jsonl(path, rows)


def _load_calibrated(
    path: Path,
) -> tuple[list[CalibratedEdge], dict[tuple[str, str], StructuralFeatures]]:
    edges: list[CalibratedEdge] = []
    features: dict[tuple[str, str], StructuralFeatures] = {}
    for row in _read_jsonl(path):
        edge = CalibratedEdge(
            row["child"], row["parent"], float(row["base_score"]),
            float(row["penalty"]), float(row["final_score"]),
        )
        edges.append(edge)
        if row.get("features"):
            features[(edge.child, edge.parent)] = StructuralFeatures(**row["features"])
    return edges, features


class _StageRunner:
    """Runs stages, skipping ones whose inputs match a previous run's manifest."""

    def __init__(self, out_dir: Path, resume: bool, previous: Mapping[str, Any] | None):
        self.out_dir = out_dir
        self._previous = (previous or {}).get("stages", {}) if resume else {}
        self.meta: dict[str, dict[str, str]] = {}
        self.resumed: dict[str, bool] = {}
        self.timings: dict[str, float] = {}

    def run(
        self,
        name: str,
        digest_parts: Any,
        artifact: str,
        compute: Callable[[], Any],
        dump: Callable[[Any, Path], None],
        load: Callable[[Path], Any],
    ) -> Any:
        input_digest = stable_digest(digest_parts)
        path = self.out_dir / artifact
        self.meta[name] = {"digest": input_digest, "artifact": artifact}
        previous = self._previous.get(name)
        if previous and previous.get("digest") == input_digest and path.exists():
            try:
                value = load(path)
                self.resumed[name] = True
                return value
            except Exception as exc:  # stale or corrupt artifact: recompute
                log.warning("resume failed for stage %s (%s); recomputing", name, exc)
        started = time.perf_counter()
        value = compute()
        dump(value, path)
        self.timings[name] = time.perf_counter() - started
        self.resumed[name] = False
        return value


def run_pipeline(
    task_path: str | Path,
    config: PipelineConfig | None = None,
    out_dir: str | Path = "out",
    llm_mode: str = "live",
    transcript_path: str | Path | None = None,
    definitions_mode: str = "skip",
    resume: bool = False,
    backend: Backend | None = None,
) -> RunResult:
    """Run induction end to end for one task and write all artifacts.

    `backend` is only consulted in live/record modes; replay runs resolve
    every request through the transcript and never touch the network.
    """
    config = config or PipelineConfig()
    config.validate()
    task_path = Path(task_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    task = load_task(task_path)
    task_digest = file_digest(task_path)

    transcript = Transcript(llm_mode, transcript_path)
    if backend is None and llm_mode in ("live", "record"):
        backend = HttpBackend(config.provider)
    gateway = Gateway(backend, transcript, config.provider)

    previous_manifest: dict[str, Any] | None = None
    manifest_path = out_dir / MANIFEST_FILE
    if resume and manifest_path.exists():
        try:
            previous_manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except ValueError:
            log.warning("existing manifest is unreadable; resuming nothing")
    stages = _StageRunner(out_dir, resume, previous_manifest)

    definitions = stages.run(
        "definitions",
        [task_digest, definitions_mode, config.provider.large_model, PROMPT_REVISION],
        DEFINITIONS_FILE,
        lambda: definitions_stage(
            gateway, task, definitions_mode,
            config.provider.large_model, config.provider.max_output_tokens,
        ),
        lambda value, path: save_definition_cache(value, path),
        load_definition_cache,
    )

    selection_digest_parts = [
        stages.meta["definitions"]["digest"],
        config.k_isa,
        config.k_def,
        config.resolved_k1(),
        list(config.templates),
        config.mutuality,
        config.enable_hpcs,
        config.provider.small_model,
        config.provider.embed_model,
        PROMPT_REVISION,
    ]
    candidates = stages.run(
        "selection",
        selection_digest_parts,
        CANDIDATES_FILE,
        lambda: select_candidates(gateway, task, definitions, config),
        lambda value, path: _dump_candidates(value, path),
        _load_candidates,
    )

    ranked = stages.run(
        "ranking",
        [stages.meta["selection"]["digest"], config.k2, config.provider.large_model],
        RANKED_FILE,
        lambda: rank_all(
            gateway, config.provider.large_model, task, definitions, candidates, config.k2
        ),
        lambda value, path: _dump_ranked(value, path),
        _load_ranked,
    )
    edges = ranked_edges(ranked)

    if config.enable_lscsf:
        calibrated, features = stages.run(
            "calibration",
            [
                stages.meta["ranking"]["digest"],
                config.tau_m,
                config.delta,
                config.provider.large_model,
            ],
            CALIBRATED_FILE,
            lambda: calibrate(gateway, edges, task.root, config),
            lambda value, path: _dump_calibrated(value, path),
            _load_calibrated,
        )
    else:
        calibrated, features = calibrate(gateway, edges, task.root, config)
        stale = out_dir / CALIBRATED_FILE
        if stale.exists():
            stale.unlink()

    assembly_started = time.perf_counter()
    graph = WeightedDigraph.build(
        task.node_names,
        [(edge.child, edge.parent, edge.final_score) for edge in calibrated],
    )
    repaired = ensure_attachable(graph, task.root)
    taxonomy = max_arborescence(repaired, task.root)
    weights = {(child, parent): weight for child, parent, weight in repaired.arcs}
    edge_scores = {edge: weights[edge] for edge in taxonomy.sorted_edges()}
    _write_json(out_dir / PREDICTED_FILE, taxonomy_to_json(taxonomy, edge_scores))
    stages.timings["assembly"] = time.perf_counter() - assembly_started

    report: MetricsReport | None = None
    counts: MatchCounts | None = None
    if task.gold is not None:
        counts = count_matches(taxonomy, task.gold)
        report = report_from_counts(counts)
        _write_json(
            out_dir / METRICS_FILE,
            {"metrics": report.as_percentages(), "counts": counts.as_dict()},
        )

    artifact_names = [DEFINITIONS_FILE, CANDIDATES_FILE, RANKED_FILE, PREDICTED_FILE]
    if config.enable_lscsf:
        artifact_names.insert(3, CALIBRATED_FILE)
    if task.gold is not None:
        artifact_names.append(METRICS_FILE)
    manifest = {
        "package": "taxoweave",
        "version": __version__,
        "task": {
            "path": str(task_path),
            "digest": task_digest,
            "nodes": len(task.node_names),
            "has_gold": task.gold is not None,
        },
        "seed": config.seed,
        "llm_mode": llm_mode,
        "definitions_mode": definitions_mode,
        "transcript": {
            "path": str(transcript.path) if transcript.path else None,
            "digest": transcript.file_digest(),
        },
        "config": config.to_json(),
        "ablation": {"hpcs": config.enable_hpcs, "lscsf": config.enable_lscsf},
        "stages": stages.meta,
        "artifacts": {
            name: file_digest(out_dir / name)
            for name in artifact_names
            if (out_dir / name).exists()
        },
        "usage": dict(gateway.counters),
        "result": {
            "nodes": len(taxonomy.nodes),
            "edges": len(taxonomy.edges),
            "fallback_arcs": len(repaired.arcs) - len(graph.arcs),
            "metrics": report.as_percentages() if report is not None else None,
        },
    }
    _write_json(manifest_path, manifest)
    _write_json(
        out_dir / TIMINGS_FILE,
        {"stage_seconds": stages.timings, "resumed": stages.resumed},
    )
    return RunResult(task, taxonomy, edge_scores, report, counts, out_dir, manifest)


def run_many(
    task_paths: Sequence[str | Path],
    config: PipelineConfig | None = None,
    out_root: str | Path = "out",
    llm_mode: str = "live",
    transcript_path: str | Path | None = None,
    definitions_mode: str = "skip",
    resume: bool = False,
    backend: Backend | None = None,
    jobs: int = 1,
) -> list[RunResult]:
    """Run several tasks, each into its own subdirectory, and micro-average.

    Subdirectories are named after the task file stems (suffixed on clash).
    When at least one task carries gold edges a pooled micro-average report
    is written at the root of the output directory.
    """
    out_root = Path(out_root)
    names: list[str] = []
    used: set[str] = set()
    for path in task_paths:
        stem = Path(path).stem
        name = stem
        index = 1
        while name in used:
            name = f"{stem}-{index}"
            index += 1
        used.add(name)
        names.append(name)

    def _one(pair: tuple[str, str | Path]) -> RunResult:
        name, path = pair
        return run_pipeline(
            path, config, out_root / name, llm_mode, transcript_path,
            definitions_mode, resume, backend,
        )

    results = map_concurrent(_one, list(zip(names, task_paths)), max(1, jobs))

    scored = [
        (name, result)
        for name, result in zip(names, results)
        if result.counts is not None
    ]
    if scored:
        micro = micro_average([result.counts for _, result in scored])
        _write_json(
            out_root / MICRO_METRICS_FILE,
            {
                "micro": micro.as_percentages(),
                "tasks": {
                    name: result.report.as_percentages() for name, result in scored
                },
            },
        )
    return results
