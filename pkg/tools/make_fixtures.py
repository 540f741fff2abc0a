#!/usr/bin/env python3
"""Regenerate the bundled fixture transcripts from the gold trees.

Each fixture transcript is recorded by running the real pipeline against a
GoldOracleBackend, once per configuration variant the test suite replays
(default, the k2 sweep, candidate selection off, and snapshot definitions).
Run this after any change to prompt wording, then bump PROMPT_REVISION.
"""

from __future__ import annotations

import dataclasses
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "src"))

from taxoweave.core import PipelineConfig, ProviderConfig
from taxoweave.dataset import load_task
from taxoweave.pipeline import run_pipeline
from taxoweave.synthetic import GoldOracleBackend

FIXTURES = REPO / "src" / "taxoweave" / "fixtures"


def record(task_path: Path, transcript_path: Path, variants) -> None:
    if transcript_path.exists():
        transcript_path.unlink()
    task = load_task(task_path)
    backend = GoldOracleBackend(task)
    with tempfile.TemporaryDirectory() as scratch:
        for index, (config, definitions_mode) in enumerate(variants):
            result = run_pipeline(
                task_path,
                config,
                Path(scratch) / f"variant{index}",
                llm_mode="record",
                transcript_path=transcript_path,
                definitions_mode=definitions_mode,
                backend=backend,
            )
            assert result.report is not None
            edge_f1 = result.report.edge_f1
            print(
                f"  {task_path.parent.name} variant {index}: "
                f"definitions={definitions_mode} k2={config.k2} "
                f"hpcs={config.enable_hpcs} lscsf={config.enable_lscsf} "
                f"edge_f1={edge_f1:.4f}"
            )


def main() -> None:
    # Recording serially keeps the transcript line order reproducible.
    provider = ProviderConfig(max_in_flight=1)
    base = PipelineConfig(provider=provider)

    wordnet = FIXTURES / "wordnet_sample"
    snapshot_mode = f"snapshot:{wordnet / 'snapshot.json'}"
    record(
        wordnet / "task.json",
        wordnet / "transcript.jsonl",
        [
            (base, snapshot_mode),
            (base, "skip"),
            (dataclasses.replace(base, k2=1), "skip"),
            (dataclasses.replace(base, k2=5), "skip"),
            (dataclasses.replace(base, enable_hpcs=False), "skip"),
            (dataclasses.replace(base, enable_lscsf=False), "skip"),
        ],
    )

    science = FIXTURES / "science_sample"
    record(
        science / "task.json",
        science / "transcript.jsonl",
        [(base, "skip")],
    )
    print("fixtures written under", FIXTURES)


if __name__ == "__main__":
    main()
