"""Command-line interface: run induction, evaluate predictions, convert datasets."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .arborescence import Infeasible
from .core import (
    ConfigError,
    DuplicateTerm,
    MetricsReport,
    PipelineConfig,
    TaxoweaveError,
    Taxonomy,
    taxonomy_from_json,
)
from .dataset import (
    CycleInGold,
    GoldInvalid,
    MultipleRoots,
    TaskParseError,
    TermMismatch,
    convert_external,
    load_task,
)
from .evaluation import InvalidTaxonomy, NodeSetMismatch, score
from .gateway import GatewayError
from .pipeline import METRICS_FILE, run_many, run_pipeline

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PROVIDER = 3
EXIT_INFEASIBLE = 4

_INPUT_ERRORS = (
    ConfigError,
    TaskParseError,
    TermMismatch,
    GoldInvalid,
    MultipleRoots,
    CycleInGold,
    DuplicateTerm,
    NodeSetMismatch,
    InvalidTaxonomy,
    FileNotFoundError,
    ValueError,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taxoweave",
        description="Induce a taxonomy from a root concept and a flat term set.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the induction pipeline end to end")
    run.add_argument("--task", action="append", required=True,
                     help="task JSON file (repeat for a dataset sweep)")
    run.add_argument("--config", help="pipeline config JSON file")
    run.add_argument("--out-dir", required=True, help="output directory for all artifacts")
    run.add_argument("--llm-mode", choices=("live", "record", "replay"), default="live")
    run.add_argument("--transcript", help="transcript JSONL (required for record/replay)")
    run.add_argument("--definitions", default="skip",
                     help="definition acquisition: live, snapshot:<path>, none, or skip")
    run.add_argument("--no-hpcs", action="store_true",
                     help="disable hybrid candidate selection (all pairs become candidates)")
    run.add_argument("--no-lscsf", action="store_true",
                     help="disable structure-aware score calibration")
    run.add_argument("--k2", type=int, help="override ranked parents kept per term")
    run.add_argument("--seed", type=int, help="override the run seed")
    run.add_argument("--mutuality", choices=("reciprocal-prune", "off"),
                     help="mutual-selection filter for is-a candidates")
    run.add_argument("--resume", action="store_true",
                     help="reuse stage artifacts whose input digests match")
    run.add_argument("--jobs", type=int, default=1,
                     help="parallel tasks in a dataset sweep")
    run.set_defaults(func=_cmd_run)

    evaluate = sub.add_parser("eval", help="score a predicted taxonomy against gold")
    evaluate.add_argument("--pred", required=True, help="predicted taxonomy JSON")
    evaluate.add_argument("--gold", required=True,
                          help="gold file: task JSON with gold_edges or taxonomy JSON")
    evaluate.add_argument("--out", help="write the metrics report to this file")
    evaluate.set_defaults(func=_cmd_eval)

    convert = sub.add_parser("convert", help="convert an external gold file to a task file")
    convert.add_argument("--format", required=True, choices=("edges", "terms-relations"))
    convert.add_argument("--input", required=True, help="edge list (child<TAB>parent per line)")
    convert.add_argument("--terms", help="term list file for terms-relations format")
    convert.add_argument("--output", required=True, help="task JSON to write")
    convert.set_defaults(func=_cmd_convert)
    return parser


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        config = PipelineConfig.from_json(raw)
    else:
        config = PipelineConfig()
    overrides = {}
    if args.k2 is not None:
        overrides["k2"] = args.k2
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mutuality is not None:
        overrides["mutuality"] = args.mutuality
    if args.no_hpcs:
        overrides["enable_hpcs"] = False
    if args.no_lscsf:
        overrides["enable_lscsf"] = False
    if overrides:
        config = dataclasses.replace(config, **overrides)
    config.validate()
    return config


def _print_report(report: MetricsReport) -> None:
    for name, value in report.as_percentages().items():
        print(f"{name:<20} {value:6.2f}")


def _cmd_run(args: argparse.Namespace) -> int:
    config = _load_config(args)
    if args.llm_mode in ("record", "replay") and not args.transcript:
        raise ConfigError(f"--llm-mode {args.llm_mode} requires --transcript")
    tasks = list(args.task)
    if len(tasks) == 1:
        result = run_pipeline(
            tasks[0], config, args.out_dir, args.llm_mode, args.transcript,
            args.definitions, args.resume,
        )
        print(f"task: {tasks[0]}")
        print(f"nodes: {len(result.taxonomy.nodes)}  edges: {len(result.taxonomy.edges)}")
        if result.report is not None:
            _print_report(result.report)
        print(f"artifacts: {result.out_dir}")
        return EXIT_OK
    results = run_many(
        tasks, config, args.out_dir, args.llm_mode, args.transcript,
        args.definitions, args.resume, jobs=args.jobs,
    )
    for path, result in zip(tasks, results):
        edge_f1 = (
            f"{result.report.as_percentages()['edge_f1']:.2f}"
            if result.report is not None
            else "n/a"
        )
        print(f"{path}: {len(result.taxonomy.edges)} edges, edge_f1={edge_f1}")
    print(f"artifacts: {args.out_dir}")
    return EXIT_OK


def _load_taxonomy_file(path: str) -> Taxonomy:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw, dict) and "terms" in raw:
        task = load_task(path)
        if task.gold is None:
            raise TaskParseError(f"{path} carries no gold_edges to evaluate against")
        return task.gold
    taxonomy, _ = taxonomy_from_json(raw)
    return taxonomy


def _cmd_eval(args: argparse.Namespace) -> int:
    pred = _load_taxonomy_file(args.pred)
    gold = _load_taxonomy_file(args.gold)
    report = score(pred, gold)
    _print_report(report)
    if args.out:
        Path(args.out).write_text(
            json.dumps({"metrics": report.as_percentages()}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return EXIT_OK


def _cmd_convert(args: argparse.Namespace) -> int:
    task_obj = convert_external(args.format, args.input, args.terms)
    Path(args.output).write_text(
        json.dumps(task_obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    edges = len(task_obj["gold_edges"])
    print(f"wrote {args.output} (root={task_obj['root']!r}, {edges} gold edges)")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Infeasible as exc:
        print(f"error: infeasible taxonomy: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except GatewayError as exc:
        print(f"error: provider: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TaxoweaveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
