"""Zero-shot taxonomy induction from a root concept and a flat term set.

The pipeline identifies a parent for every term coarse-to-fine: candidate
filtering with a lightweight model plus definition matching, joint ranking
by a large model, structure-aware score calibration, and a final maximum
spanning arborescence.  An evaluation harness scores predictions against
gold trees with ancestor-level and edge-level F1.
"""

__version__ = "0.1.0"

from .arborescence import WeightedDigraph, ensure_attachable, max_arborescence
from .core import (
    DEFAULT_TEMPLATES,
    CandidateEdge,
    MetricsReport,
    PipelineConfig,
    ProviderConfig,
    Taxonomy,
    TermRecord,
    canonical_order,
    validate_taxonomy,
)
from .dataset import Task, convert_external, fixture_path, load_task
from .evaluation import MatchCounts, ancestor_closure, micro_average, score
from .pipeline import RunResult, run_many, run_pipeline

__all__ = [
    "__version__",
    "CandidateEdge",
    "DEFAULT_TEMPLATES",
    "MatchCounts",
    "MetricsReport",
    "PipelineConfig",
    "ProviderConfig",
    "RunResult",
    "Task",
    "Taxonomy",
    "TermRecord",
    "WeightedDigraph",
    "ancestor_closure",
    "canonical_order",
    "convert_external",
    "ensure_attachable",
    "fixture_path",
    "load_task",
    "max_arborescence",
    "micro_average",
    "run_many",
    "run_pipeline",
    "score",
    "validate_taxonomy",
]
