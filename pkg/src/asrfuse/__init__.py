"""Multi-ASR hypothesis fusion toolkit.

Fuses transcripts from three speech recognizers into pseudo-labels via
confusion networks and region arbitration, and prepares instruction
data for LLM-based error correction.
"""

from .alignment import (
    Anchor,
    ConfusionNetwork,
    PairAlignment,
    Region,
    align_pair,
    align_third,
    mark_confusion_regions,
)
from .confnet import ConfnetParseError, parse, render
from .core import (
    DEFAULT_NORMALIZER,
    ConfigError,
    Hypothesis,
    PipelineConfig,
    TextNormalizer,
    UtteranceRecord,
    normalize,
    read_manifest,
    write_manifest,
)
from .ensemble import (
    EnsembleOutput,
    GateDecision,
    RankedTriple,
    arbitrate,
    perfect_match_gate,
    rank_asrs,
    run_pipeline,
)
from .metrics import EditBreakdown, cer_pair, corpus_report, edit_distance, levenshtein, wer

__version__ = "0.1.0"

__all__ = [
    "Anchor",
    "ConfusionNetwork",
    "PairAlignment",
    "Region",
    "align_pair",
    "align_third",
    "mark_confusion_regions",
    "ConfnetParseError",
    "parse",
    "render",
    "DEFAULT_NORMALIZER",
    "ConfigError",
    "Hypothesis",
    "PipelineConfig",
    "TextNormalizer",
    "UtteranceRecord",
    "normalize",
    "read_manifest",
    "write_manifest",
    "EnsembleOutput",
    "GateDecision",
    "RankedTriple",
    "arbitrate",
    "perfect_match_gate",
    "rank_asrs",
    "run_pipeline",
    "EditBreakdown",
    "cer_pair",
    "corpus_report",
    "edit_distance",
    "levenshtein",
    "wer",
    "__version__",
]
