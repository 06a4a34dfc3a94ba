"""Draft-Refine-Critique synthetic data pipeline."""

from .assemble import assemble_critique_dataset, assemble_dpo, assemble_sft_filtered, balance_counts
from .backends import (
    NO_WAIT,
    BackendConfigError,
    BackendError,
    BackendUnavailable,
    GenerationBackend,
    GenerationParams,
    HttpBackend,
    MockBackend,
    RetryPolicy,
    call_with_retry,
)
from .mocks import MOCK_DRAFTS, mock_critique, mock_draft, mock_refine
from .pipeline import (
    DATASET_FILES,
    Backends,
    PipelineConfig,
    RoundResult,
    load_manifest,
    round_dir,
    run_round,
    self_play_round,
)
from .records import CritiqueExample, CritiqueRecord, DpoTriplet, DraftRecord, RefineRecord, SftExample
from .stages import (
    UNPARSEABLE_CRITIQUE,
    RefinementUnparseable,
    StageLog,
    normalize_markdown,
    parse_verdict,
    run_critique,
    run_draft,
    run_refine,
)
from .templates import PromptTemplate, TemplateError, default_template

__all__ = [
    "assemble_critique_dataset",
    "assemble_dpo",
    "assemble_sft_filtered",
    "balance_counts",
    "NO_WAIT",
    "BackendConfigError",
    "BackendError",
    "BackendUnavailable",
    "GenerationBackend",
    "GenerationParams",
    "HttpBackend",
    "MockBackend",
    "RetryPolicy",
    "call_with_retry",
    "MOCK_DRAFTS",
    "mock_critique",
    "mock_draft",
    "mock_refine",
    "DATASET_FILES",
    "Backends",
    "PipelineConfig",
    "RoundResult",
    "load_manifest",
    "round_dir",
    "run_round",
    "self_play_round",
    "CritiqueExample",
    "CritiqueRecord",
    "DpoTriplet",
    "DraftRecord",
    "RefineRecord",
    "SftExample",
    "UNPARSEABLE_CRITIQUE",
    "RefinementUnparseable",
    "StageLog",
    "normalize_markdown",
    "parse_verdict",
    "run_critique",
    "run_draft",
    "run_refine",
    "PromptTemplate",
    "TemplateError",
    "default_template",
]
