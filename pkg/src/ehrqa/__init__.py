"""Grounded clinical question answering: pipeline, ensembling, evaluation."""

from .backend import (
    CompletionBackend,
    CompletionRequest,
    CompletionResult,
    CostLedger,
    DiskCache,
    HttpBackend,
    MockBackend,
    cache_key,
    ledger_report,
    scripted_responder,
)
from .corpus import (
    AnswerSentence,
    CaseRecord,
    GoldAnnotations,
    NoteSentence,
    TagScheme,
    load_corpus,
    split_answer,
    tag_note,
)
from .ensemble import (
    JUDGE_CRITERIA,
    EnsembleSearchResult,
    JudgeDecision,
    JudgeSpec,
    default_threshold,
    judge_select,
    search_ensemble,
    vote_alignment,
    vote_evidence,
)
from .evaluation import (
    PRF,
    alignment_micro_f1,
    bleu,
    composite,
    generation_scores,
    pooled_prf,
    report_grid,
    rouge_l,
    rouge_lsum,
    sari,
    strict_micro_f1,
    tokenize,
)
from .pipeline import (
    CaseResult,
    RunConfig,
    RunGrid,
    merge_alignment_passes,
    read_grid,
    run_matrix,
    run_subtask1,
    run_subtask2,
    run_subtask3,
    run_subtask4,
    write_grid,
)
from .prompting import (
    PromptPayload,
    PromptTemplate,
    Strategy,
    Subtask,
    TemplateRegistry,
    load_templates,
    render,
)
from .structured import (
    AlignmentMap,
    ClinicalQuery,
    EvidenceSelection,
    FailureKind,
    GeneratedAnswer,
    ParseOutcome,
    extract_json,
    parse_alignment,
    parse_evidence,
    parse_query,
    word_count,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AlignmentMap",
    "AnswerSentence",
    "CaseRecord",
    "CaseResult",
    "ClinicalQuery",
    "CompletionBackend",
    "CompletionRequest",
    "CompletionResult",
    "CostLedger",
    "DiskCache",
    "EnsembleSearchResult",
    "EvidenceSelection",
    "FailureKind",
    "GeneratedAnswer",
    "GoldAnnotations",
    "HttpBackend",
    "JUDGE_CRITERIA",
    "JudgeDecision",
    "JudgeSpec",
    "MockBackend",
    "NoteSentence",
    "PRF",
    "ParseOutcome",
    "PromptPayload",
    "PromptTemplate",
    "RunConfig",
    "RunGrid",
    "Strategy",
    "Subtask",
    "TagScheme",
    "TemplateRegistry",
    "alignment_micro_f1",
    "bleu",
    "cache_key",
    "composite",
    "default_threshold",
    "extract_json",
    "generation_scores",
    "judge_select",
    "ledger_report",
    "load_corpus",
    "load_templates",
    "merge_alignment_passes",
    "parse_alignment",
    "parse_evidence",
    "parse_query",
    "pooled_prf",
    "read_grid",
    "render",
    "report_grid",
    "rouge_l",
    "rouge_lsum",
    "run_matrix",
    "run_subtask1",
    "run_subtask2",
    "run_subtask3",
    "run_subtask4",
    "sari",
    "scripted_responder",
    "search_ensemble",
    "split_answer",
    "strict_micro_f1",
    "tag_note",
    "tokenize",
    "vote_alignment",
    "vote_evidence",
    "word_count",
    "write_grid",
]
