"""Hierarchical question-set evaluation."""
from .extract import (
    QA_ENDPOINT_ENV,
    QA_PROMPT_TEMPLATE,
    AnswerCache,
    ExtractionError,
    QAClient,
    QAResponseError,
    QATransportError,
    extract_answers,
    extract_generated,
    normalize_answer,
    rule_extract,
)
from .metrics import (
    AlignmentError,
    BleuResult,
    HierarchyReport,
    agreement_from_labels,
    agreement_metrics,
    bleu,
    bleu_mean,
    corpus_bleu_mean,
    counts_table,
    hierarchy_analysis,
    is_consistent,
)
