"""Per-case subtask runners and the model-by-template matrix executor.

Runners never raise for anything a model did: backend failures, render
preconditions, and parse problems all land in the CaseResult outcome so a
matrix always completes. Only misconfiguration (wrong subtask for a
runner, unknown template) raises.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .backend import CompletionRequest
from .corpus import CaseRecord, NoteSentence, AnswerSentence, RELEVANCE_LABELS
from .errors import (
    BackendError,
    EmptyAnswer,
    InvalidRunConfig,
    MissingClinicianQuestion,
)
from .prompting import PromptPayload, Strategy, Subtask, render
from .structured import (
    AlignmentMap,
    ClinicalQuery,
    EvidenceSelection,
    FailureKind,
    GeneratedAnswer,
    ParseOutcome,
    extract_json,
    failure_record,
    make_query,
    parse_alignment,
    parse_alignment_entries,
    parse_evidence,
    parse_query,
    strip_fence,
)

log = logging.getLogger(__name__)

# environment override so reruns can produce byte-identical manifests
TIMESTAMP_ENV = "EHRQA_RUN_TIMESTAMP"


@dataclass(frozen=True)
class RunConfig:
    """One model-template pairing plus its execution switches."""

    model_id: str
    template_id: str
    temperature: float = None
    top_p: float = None
    max_tokens: int = None
    two_pass: bool = False            # Q4 only
    per_sentence: bool = False        # Q2 sentence-level templates
    lenient_aggregation: bool = False

    @property
    def config_id(self) -> str:
        return f"{self.model_id}::{self.template_id}"

    def to_dict(self):
        out = {"model_id": self.model_id, "template_id": self.template_id}
        for key in ("temperature", "top_p", "max_tokens"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        for key in ("two_pass", "per_sentence", "lenient_aggregation"):
            if getattr(self, key):
                out[key] = True
        return out

    @classmethod
    def from_dict(cls, doc):
        known = {
            "model_id", "template_id", "temperature", "top_p", "max_tokens",
            "two_pass", "per_sentence", "lenient_aggregation",
        }
        unknown = set(doc) - known
        if unknown:
            raise InvalidRunConfig(f"unknown config fields {sorted(unknown)}")
        return cls(**doc)


@dataclass
class CaseResult:
    case_id: str
    model_id: str
    template_id: str
    outcome: ParseOutcome
    raw_text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost_usd: float = 0.0
    latency_ms: int = 0
    from_cache: bool = False
    raw_text_pass2: str = None


@dataclass
class RunGrid:
    subtask: Subtask
    models: list
    templates: list
    case_ids: list
    cells: dict = field(default_factory=dict)

    def cell(self, model_id, template_id):
        return self.cells[(model_id, template_id)]


def _request(config: RunConfig, payload: PromptPayload) -> CompletionRequest:
    kwargs = {}
    if config.temperature is not None:
        kwargs["temperature"] = config.temperature
    if config.top_p is not None:
        kwargs["top_p"] = config.top_p
    if config.max_tokens is not None:
        kwargs["max_tokens"] = config.max_tokens
    return CompletionRequest(model_id=config.model_id, payload=payload, **kwargs)


def _template_for(registry, config, expected: Subtask):
    template = registry.get(config.template_id)
    if template.subtask is not expected:
        raise InvalidRunConfig(
            f"{config.template_id} is a {template.subtask.value} template, runner wants {expected.value}"
        )
    return template


def _failed(case, config, kind, detail, raw_text=""):
    return CaseResult(
        case_id=case.case_id,
        model_id=config.model_id,
        template_id=config.template_id,
        outcome=ParseOutcome.failure(kind, detail),
        raw_text=raw_text,
    )


def _completed(case, config, outcome, raw_text, results, raw_text_pass2=None):
    """Fold one or more completion results into a CaseResult."""
    return CaseResult(
        case_id=case.case_id,
        model_id=config.model_id,
        template_id=config.template_id,
        outcome=outcome,
        raw_text=raw_text,
        prompt_tokens=sum(r.prompt_tokens for r in results),
        completion_tokens=sum(r.completion_tokens for r in results),
        cost_usd=sum(r.cost_usd for r in results),
        latency_ms=sum(r.latency_ms for r in results),
        from_cache=all(r.from_cache for r in results) if results else False,
        raw_text_pass2=raw_text_pass2,
    )


def run_subtask1(case: CaseRecord, config: RunConfig, backend, registry) -> CaseResult:
    """Condense the patient question into a short clinical query."""
    template = _template_for(registry, config, Subtask.Q1)
    try:
        payload = render(template, case)
    except MissingClinicianQuestion:
        return _failed(case, config, FailureKind.MISSING_CLINICIAN_QUESTION,
                       "template needs a clinician question this case lacks")
    try:
        result = backend.complete(_request(config, payload))
    except BackendError as exc:
        return _failed(case, config, FailureKind.BACKEND_ERROR, str(exc))
    value = extract_json(result.text)
    if value is None:
        outcome = ParseOutcome.failure(FailureKind.UNPARSEABLE, "no JSON value found")
    else:
        outcome = parse_query(value)
    return _completed(case, config, outcome, result.text, [result])


def _labels_to_selection(labels: dict, lenient: bool) -> EvidenceSelection:
    wanted = {"essential", "supplementary"} if lenient else {"essential"}
    ids = sorted(i for i, label in labels.items() if label in wanted)
    return EvidenceSelection(sentence_ids=tuple(ids))


def run_subtask2(case: CaseRecord, config: RunConfig, backend, registry) -> CaseResult:
    """Select the note sentences that support the clinician question."""
    template = _template_for(registry, config, Subtask.Q2)
    per_sentence = template.strategy is Strategy.SENTENCE_LEVEL_CLASSIFICATION
    if per_sentence and not config.per_sentence:
        raise InvalidRunConfig(
            f"{config.template_id} classifies sentence by sentence; enable per_sentence"
        )

    if not per_sentence:
        try:
            payload = render(template, case)
        except MissingClinicianQuestion:
            return _failed(case, config, FailureKind.MISSING_CLINICIAN_QUESTION,
                           "template needs a clinician question this case lacks")
        try:
            result = backend.complete(_request(config, payload))
        except BackendError as exc:
            return _failed(case, config, FailureKind.BACKEND_ERROR, str(exc))
        value = extract_json(result.text)
        if value is None:
            outcome = ParseOutcome.failure(FailureKind.UNPARSEABLE, "no JSON value found")
        else:
            outcome = parse_evidence(value, case.note_size)
        return _completed(case, config, outcome, result.text, [result])

    # one call per sentence; the first failure fails the whole case
    labels = {}
    completions = []
    raw_parts = []
    for sentence in case.note:
        sub_case = CaseRecord(
            case_id=case.case_id,
            patient_question=case.patient_question,
            clinician_question=case.clinician_question,
            note=(NoteSentence(id=1, text=sentence.text),),
            gold=None,
        )
        try:
            payload = render(template, sub_case)
        except MissingClinicianQuestion:
            return _failed(case, config, FailureKind.MISSING_CLINICIAN_QUESTION,
                           "template needs a clinician question this case lacks")
        try:
            result = backend.complete(_request(config, payload))
        except BackendError as exc:
            return _failed(case, config, FailureKind.BACKEND_ERROR,
                           f"sentence {sentence.id}: {exc}",
                           raw_text="\n".join(raw_parts))
        completions.append(result)
        raw_parts.append(f"[{sentence.id}] {result.text}")
        value = extract_json(result.text)
        label = value.get("label") if isinstance(value, dict) else None
        if value is None:
            outcome = ParseOutcome.failure(
                FailureKind.UNPARSEABLE, f"sentence {sentence.id}: no JSON value found"
            )
            return _completed(case, config, outcome, "\n".join(raw_parts), completions)
        if label not in RELEVANCE_LABELS:
            outcome = ParseOutcome.failure(
                FailureKind.SCHEMA_MISMATCH, f"sentence {sentence.id}: bad label {label!r}"
            )
            return _completed(case, config, outcome, "\n".join(raw_parts), completions)
        labels[sentence.id] = label

    selection = _labels_to_selection(labels, config.lenient_aggregation)
    return _completed(case, config, ParseOutcome.success(selection),
                      "\n".join(raw_parts), completions)


def run_subtask3(case: CaseRecord, config: RunConfig, backend, registry) -> CaseResult:
    """Generate the patient-facing answer; the reply is the answer."""
    template = _template_for(registry, config, Subtask.Q3)
    try:
        payload = render(template, case)
    except MissingClinicianQuestion:
        return _failed(case, config, FailureKind.MISSING_CLINICIAN_QUESTION,
                       "template needs a clinician question this case lacks")
    try:
        result = backend.complete(_request(config, payload))
    except BackendError as exc:
        return _failed(case, config, FailureKind.BACKEND_ERROR, str(exc))
    text = strip_fence(result.text)
    try:
        answer = GeneratedAnswer.from_text(text)
    except EmptyAnswer:
        return _completed(case, config,
                          ParseOutcome.failure(FailureKind.EMPTY_ANSWER, "blank reply"),
                          result.text, [result])
    return _completed(case, config, ParseOutcome.success(answer), result.text, [result])


def _pass2_payload(template, case, answer_sentences, missing):
    """Follow-up prompt for the answer sentences still lacking citations."""
    unaligned = [s for s in answer_sentences if s.index in missing]
    base = render(template, case, answer=unaligned)
    tags = ", ".join(f"[S{i}]" for i in sorted(missing))
    extra = (
        f"Remaining uncited answer sentences: {tags}. Re-examine only these answer "
        "sentences against the note and return a JSON object with exactly these keys, "
        "using an empty list only when a sentence is truly unsupported."
    )
    return PromptPayload(system=base.system, user=f"{base.user}\n\n{extra}")


def merge_alignment_passes(pass1: dict, pass2: dict) -> dict:
    """Second-pass citations fill only entries that are still empty."""
    merged = {}
    for idx in sorted(pass1):
        ids = pass1[idx]
        if not ids:
            ids = pass2.get(idx, [])
        merged[idx] = list(ids)
    return merged


def run_subtask4(case: CaseRecord, answer: GeneratedAnswer, config: RunConfig,
                 backend, registry) -> CaseResult:
    """Align each answer sentence to its supporting note sentences."""
    template = _template_for(registry, config, Subtask.Q4)
    if answer is None or not answer.sentences:
        return _failed(case, config, FailureKind.MISSING_ANSWER, "no answer to align")
    sentences = answer.sentences
    m = len(sentences)

    try:
        payload = render(template, case, answer=sentences)
    except MissingClinicianQuestion:
        return _failed(case, config, FailureKind.MISSING_CLINICIAN_QUESTION,
                       "template needs a clinician question this case lacks")
    try:
        result = backend.complete(_request(config, payload))
    except BackendError as exc:
        return _failed(case, config, FailureKind.BACKEND_ERROR, str(exc))

    value = extract_json(result.text)
    if value is None:
        outcome = ParseOutcome.failure(FailureKind.UNPARSEABLE, "no JSON value found")
        return _completed(case, config, outcome, result.text, [result])
    outcome = parse_alignment(value, m, case.note_size, mode="lenient")
    if not outcome.ok:
        return _completed(case, config, outcome, result.text, [result])

    entries = outcome.value.entries
    warnings = list(outcome.warnings)
    completions = [result]
    raw2 = None
    missing = {idx for idx, ids in entries.items() if not ids}
    if config.two_pass and missing:
        try:
            result2 = backend.complete(_request(config, _pass2_payload(
                template, case, sentences, missing)))
        except BackendError as exc:
            warnings.append(f"second pass failed: {exc}")
            result2 = None
        if result2 is not None:
            completions.append(result2)
            raw2 = result2.text
            value2 = extract_json(result2.text)
            outcome2 = None
            if value2 is not None:
                outcome2 = parse_alignment_entries(
                    value2, sorted(missing), case.note_size, mode="lenient"
                )
            if outcome2 is not None and outcome2.ok:
                entries = merge_alignment_passes(entries, outcome2.value.entries)
                warnings.extend(outcome2.warnings)
            else:
                detail = outcome2.detail if outcome2 is not None else "no JSON value found"
                warnings.append(f"second pass unusable ({detail}); keeping first-pass map")

    final = ParseOutcome.success(AlignmentMap(entries=entries), warnings=warnings)
    return _completed(case, config, final, result.text, completions, raw_text_pass2=raw2)


def run_matrix(cases, configs, backend, registry, subtask: Subtask,
               parallelism: int = 1, answers=None) -> RunGrid:
    """Execute every (config, case) pair exactly once.

    answers maps case_id to a GeneratedAnswer and is required for Q4.
    Results are keyed, not ordered, so worker scheduling cannot change
    the grid.
    """
    if not configs:
        raise InvalidRunConfig("no run configs given")
    seen = set()
    for config in configs:
        template = registry.get(config.template_id)
        if template.subtask is not subtask:
            raise InvalidRunConfig(
                f"{config.template_id} is {template.subtask.value}, matrix wants {subtask.value}"
            )
        key = (config.model_id, config.template_id)
        if key in seen:
            raise InvalidRunConfig(f"duplicate config {config.config_id}")
        seen.add(key)

    def one(config, case):
        if subtask is Subtask.Q1:
            return run_subtask1(case, config, backend, registry)
        if subtask is Subtask.Q2:
            return run_subtask2(case, config, backend, registry)
        if subtask is Subtask.Q3:
            return run_subtask3(case, config, backend, registry)
        answer = (answers or {}).get(case.case_id)
        return run_subtask4(case, answer, config, backend, registry)

    jobs = [(config, case) for config in configs for case in cases]
    results = {}
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = {
                pool.submit(one, config, case): (config, case) for config, case in jobs
            }
            for future, (config, case) in futures.items():
                results[(config.model_id, config.template_id, case.case_id)] = future.result()
    else:
        for config, case in jobs:
            results[(config.model_id, config.template_id, case.case_id)] = one(config, case)

    models = []
    templates = []
    for config in configs:
        if config.model_id not in models:
            models.append(config.model_id)
        if config.template_id not in templates:
            templates.append(config.template_id)
    case_ids = [c.case_id for c in cases]
    cells = {}
    for config in configs:
        cells[(config.model_id, config.template_id)] = [
            results[(config.model_id, config.template_id, cid)] for cid in case_ids
        ]
    return RunGrid(subtask=subtask, models=models, templates=templates,
                   case_ids=case_ids, cells=cells)


# ---------------------------------------------------------------------------
# serialization

def outcome_to_dict(outcome: ParseOutcome) -> dict:
    if not outcome.ok:
        out = {"kind": "failure", "failure_kind": outcome.failure_kind.value}
        if outcome.detail:
            out["detail"] = outcome.detail
    else:
        value = outcome.value
        if isinstance(value, ClinicalQuery):
            out = {"kind": "query", "query": value.query,
                   "word_count": value.word_count,
                   "length_violation": value.length_violation}
        elif isinstance(value, EvidenceSelection):
            out = {"kind": "evidence", "sentence_ids": list(value.sentence_ids)}
        elif isinstance(value, GeneratedAnswer):
            out = {"kind": "answer", "text": value.text,
                   "word_count": value.word_count,
                   "length_violation": value.length_violation,
                   "sentences": [{"index": s.index, "text": s.text} for s in value.sentences]}
        elif isinstance(value, AlignmentMap):
            out = {"kind": "alignment",
                   "entries": {str(k): list(v) for k, v in value.entries.items()}}
        else:
            raise TypeError(f"cannot serialize outcome value {type(value).__name__}")
    if outcome.warnings:
        out["warnings"] = list(outcome.warnings)
    return out


def outcome_from_dict(doc: dict) -> ParseOutcome:
    kind = doc["kind"]
    warnings = tuple(doc.get("warnings", ()))
    if kind == "failure":
        return ParseOutcome.failure(
            FailureKind(doc["failure_kind"]), doc.get("detail"), warnings=warnings
        )
    if kind == "query":
        return ParseOutcome.success(make_query(doc["query"]), warnings=warnings)
    if kind == "evidence":
        return ParseOutcome.success(
            EvidenceSelection(sentence_ids=tuple(doc["sentence_ids"])), warnings=warnings
        )
    if kind == "answer":
        sentences = tuple(
            AnswerSentence(index=s["index"], text=s["text"]) for s in doc["sentences"]
        )
        return ParseOutcome.success(
            GeneratedAnswer(text=doc["text"], sentences=sentences,
                            word_count=doc["word_count"],
                            length_violation=doc["length_violation"]),
            warnings=warnings,
        )
    if kind == "alignment":
        entries = {int(k): list(v) for k, v in doc["entries"].items()}
        return ParseOutcome.success(AlignmentMap(entries=entries), warnings=warnings)
    raise ValueError(f"unknown outcome kind {kind!r}")


def case_result_to_dict(result: CaseResult) -> dict:
    """Persisted form; cache hits and latency are runtime details that
    would break rerun-for-rerun byte equality, so they stay out."""
    out = {
        "case_id": result.case_id,
        "model_id": result.model_id,
        "template_id": result.template_id,
        "outcome": outcome_to_dict(result.outcome),
        "raw_text": result.raw_text,
        "prompt_tokens": result.prompt_tokens,
        "completion_tokens": result.completion_tokens,
        "cost_usd": result.cost_usd,
    }
    if result.raw_text_pass2 is not None:
        out["raw_text_pass2"] = result.raw_text_pass2
    return out


def case_result_from_dict(doc: dict) -> CaseResult:
    return CaseResult(
        case_id=doc["case_id"],
        model_id=doc["model_id"],
        template_id=doc["template_id"],
        outcome=outcome_from_dict(doc["outcome"]),
        raw_text=doc.get("raw_text", ""),
        prompt_tokens=doc.get("prompt_tokens", 0),
        completion_tokens=doc.get("completion_tokens", 0),
        cost_usd=doc.get("cost_usd", 0.0),
        raw_text_pass2=doc.get("raw_text_pass2"),
    )


def run_timestamp() -> str:
    """Manifest timestamp, overridable for reproducible reruns."""
    pinned = os.environ.get(TIMESTAMP_ENV)
    if pinned:
        return pinned
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sanitize(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def cell_filename(model_id, template_id) -> str:
    return f"{_sanitize(model_id)}__{_sanitize(template_id)}.json"


def _dump_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def write_grid(grid: RunGrid, out_dir, manifest_extra=None):
    """Persist a grid as cells/<model>__<template>.json plus manifest.json."""
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    for (model_id, template_id), results in grid.cells.items():
        failures = [
            failure_record(r.case_id, r.outcome.failure_kind, r.raw_text)
            for r in results
            if not r.outcome.ok
        ]
        _dump_json(
            out / "cells" / cell_filename(model_id, template_id),
            {
                "model_id": model_id,
                "template_id": template_id,
                "results": [case_result_to_dict(r) for r in results],
                "failures": failures,
            },
        )
    manifest = {
        "created_utc": run_timestamp(),
        "subtask": grid.subtask.value,
        "models": grid.models,
        "templates": grid.templates,
        "cases": grid.case_ids,
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    _dump_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def read_grid(run_dir):
    """Rebuild a RunGrid (plus its manifest) from a grid directory."""
    run = Path(run_dir)
    with open(run / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    subtask = Subtask(manifest["subtask"])
    cells = {}
    for model_id in manifest["models"]:
        for template_id in manifest["templates"]:
            path = run / "cells" / cell_filename(model_id, template_id)
            if not path.exists():
                continue
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
            cells[(model_id, template_id)] = [
                case_result_from_dict(d) for d in doc["results"]
            ]
    grid = RunGrid(
        subtask=subtask,
        models=manifest["models"],
        templates=manifest["templates"],
        case_ids=manifest["cases"],
        cells=cells,
    )
    return grid, manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_digest(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
