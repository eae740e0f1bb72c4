"""Case records: loading, validation, note tagging, answer segmentation.

The canonical corpus is a single JSON document:

    {"cases": [{"case_id": ..., "patient_question": ...,
                "clinician_question": ...,
                "sentences": [{"id": 1, "text": ...}, ...],
                "gold": {"relevance": {"1": "essential", ...},
                         "gold_alignment": {"1": [2, 3], ...},
                         "gold_query": ...}}]}

clinician_question and gold are optional. Everything is validated up front;
a single bad record aborts the whole load so downstream code never has to
re-check invariants.
"""

from __future__ import annotations

import enum
import json
import logging
import unicodedata
from dataclasses import dataclass, field
from typing import Optional

from .errors import DuplicateCaseId, EmptyAnswer, SchemaViolation

log = logging.getLogger(__name__)

RELEVANCE_LABELS = ("essential", "supplementary", "not-relevant")

_CASE_FIELDS = {"case_id", "patient_question", "clinician_question", "sentences", "gold"}
_GOLD_FIELDS = {"relevance", "gold_alignment", "gold_query"}
_SENTENCE_FIELDS = {"id", "text"}

_TERMINATORS = ".!?"


class TagScheme(enum.Enum):
    BRACKET_NUMERIC = "bracket_numeric"   # [1] sentence
    NOTE_PREFIXED = "note_prefixed"       # [N1] sentence


@dataclass(frozen=True)
class NoteSentence:
    id: int
    text: str


@dataclass(frozen=True)
class AnswerSentence:
    """One sentence of a generated answer, 1-indexed in answer order."""

    index: int
    text: str


@dataclass(frozen=True)
class GoldAnnotations:
    relevance: dict = field(default_factory=dict)
    gold_alignment: Optional[dict] = None
    gold_query: Optional[str] = None


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    patient_question: str
    clinician_question: Optional[str]
    note: tuple
    gold: Optional[GoldAnnotations] = None

    @property
    def note_size(self) -> int:
        return len(self.note)


def _normalize(text: str) -> str:
    # NFC plus newline folding keeps cache keys and word counts stable
    text = unicodedata.normalize("NFC", text.replace("\r\n", "\n"))
    return " ".join(text.split("\n")).strip()


def _check_unknown_fields(found, allowed, case_id, where, strict):
    extra = set(found) - allowed
    if not extra:
        return
    if strict:
        raise SchemaViolation(case_id, where, f"unknown fields {sorted(extra)}")
    log.warning("case %s: ignoring unknown %s fields %s", case_id, where, sorted(extra))


def _parse_sentences(raw, case_id, strict):
    if not isinstance(raw, list):
        raise SchemaViolation(case_id, "sentences", "expected a list")
    sentences = []
    for item in raw:
        if not isinstance(item, dict):
            raise SchemaViolation(case_id, "sentences", "sentence entries must be objects")
        _check_unknown_fields(item, _SENTENCE_FIELDS, case_id, "sentence", strict)
        sid = item.get("id")
        text = item.get("text")
        if not isinstance(sid, int) or isinstance(sid, bool) or sid < 1:
            raise SchemaViolation(case_id, "sentences", f"bad sentence id {sid!r}")
        if not isinstance(text, str) or not text.strip():
            raise SchemaViolation(case_id, "sentences", f"sentence {sid} has empty text")
        sentences.append(NoteSentence(id=sid, text=_normalize(text)))
    ids = sorted(s.id for s in sentences)
    if len(set(ids)) != len(ids):
        raise SchemaViolation(case_id, "sentences", "duplicate sentence ids")
    if ids != list(range(1, len(ids) + 1)):
        raise SchemaViolation(case_id, "sentences", "gap in sentence ids")
    sentences.sort(key=lambda s: s.id)
    return tuple(sentences)


def _parse_gold(raw, note_ids, case_id, strict):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise SchemaViolation(case_id, "gold", "expected an object")
    _check_unknown_fields(raw, _GOLD_FIELDS, case_id, "gold", strict)

    relevance = {}
    for key, label in (raw.get("relevance") or {}).items():
        try:
            sid = int(key)
        except (TypeError, ValueError):
            raise SchemaViolation(case_id, "gold.relevance", f"non-integer key {key!r}")
        if sid not in note_ids:
            raise SchemaViolation(case_id, "gold.relevance", f"unknown sentence id {sid}")
        if label not in RELEVANCE_LABELS:
            raise SchemaViolation(case_id, "gold.relevance", f"bad label {label!r}")
        relevance[sid] = label

    alignment = None
    if raw.get("gold_alignment") is not None:
        if not isinstance(raw["gold_alignment"], dict):
            raise SchemaViolation(case_id, "gold.gold_alignment", "expected an object")
        alignment = {}
        for key, ids in raw["gold_alignment"].items():
            try:
                idx = int(key)
            except (TypeError, ValueError):
                raise SchemaViolation(case_id, "gold.gold_alignment", f"non-integer key {key!r}")
            if idx < 1:
                raise SchemaViolation(case_id, "gold.gold_alignment", f"bad answer index {idx}")
            if not isinstance(ids, list) or any(
                not isinstance(i, int) or isinstance(i, bool) for i in ids
            ):
                raise SchemaViolation(case_id, "gold.gold_alignment", "ids must be an integer list")
            bad = [i for i in ids if i not in note_ids]
            if bad:
                raise SchemaViolation(case_id, "gold.gold_alignment", f"unknown sentence ids {bad}")
            alignment[idx] = sorted(set(ids))
        if sorted(alignment) != list(range(1, len(alignment) + 1)):
            raise SchemaViolation(case_id, "gold.gold_alignment", "answer indices must be 1..m")

    gold_query = raw.get("gold_query")
    if gold_query is not None and not isinstance(gold_query, str):
        raise SchemaViolation(case_id, "gold.gold_query", "expected a string")

    return GoldAnnotations(relevance=relevance, gold_alignment=alignment, gold_query=gold_query)


def load_corpus(path, strict=True):
    """Load and validate every case; returns them in file order."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(None, "file", f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("cases"), list):
        raise SchemaViolation(None, "file", 'top level must be {"cases": [...]}')
    _check_unknown_fields(doc, {"cases"}, None, "document", strict)

    cases = []
    seen = set()
    for raw in doc["cases"]:
        if not isinstance(raw, dict):
            raise SchemaViolation(None, "case", "case entries must be objects")
        case_id = raw.get("case_id")
        if not isinstance(case_id, str) or not case_id:
            raise SchemaViolation(case_id, "case_id", "missing or empty")
        if case_id in seen:
            raise DuplicateCaseId(case_id)
        seen.add(case_id)
        _check_unknown_fields(raw, _CASE_FIELDS, case_id, "case", strict)

        patient_q = raw.get("patient_question")
        if not isinstance(patient_q, str) or not patient_q.strip():
            raise SchemaViolation(case_id, "patient_question", "missing or empty")
        clinician_q = raw.get("clinician_question")
        if clinician_q is not None:
            if not isinstance(clinician_q, str) or not clinician_q.strip():
                raise SchemaViolation(case_id, "clinician_question", "present but empty")
            clinician_q = _normalize(clinician_q)

        sentences = _parse_sentences(raw.get("sentences", []), case_id, strict)
        note_ids = {s.id for s in sentences}
        gold = _parse_gold(raw.get("gold"), note_ids, case_id, strict)

        cases.append(
            CaseRecord(
                case_id=case_id,
                patient_question=_normalize(patient_q),
                clinician_question=clinician_q,
                note=sentences,
                gold=gold,
            )
        )
    return cases


def tag_note(case: CaseRecord, scheme: TagScheme) -> str:
    """Render the note with one tagged sentence per line, in id order."""
    if scheme is TagScheme.NOTE_PREFIXED:
        return "\n".join(f"[N{s.id}] {s.text}" for s in case.note)
    return "\n".join(f"[{s.id}] {s.text}" for s in case.note)


def split_answer(answer_text: str):
    """Segment an answer at . ! ? followed by whitespace or end of text.

    The terminator stays with its sentence. Fragments that are empty after
    trimming are dropped and surviving sentences are indexed 1..m.
    """
    if not answer_text or not answer_text.strip():
        raise EmptyAnswer("answer text is empty")
    pieces = []
    start = 0
    for i, ch in enumerate(answer_text):
        if ch in _TERMINATORS:
            if i + 1 == len(answer_text) or answer_text[i + 1].isspace():
                pieces.append(answer_text[start:i + 1])
                start = i + 1
    pieces.append(answer_text[start:])
    texts = [p.strip() for p in pieces if p.strip()]
    return [AnswerSentence(index=i, text=t) for i, t in enumerate(texts, start=1)]
