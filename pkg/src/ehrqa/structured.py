"""Pull each subtask's structured contract out of raw model text.

Parsing is deliberately unforgiving: fenced blocks are stripped and the
first balanced JSON value is scanned out of surrounding prose, but there
is no quote fixing, comma healing, or other repair. A reply we cannot
parse is a model failure worth measuring, not something to paper over.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Optional

from .corpus import split_answer
from .errors import EmptyAnswer

QUERY_WORD_LIMIT = 15
ANSWER_WORD_LIMIT = 75

_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*\s*\n(.*?)```", re.DOTALL)


class FailureKind(enum.Enum):
    UNPARSEABLE = "unparseable"
    SCHEMA_MISMATCH = "schema_mismatch"
    RANGE_VIOLATION = "range_violation"
    MISSING_ENTRIES = "missing_entries"
    EMPTY_ANSWER = "empty_answer"
    # runner-level failures recorded through the same outcome channel
    MISSING_CLINICIAN_QUESTION = "missing_clinician_question"
    MISSING_ANSWER = "missing_answer"
    BACKEND_ERROR = "backend_error"


@dataclass(frozen=True)
class ParseOutcome:
    """Either a parsed value or a classified failure, never both."""

    value: object = None
    failure_kind: Optional[FailureKind] = None
    detail: Optional[str] = None
    warnings: tuple = ()

    def __post_init__(self):
        if (self.value is None) == (self.failure_kind is None):
            raise ValueError("exactly one of value/failure_kind must be set")

    @property
    def ok(self) -> bool:
        return self.failure_kind is None

    @classmethod
    def success(cls, value, warnings=()):
        return cls(value=value, warnings=tuple(warnings))

    @classmethod
    def failure(cls, kind: FailureKind, detail=None, warnings=()):
        return cls(failure_kind=kind, detail=detail, warnings=tuple(warnings))


@dataclass(frozen=True)
class ClinicalQuery:
    query: str
    word_count: int
    length_violation: bool


@dataclass(frozen=True)
class EvidenceSelection:
    """Sorted, deduplicated note-sentence ids."""

    sentence_ids: tuple

    def __post_init__(self):
        ids = tuple(self.sentence_ids)
        if list(ids) != sorted(set(ids)):
            raise ValueError("sentence_ids must be sorted and unique")
        object.__setattr__(self, "sentence_ids", ids)


@dataclass(frozen=True)
class GeneratedAnswer:
    text: str
    sentences: tuple
    word_count: int
    length_violation: bool

    @classmethod
    def from_text(cls, text: str):
        sentences = tuple(split_answer(text))
        count = word_count(text)
        return cls(
            text=text.strip(),
            sentences=sentences,
            word_count=count,
            length_violation=count > ANSWER_WORD_LIMIT,
        )


@dataclass(frozen=True)
class AlignmentMap:
    """Answer-sentence index to the note-sentence ids that support it."""

    entries: dict = field(default_factory=dict)

    def links(self):
        """Flatten to (answer index, note id) pairs."""
        return [(idx, sid) for idx, ids in self.entries.items() for sid in ids]


def word_count(text: str) -> int:
    # maximal non-whitespace runs, which is exactly what str.split gives
    return len(text.split())


def make_query(text: str) -> ClinicalQuery:
    count = word_count(text)
    return ClinicalQuery(query=text, word_count=count, length_violation=count > QUERY_WORD_LIMIT)


def strip_fence(text: str) -> str:
    """If the whole reply is one fenced block, return its contents."""
    stripped = text.strip()
    match = _FENCE_RE.fullmatch(stripped)
    if match:
        return match.group(1).strip()
    return stripped


def _scan_balanced(text: str):
    """Yield each balanced top-level {...} or [...] slice, left to right."""
    openers = {"{": "}", "[": "]"}
    i = 0
    while i < len(text):
        ch = text[i]
        if ch not in openers:
            i += 1
            continue
        depth = 0
        in_string = False
        escaped = False
        for j in range(i, len(text)):
            cj = text[j]
            if in_string:
                if escaped:
                    escaped = False
                elif cj == "\\":
                    escaped = True
                elif cj == '"':
                    in_string = False
                continue
            if cj == '"':
                in_string = True
            elif cj in "{[":
                depth += 1
            elif cj in "}]":
                depth -= 1
                if depth == 0:
                    yield text[i:j + 1]
                    break
        i += 1


def extract_json(text: str):
    """Best-effort extraction of one JSON value from a model reply.

    Fenced block contents are tried first, then a left-to-right scan for
    the first balanced object or array that the json module accepts.
    Returns None when nothing parses.
    """
    candidates = [m.group(1) for m in _FENCE_RE.finditer(text)]
    candidates.append(text)
    for candidate in candidates:
        stripped = candidate.strip()
        if not stripped:
            continue
        try:
            return json.loads(stripped)
        except json.JSONDecodeError:
            pass
        for blob in _scan_balanced(stripped):
            try:
                return json.loads(blob)
            except json.JSONDecodeError:
                continue
    return None


def parse_query(value) -> ParseOutcome:
    """Validate the single-field query object. Violations are flagged,
    never repaired; the query text is left exactly as the model wrote it."""
    if not isinstance(value, dict):
        return ParseOutcome.failure(FailureKind.SCHEMA_MISMATCH, "expected a JSON object")
    query = value.get("query")
    if not isinstance(query, str):
        return ParseOutcome.failure(FailureKind.SCHEMA_MISMATCH, 'missing string field "query"')
    return ParseOutcome.success(make_query(query))


_EVIDENCE_KEYS = ("sentence_ids", "ids", "sentences", "evidence", "selected")


def parse_evidence(value, n: int) -> ParseOutcome:
    """Accept an id array, bare or under one conventional wrapper key."""
    ids = value
    if isinstance(value, dict):
        ids = None
        for key in _EVIDENCE_KEYS:
            if isinstance(value.get(key), list):
                ids = value[key]
                break
        if ids is None and len(value) == 1:
            sole = next(iter(value.values()))
            if isinstance(sole, list):
                ids = sole
        if ids is None:
            return ParseOutcome.failure(
                FailureKind.SCHEMA_MISMATCH, "no id list found in object"
            )
    if not isinstance(ids, list):
        return ParseOutcome.failure(FailureKind.SCHEMA_MISMATCH, "expected an id array")
    out = []
    for item in ids:
        if not isinstance(item, int) or isinstance(item, bool):
            return ParseOutcome.failure(
                FailureKind.SCHEMA_MISMATCH, f"non-integer element {item!r}"
            )
        if item < 1 or item > n:
            return ParseOutcome.failure(
                FailureKind.RANGE_VIOLATION, f"id {item} outside 1..{n}"
            )
        out.append(item)
    return ParseOutcome.success(EvidenceSelection(sentence_ids=tuple(sorted(set(out)))))


_KEY_RE = re.compile(r"^[sS]?(\d+)$")
_ID_RE = re.compile(r"^[nN]?(\d+)$")


def _parse_link_ids(raw, n):
    """Normalize one entry's citation list; ids may be ints or 'N3' strings."""
    if not isinstance(raw, list):
        return None, ParseOutcome.failure(FailureKind.SCHEMA_MISMATCH, "entry value must be a list")
    ids = []
    for item in raw:
        if isinstance(item, int) and not isinstance(item, bool):
            sid = item
        elif isinstance(item, str) and _ID_RE.match(item.strip()):
            sid = int(_ID_RE.match(item.strip()).group(1))
        else:
            return None, ParseOutcome.failure(
                FailureKind.SCHEMA_MISMATCH, f"bad citation {item!r}"
            )
        if sid < 1 or sid > n:
            return None, ParseOutcome.failure(
                FailureKind.RANGE_VIOLATION, f"cited id {sid} outside 1..{n}"
            )
        ids.append(sid)
    return sorted(set(ids)), None


def parse_alignment_entries(value, expected_indices, n: int, mode: str) -> ParseOutcome:
    """Shared core for full and follow-up alignment replies.

    expected_indices is the exact set of answer-sentence indices the reply
    must cover. In strict mode a missing index fails the parse; lenient
    mode fills it with an empty list and records a warning.
    """
    if isinstance(value, dict) and len(value) == 1:
        sole_key = next(iter(value))
        sole_val = value[sole_key]
        # unwrap {"alignment": {...}} style nesting exactly once
        if isinstance(sole_val, dict) and not _KEY_RE.match(str(sole_key).strip()):
            value = sole_val
    if not isinstance(value, dict):
        return ParseOutcome.failure(FailureKind.SCHEMA_MISMATCH, "expected a JSON object")

    expected = set(expected_indices)
    entries = {}
    warnings = []
    for key, raw_ids in value.items():
        match = _KEY_RE.match(str(key).strip())
        if not match:
            return ParseOutcome.failure(FailureKind.SCHEMA_MISMATCH, f"bad key {key!r}")
        idx = int(match.group(1))
        if idx not in expected:
            return ParseOutcome.failure(
                FailureKind.RANGE_VIOLATION, f"unexpected answer index {idx}"
            )
        if idx in entries:
            return ParseOutcome.failure(FailureKind.SCHEMA_MISMATCH, f"duplicate key for {idx}")
        ids, fail = _parse_link_ids(raw_ids, n)
        if fail is not None:
            return fail
        entries[idx] = ids

    missing = expected - set(entries)
    if missing:
        if mode == "strict":
            return ParseOutcome.failure(
                FailureKind.MISSING_ENTRIES, f"missing entries for {sorted(missing)}"
            )
        for idx in sorted(missing):
            entries[idx] = []
        warnings.append(f"filled missing entries {sorted(missing)} with empty lists")

    ordered = {idx: entries[idx] for idx in sorted(entries)}
    return ParseOutcome.success(AlignmentMap(entries=ordered), warnings=warnings)


def parse_alignment(value, m: int, n: int, mode: str = "strict") -> ParseOutcome:
    """Parse a full alignment reply covering answer sentences 1..m."""
    return parse_alignment_entries(value, range(1, m + 1), n, mode)


def failure_record(case_id: str, kind: FailureKind, raw_text: str) -> dict:
    """Audit-friendly failure row; the raw text itself stays out of reports."""
    digest = hashlib.sha256(raw_text.encode("utf-8")).hexdigest()
    return {"case_id": case_id, "failure_kind": kind.value, "raw_text_digest": digest}
