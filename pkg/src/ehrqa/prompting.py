"""Prompt template registry and payload rendering.

Templates live as JSON fixture files, one per file, and are loaded into a
write-once registry. The user_template string may use five placeholders:

    {patient_question} {clinician_question} {numbered_note}
    {answer_sentences} {shots}

Anything else in braces is literal text and passes through untouched, so
instructions like {"query": "..."} are safe to include in template bodies.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .corpus import CaseRecord, TagScheme, tag_note
from .errors import (
    DuplicateTemplateId,
    InvalidTemplate,
    MissingAnswer,
    MissingClinicianQuestion,
    UnknownTemplateId,
    UnresolvedPlaceholder,
)


class Subtask(enum.Enum):
    Q1 = "Q1"
    Q2 = "Q2"
    Q3 = "Q3"
    Q4 = "Q4"


class Strategy(enum.Enum):
    DIRECT_CONSTRAINED = "direct_constrained"
    LEXICAL_CONSTRAINED = "lexical_constrained"
    FEW_SHOT = "few_shot"
    VERBATIM_EXTRACTION = "verbatim_extraction"
    STRUCTURAL_RULES = "structural_rules"
    EXTRACT_THEN_GENERATE = "extract_then_generate"
    SENTENCE_LEVEL_CLASSIFICATION = "sentence_level_classification"
    CASE_LEVEL_SELECTION = "case_level_selection"
    CHAIN_OF_THOUGHT = "chain_of_thought"
    PRECISION_ORIENTED = "precision_oriented"
    RECALL_ORIENTED = "recall_oriented"
    MULTI_SHOT = "multi_shot"
    ZERO_SHOT_ABSTRACTIVE = "zero_shot_abstractive"
    IMPLICIT_COT = "implicit_cot"
    PERSONA_NEGATIVE = "persona_negative"
    ZERO_SHOT_ALIGNMENT = "zero_shot_alignment"
    PROGRESSIVE_FEW_SHOT = "progressive_few_shot"


# strategies whose whole point is in-context examples
_SHOT_REQUIRED = {
    Strategy.FEW_SHOT,
    Strategy.MULTI_SHOT,
    Strategy.PROGRESSIVE_FEW_SHOT,
}
# may carry shots but does not have to
_SHOT_OPTIONAL = {Strategy.EXTRACT_THEN_GENERATE}

PLACEHOLDERS = (
    "patient_question",
    "clinician_question",
    "numbered_note",
    "answer_sentences",
    "shots",
)
_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")


@dataclass(frozen=True)
class Shot:
    """One worked example: rendered input text plus the expected reply."""

    input: str
    expected: str


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    subtask: Subtask
    strategy: Strategy
    system_text: str
    user_template: str
    shots: tuple = ()
    tag_scheme: TagScheme = TagScheme.BRACKET_NUMERIC
    requires_clinician_question: bool = False

    def __post_init__(self):
        used = set(_PLACEHOLDER_RE.findall(self.user_template))
        if self.shots and "shots" not in used:
            raise InvalidTemplate(f"{self.template_id}: shots supplied but no {{shots}} slot")
        if "shots" in used and not self.shots:
            raise InvalidTemplate(f"{self.template_id}: {{shots}} slot but no shots")
        needs_shots = self.strategy in _SHOT_REQUIRED
        if needs_shots and not self.shots:
            raise InvalidTemplate(f"{self.template_id}: strategy {self.strategy.value} requires shots")
        if self.shots and not needs_shots and self.strategy not in _SHOT_OPTIONAL:
            raise InvalidTemplate(f"{self.template_id}: strategy {self.strategy.value} must not carry shots")
        if "clinician_question" in used and not self.requires_clinician_question:
            raise InvalidTemplate(
                f"{self.template_id}: uses {{clinician_question}} without declaring the requirement"
            )

    def placeholders(self):
        return set(_PLACEHOLDER_RE.findall(self.user_template))


@dataclass(frozen=True)
class PromptPayload:
    system: str
    user: str


def render_answer_sentences(sentences) -> str:
    return "\n".join(f"[S{s.index}] {s.text}" for s in sentences)


def render_shots(shots) -> str:
    blocks = []
    for i, shot in enumerate(shots, start=1):
        blocks.append(f"Example {i}:\n{shot.input}\nExpected output:\n{shot.expected}")
    return "\n\n".join(blocks)


def render(template: PromptTemplate, case: CaseRecord, answer=None) -> PromptPayload:
    """Substitute the live case into the template.

    answer is the list of AnswerSentence to align and is only meaningful
    for templates that use the {answer_sentences} slot.
    """
    used = template.placeholders()
    values = {}
    if "patient_question" in used:
        values["patient_question"] = case.patient_question
    if "clinician_question" in used or template.requires_clinician_question:
        if not case.clinician_question:
            raise MissingClinicianQuestion(case.case_id)
        values["clinician_question"] = case.clinician_question
    if "numbered_note" in used:
        values["numbered_note"] = tag_note(case, template.tag_scheme)
    if "answer_sentences" in used:
        if not answer:
            raise MissingAnswer(case.case_id)
        values["answer_sentences"] = render_answer_sentences(answer)
    if "shots" in used:
        values["shots"] = render_shots(template.shots)

    user = _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template.user_template)
    leftover = _PLACEHOLDER_RE.search(user)
    if leftover:
        # a substituted value smuggled a placeholder token back in
        raise UnresolvedPlaceholder(leftover.group(0))
    return PromptPayload(system=template.system_text, user=user)


class TemplateRegistry:
    """Keyed template store preserving registration order."""

    def __init__(self):
        self._templates = {}

    def register(self, template: PromptTemplate):
        if template.template_id in self._templates:
            raise DuplicateTemplateId(template.template_id)
        self._templates[template.template_id] = template

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise UnknownTemplateId(template_id) from None

    def list(self, subtask: Optional[Subtask] = None):
        if subtask is None:
            return list(self._templates.values())
        return [t for t in self._templates.values() if t.subtask is subtask]

    def __len__(self):
        return len(self._templates)

    def __contains__(self, template_id):
        return template_id in self._templates


def template_from_dict(doc: dict) -> PromptTemplate:
    try:
        shots = tuple(Shot(input=s["input"], expected=s["expected"]) for s in doc.get("shots", []))
        return PromptTemplate(
            template_id=doc["template_id"],
            subtask=Subtask(doc["subtask"]),
            strategy=Strategy(doc["strategy"]),
            system_text=doc["system_text"],
            user_template=doc["user_template"],
            shots=shots,
            tag_scheme=TagScheme(doc.get("tag_scheme", "bracket_numeric")),
            requires_clinician_question=bool(doc.get("requires_clinician_question", False)),
        )
    except (KeyError, ValueError) as exc:
        raise InvalidTemplate(f"bad template document: {exc}") from exc


def _natural_key(path: Path):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", path.stem)]


def load_templates(directory) -> TemplateRegistry:
    """Load every *.json template in the directory, in natural name order,
    so s1-p10 registers after s1-p9 rather than after s1-p1."""
    registry = TemplateRegistry()
    paths = sorted(Path(directory).glob("*.json"), key=_natural_key)
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        registry.register(template_from_dict(doc))
    return registry


def template_digests(directory) -> dict:
    """template_id to sha256 of its fixture file, for run manifests."""
    import hashlib

    digests = {}
    for path in sorted(Path(directory).glob("*.json"), key=_natural_key):
        data = path.read_bytes()
        doc = json.loads(data)
        digests[doc["template_id"]] = hashlib.sha256(data).hexdigest()
    return digests
