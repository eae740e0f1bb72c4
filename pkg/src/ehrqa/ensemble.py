"""Combine outputs across model-prompt configurations.

Three mechanisms: threshold voting over evidence ids and alignment links,
judge-based selection of one best answer from a labeled candidate list,
and exhaustive subset search that picks the voter set with the best
pooled F1 on a development grid.
"""

from __future__ import annotations

import logging
import string
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations

from .backend import CompletionRequest
from .corpus import tag_note, TagScheme
from .errors import InvalidSearchSpec, InvalidThreshold, KeyMismatch, MissingGold
from .evaluation import pooled_prf
from .prompting import PromptPayload
from .structured import AlignmentMap, EvidenceSelection, extract_json

log = logging.getLogger(__name__)

# fixed wording, fixed priority order
JUDGE_CRITERIA = (
    "faithfulness",
    "medical completeness",
    "terminology retention",
    "conciseness",
)


def default_threshold(n_voters: int) -> int:
    """Strict majority: 2 of 3, 3 of 4, 3 of 5."""
    return n_voters // 2 + 1


@dataclass(frozen=True)
class VoteSpec:
    voters: tuple
    threshold: int

    def __post_init__(self):
        if len(self.voters) < 2:
            raise InvalidThreshold("need at least 2 voters")
        if not (1 <= self.threshold <= len(self.voters)):
            raise InvalidThreshold(
                f"threshold {self.threshold} out of range for {len(self.voters)} voters"
            )


def _vote_items(ballots, threshold):
    counts = Counter()
    for ballot in ballots:
        counts.update(set(ballot))
    return sorted(item for item, count in counts.items() if count >= threshold)


def vote_evidence(selections, threshold: int) -> EvidenceSelection:
    """Keep an id iff at least `threshold` of the voters selected it."""
    if not selections:
        raise InvalidThreshold("no selections to vote over")
    if not isinstance(threshold, int) or threshold < 1 or threshold > len(selections):
        raise InvalidThreshold(
            f"threshold {threshold} out of range for {len(selections)} voters"
        )
    ballots = [s.sentence_ids for s in selections]
    return EvidenceSelection(sentence_ids=tuple(_vote_items(ballots, threshold)))


def vote_alignment(maps, threshold: int) -> AlignmentMap:
    """Per-link voting; entries whose links all lose become empty lists."""
    if not maps:
        raise InvalidThreshold("no maps to vote over")
    if not isinstance(threshold, int) or threshold < 1 or threshold > len(maps):
        raise InvalidThreshold(f"threshold {threshold} out of range for {len(maps)} voters")
    keys = set(maps[0].entries)
    for amap in maps[1:]:
        if set(amap.entries) != keys:
            raise KeyMismatch(
                f"voter key sets differ: {sorted(keys)} vs {sorted(amap.entries)}"
            )
    entries = {}
    for idx in sorted(keys):
        ballots = [amap.entries[idx] for amap in maps]
        entries[idx] = _vote_items(ballots, threshold)
    return AlignmentMap(entries=entries)


@dataclass(frozen=True)
class JudgeSpec:
    """judge_config supplies the judging model and sampling overrides; its
    template_id is not consulted (the judge prompt is built here)."""

    judge_config: object
    candidate_configs: tuple
    criteria: tuple = JUDGE_CRITERIA

    def __post_init__(self):
        if tuple(self.criteria) != JUDGE_CRITERIA:
            raise ValueError("judge criteria order is fixed")


@dataclass(frozen=True)
class JudgeDecision:
    winner_index: int
    rationale: str
    fallback: bool = False


_CRITERIA_GLOSS = {
    "faithfulness": "every claim must be supported by the clinical note sentences",
    "medical completeness": "no clinically important point from the note is missing",
    "terminology retention": "key clinical terms are kept rather than replaced",
    "conciseness": "no padding beyond what the question needs",
}


def _judge_payload(case, candidates, spec) -> PromptPayload:
    lines = [f"Patient question: {case.patient_question}"]
    if case.clinician_question:
        lines.append(f"Clinician question: {case.clinician_question}")
    lines.append("Clinical note sentences:")
    lines.append(tag_note(case, TagScheme.BRACKET_NUMERIC))
    lines.append("")
    letters = string.ascii_uppercase
    for i, candidate in enumerate(candidates):
        lines.append(f"Candidate {letters[i]}:")
        lines.append(candidate.text)
        lines.append("")
    lines.append("Judge the candidates on these criteria, in strict priority order:")
    for rank, name in enumerate(spec.criteria, start=1):
        lines.append(f"{rank}. {name}: {_CRITERIA_GLOSS[name]}")
    lines.append("")
    lines.append('Reply with JSON {"choice": "<letter>"} and nothing else.')
    system = (
        "You compare candidate patient-facing answers against the clinical note "
        "and pick the single best one."
    )
    return PromptPayload(system=system, user="\n".join(lines))


def judge_select(case, candidates, spec: JudgeSpec, backend) -> JudgeDecision:
    """Pick one winner among the candidate answers.

    Any unusable judge reply falls back to the first candidate; candidate
    order therefore matters and is part of the contract.
    """
    if len(candidates) < 2:
        raise ValueError("judging needs at least 2 candidates")
    payload = _judge_payload(case, candidates, spec)
    config = spec.judge_config
    kwargs = {}
    if getattr(config, "temperature", None) is not None:
        kwargs["temperature"] = config.temperature
    if getattr(config, "top_p", None) is not None:
        kwargs["top_p"] = config.top_p
    if getattr(config, "max_tokens", None) is not None:
        kwargs["max_tokens"] = config.max_tokens
    request = CompletionRequest(model_id=config.model_id, payload=payload, **kwargs)
    result = backend.complete(request)
    value = extract_json(result.text)
    letters = string.ascii_uppercase[: len(candidates)]
    choice = value.get("choice") if isinstance(value, dict) else None
    if isinstance(choice, str) and choice.strip().upper() in letters:
        index = letters.index(choice.strip().upper())
        return JudgeDecision(winner_index=index, rationale=result.text)
    log.warning("case %s: judge reply unusable, falling back to first candidate", case.case_id)
    return JudgeDecision(winner_index=0, rationale=result.text, fallback=True)


@dataclass(frozen=True)
class EnsembleSearchResult:
    chosen: tuple
    dev_score: float
    scored_alternatives: tuple = field(default_factory=tuple)


def vote_case_items(ballots, threshold):
    """Vote over generic hashable items (ids or links) for one case."""
    return _vote_items(ballots, threshold)


def search_ensemble(selections_by_config, gold, k_max: int,
                    threshold_for=None) -> EnsembleSearchResult:
    """Try every voter subset of size 2..k_max and keep the best.

    selections_by_config: config_id -> {case_id -> iterable of items, or
    None where that voter failed the case}. gold: case_id -> iterable of
    gold items. Failed voters abstain; the threshold still comes from the
    subset size. Ties prefer the smaller subset, then the
    lexicographically smaller tuple of config ids.
    """
    if k_max < 2:
        raise InvalidSearchSpec(f"k_max must be at least 2, got {k_max}")
    if len(selections_by_config) < 2:
        raise InvalidSearchSpec("need at least 2 configs to ensemble")
    if threshold_for is None:
        threshold_for = default_threshold
    for config_id, per_case in selections_by_config.items():
        missing = set(per_case) - set(gold)
        if missing:
            raise MissingGold(f"{config_id}: no gold for cases {sorted(missing)}")

    config_ids = sorted(selections_by_config)
    scored = []
    best = None
    for size in range(2, min(k_max, len(config_ids)) + 1):
        threshold = threshold_for(size)
        for subset in combinations(config_ids, size):
            preds = {}
            for case_id in gold:
                ballots = []
                for config_id in subset:
                    items = selections_by_config[config_id].get(case_id)
                    if items is not None:
                        ballots.append(items)
                preds[case_id] = _vote_items(ballots, threshold)
            score = pooled_prf(preds, gold).f1
            scored.append((subset, score))
            rank = (-score, len(subset), subset)
            if best is None or rank < best[0]:
                best = (rank, subset, score)
    return EnsembleSearchResult(
        chosen=best[1], dev_score=best[2], scored_alternatives=tuple(scored)
    )


def vote_provenance(voters, threshold, per_voter_raw) -> dict:
    """Provenance block attached to ensemble outputs."""
    return {
        "voters": [getattr(v, "config_id", str(v)) for v in voters],
        "threshold": threshold,
        "per_voter": per_voter_raw,
    }
