"""Scoring: micro F1 over evidence and alignment links, lexical
generation metrics, composite averages, and grid reports.

Counting conventions, applied uniformly: with tp=fp=fn=0 precision,
recall, and F1 are all 1.0 (perfect agreement on nothing); when only one
ratio's denominator is 0 that ratio is 0.0; F1 is the harmonic mean and
0 when precision+recall is 0.

All lexical metrics share one tokenizer: lowercase, punctuation characters
dropped in place, whitespace split. Cross-metric consistency matters more
here than bug-for-bug fidelity to any historical script.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import subprocess
import tempfile
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .corpus import split_answer
from .errors import EmptyAnswer, EmptySubset, EmptyText, KeyMismatch, MissingGold

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# precision / recall / F1

@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "PRF":
        if tp == 0 and fp == 0 and fn == 0:
            return cls(1.0, 1.0, 1.0, 0, 0, 0)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(precision, recall, f1, tp, fp, fn)

    def to_dict(self):
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
        }


def pooled_prf(preds: dict, gold: dict) -> PRF:
    """Micro-pooled PRF over per-case item sets.

    preds values may be None (a failed case predicts nothing). Cases are
    pooled before the ratios are taken, so one empty case cannot dominate.
    """
    tp = fp = fn = 0
    for case_id, gold_items in gold.items():
        gold_set = set(gold_items)
        pred_set = set(preds.get(case_id) or ())
        tp += len(pred_set & gold_set)
        fp += len(pred_set - gold_set)
        fn += len(gold_set - pred_set)
    return PRF.from_counts(tp, fp, fn)


def gold_positives(annotations, mode: str = "strict"):
    """Note-sentence ids that count as relevant under the given mode."""
    wanted = {"essential"} if mode == "strict" else {"essential", "supplementary"}
    return {sid for sid, label in annotations.relevance.items() if label in wanted}


def strict_micro_f1(preds: dict, gold: dict, mode: str = "strict") -> PRF:
    """Evidence selection F1. preds: case_id -> EvidenceSelection or None;
    gold: case_id -> GoldAnnotations."""
    for case_id in preds:
        if case_id not in gold:
            raise MissingGold(case_id)
    gold_sets = {}
    pred_sets = {}
    for case_id, selection in preds.items():
        gold_sets[case_id] = gold_positives(gold[case_id], mode)
        pred_sets[case_id] = None if selection is None else set(selection.sentence_ids)
    return pooled_prf(pred_sets, gold_sets)


def alignment_micro_f1(preds: dict, gold: dict) -> PRF:
    """Link-level F1 over (case, answer index, note id) triples.

    A non-failed prediction must cover exactly the gold key set; a None
    prediction contributes only false negatives.
    """
    for case_id in preds:
        if case_id not in gold:
            raise MissingGold(case_id)
    gold_links = {}
    pred_links = {}
    for case_id, amap in preds.items():
        gold_map = gold[case_id]
        gold_links[case_id] = set(gold_map.links())
        if amap is None:
            pred_links[case_id] = None
            continue
        if set(amap.entries) != set(gold_map.entries):
            raise KeyMismatch(
                f"case {case_id}: predicted keys {sorted(amap.entries)} "
                f"vs gold {sorted(gold_map.entries)}"
            )
        pred_links[case_id] = set(amap.links())
    return pooled_prf(pred_links, gold_links)


# ---------------------------------------------------------------------------
# shared lexical plumbing

def tokenize(text: str):
    """Lowercased alnum runs; punctuation vanishes without splitting."""
    cleaned = "".join(
        ch.lower() if ch.isalnum() else (" " if ch.isspace() else "")
        for ch in text
    )
    return cleaned.split()


def _sentences(text: str):
    try:
        parts = split_answer(text)
    except EmptyAnswer:
        return []
    return [tokenize(s.text) for s in parts if tokenize(s.text)]


def _require_text(name, text):
    if not isinstance(text, str) or not text.strip():
        raise EmptyText(f"{name} is empty")


def _fmeasure(hits: int, n_candidate: int, n_reference: int) -> float:
    if n_candidate == 0 or n_reference == 0:
        return 0.0
    precision = hits / n_candidate
    recall = hits / n_reference
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _lcs_table(a, b):
    # suffix lengths: table[i][j] = LCS of a[i:], b[j:]
    rows = len(a)
    cols = len(b)
    table = [[0] * (cols + 1) for _ in range(rows + 1)]
    for i in range(rows - 1, -1, -1):
        for j in range(cols - 1, -1, -1):
            if a[i] == b[j]:
                table[i][j] = table[i + 1][j + 1] + 1
            else:
                table[i][j] = max(table[i + 1][j], table[i][j + 1])
    return table


def lcs_positions(a, b):
    """Positions in `a` of one maximal common subsequence with `b`,
    canonicalized to the leftmost (lexicographically smallest) choice."""
    table = _lcs_table(a, b)
    positions = []
    i = j = 0
    remaining = table[0][0]
    while remaining > 0:
        # smallest usable match of a[i] at or after j, else skip a[i]
        jj = None
        for x in range(j, len(b)):
            if b[x] == a[i]:
                jj = x
                break
        if jj is not None and table[i + 1][jj + 1] >= remaining - 1:
            positions.append(i)
            i += 1
            j = jj + 1
            remaining -= 1
        else:
            i += 1
    return positions


def rouge_l(candidate: str, reference: str) -> float:
    """Whole-text LCS F-measure."""
    _require_text("candidate", candidate)
    _require_text("reference", reference)
    c = tokenize(candidate)
    r = tokenize(reference)
    if not c or not r:
        return 0.0
    return _fmeasure(len(lcs_positions(r, c)), len(c), len(r))


def rouge_lsum(candidate: str, reference: str) -> float:
    """Summary-level LCS: per reference sentence, the union of LCS match
    positions against every candidate sentence, hit-clipped on both sides
    so repeated tokens cannot be double counted."""
    _require_text("candidate", candidate)
    _require_text("reference", reference)
    ref_sents = _sentences(reference)
    can_sents = _sentences(candidate)
    m = sum(len(s) for s in ref_sents)
    n = sum(len(s) for s in can_sents)
    if m == 0 or n == 0:
        return 0.0
    ref_budget = Counter()
    can_budget = Counter()
    for s in ref_sents:
        ref_budget.update(s)
    for s in can_sents:
        can_budget.update(s)
    hits = 0
    for ref_sent in ref_sents:
        union = set()
        for can_sent in can_sents:
            union.update(lcs_positions(ref_sent, can_sent))
        for pos in sorted(union):
            token = ref_sent[pos]
            if ref_budget[token] > 0 and can_budget[token] > 0:
                hits += 1
                ref_budget[token] -= 1
                can_budget[token] -= 1
    return _fmeasure(hits, n, m)


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, references) -> float:
    """BLEU-4. Unigram precision is unsmoothed so zero overlap scores 0;
    orders 2..4 get add-one smoothing; brevity penalty uses the closest
    reference length with ties to the shorter."""
    _require_text("candidate", candidate)
    if not references:
        raise EmptyText("no references")
    for ref in references:
        _require_text("reference", ref)
    c = tokenize(candidate)
    refs = [tokenize(r) for r in references]

    precisions = []
    for n in range(1, 5):
        cand_counts = _ngram_counts(c, n)
        ref_counts = [_ngram_counts(ref, n) for ref in refs]
        matched = 0
        for gram, count in cand_counts.items():
            matched += min(count, max(rc[gram] for rc in ref_counts))
        total = sum(cand_counts.values())
        if n == 1:
            if total == 0 or matched == 0:
                return 0.0
            precisions.append(matched / total)
        else:
            precisions.append((matched + 1) / (total + 1))

    c_len = len(c)
    r_len = None
    for ref in refs:
        length = len(ref)
        if r_len is None:
            r_len = length
        elif abs(length - c_len) < abs(r_len - c_len):
            r_len = length
        elif abs(length - c_len) == abs(r_len - c_len) and length < r_len:
            r_len = length
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)

    product = precisions[0] * precisions[1] * precisions[2] * precisions[3]
    if product == 1.0 and bp == 1.0:
        return 1.0
    return bp * product ** 0.25


def _scaled_counter(counter, factor):
    return Counter({gram: count * factor for gram, count in counter.items()})


def _sari_components(src_counts, cand_counts, ref_counts_list, numref):
    """keep F1, delete precision, add F1 for one n-gram order.

    Source and candidate counts are scaled by the reference count so a
    gram kept by every reference is fully credited; empty denominators
    score 1.0 so an exact match cannot be punished for having nothing to
    add or delete.
    """
    ref_all = Counter()
    for counts in ref_counts_list:
        ref_all.update(counts)
    s_rep = _scaled_counter(src_counts, numref)
    c_rep = _scaled_counter(cand_counts, numref)

    keep = s_rep & c_rep
    keep_good = keep & ref_all
    keep_all = s_rep & ref_all
    keep_p = 1.0
    keep_r = 1.0
    if keep:
        keep_p = sum(keep_good[g] / keep[g] for g in keep_good) / len(keep)
    if sum(keep_all.values()) > 0:
        keep_r = sum(keep_good.values()) / sum(keep_all.values())
    keep_f = 0.0
    if keep_p + keep_r > 0:
        keep_f = 2 * keep_p * keep_r / (keep_p + keep_r)

    deleted = s_rep - c_rep
    deleted_good = deleted - ref_all
    delete_p = 1.0
    if deleted:
        delete_p = sum(deleted_good[g] / deleted[g] for g in deleted_good) / len(deleted)

    added = set(cand_counts) - set(src_counts)
    added_good = added & set(ref_all)
    added_all = set(ref_all) - set(src_counts)
    add_p = 1.0
    add_r = 1.0
    if added:
        add_p = len(added_good) / len(added)
    if added_all:
        add_r = len(added_good) / len(added_all)
    add_f = 0.0
    if add_p + add_r > 0:
        add_f = 2 * add_p * add_r / (add_p + add_r)

    return keep_f, delete_p, add_f


def sari(source: str, candidate: str, references) -> float:
    """Mean of keep-F1, delete-precision, and add-F1 over orders 1..4."""
    _require_text("source", source)
    _require_text("candidate", candidate)
    if not references:
        raise EmptyText("no references")
    for ref in references:
        _require_text("reference", ref)
    src = tokenize(source)
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    numref = len(refs)
    keep_sum = delete_sum = add_sum = 0.0
    for n in range(1, 5):
        keep_f, delete_p, add_f = _sari_components(
            _ngram_counts(src, n),
            _ngram_counts(cand, n),
            [_ngram_counts(ref, n) for ref in refs],
            numref,
        )
        keep_sum += keep_f
        delete_sum += delete_p
        add_sum += add_f
    return (keep_sum / 4 + delete_sum / 4 + add_sum / 4) / 3


# ---------------------------------------------------------------------------
# composites and reports

@dataclass(frozen=True)
class MetricReport:
    scores: dict
    composite: float = None
    notes: tuple = ()

    def scaled(self):
        """Scores on the 0-100 reporting convention."""
        out = {name: round(value * 100, 1) for name, value in self.scores.items()}
        if self.composite is not None:
            out["composite"] = round(self.composite * 100, 1)
        return out


def composite(scores: dict, subset) -> MetricReport:
    """Arithmetic mean over the named metrics; names without a score are
    excluded with a note rather than failing the report."""
    available = {}
    notes = []
    for name in subset:
        if name in scores:
            available[name] = scores[name]
        else:
            notes.append(f"metric {name} unavailable, excluded from composite")
    if not available:
        raise EmptySubset("no requested metric is available")
    mean = sum(available.values()) / len(available)
    return MetricReport(scores=dict(available), composite=mean, notes=tuple(notes))


@dataclass(frozen=True)
class GridReport:
    subtask: str
    metric: str
    templates: list
    models: list
    values: list  # row-major, templates x models

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["template"] + list(self.models))
        for template_id, row in zip(self.templates, self.values):
            writer.writerow([template_id] +
                            ["" if v is None else f"{v * 100:.1f}" for v in row])
        return buf.getvalue()


def report_grid(grid, scorer, metric_name: str) -> GridReport:
    """Score every cell of a run grid with `scorer(results) -> float`.

    Combinations that were never run stay None and render as blank
    CSV cells, so they cannot be mistaken for a zero score.
    """
    values = []
    for template_id in grid.templates:
        row = []
        for model_id in grid.models:
            results = grid.cells.get((model_id, template_id))
            row.append(scorer(results) if results is not None else None)
        values.append(row)
    return GridReport(
        subtask=grid.subtask.value,
        metric=metric_name,
        templates=list(grid.templates),
        models=list(grid.models),
        values=values,
    )


def generation_scores(answers: dict, references: dict, sources: dict):
    """Corpus-level means of the lexical metrics over per-case scores.

    answers: case_id -> GeneratedAnswer or None. A failed case scores 0
    on every metric. references: case_id -> list of reference strings.
    sources: case_id -> source string for the rewrite metric.
    """
    if not references:
        raise MissingGold("no reference answers")
    sums = {"rouge_lsum": 0.0, "bleu": 0.0, "sari": 0.0}
    for case_id, refs in references.items():
        answer = answers.get(case_id)
        if answer is None or not refs:
            continue
        text = answer.text
        sums["rouge_lsum"] += rouge_lsum(text, refs[0])
        sums["bleu"] += bleu(text, refs)
        sums["sari"] += sari(sources[case_id], text, refs)
    count = len(references)
    return {name: total / count for name, total in sums.items()}


# ---------------------------------------------------------------------------
# external plugin metrics (heavyweight scorers run out of process)

def plugin_scores(command, pairs, timeout_s: float = 600.0):
    """Run an external scorer over candidate/reference/source triples.

    The exchange is two JSON files: we write {"pairs": [...]}, invoke
    `command <in> <out>`, and read {"scores": [...]} back. Returns None
    (with a log line) when the plugin is missing or misbehaves, so an
    absent heavyweight metric degrades to a composite note instead of an
    error.
    """
    with tempfile.TemporaryDirectory(prefix="ehrqa-plugin-") as tmp:
        in_path = Path(tmp) / "pairs.json"
        out_path = Path(tmp) / "scores.json"
        in_path.write_text(json.dumps({"pairs": pairs}), encoding="utf-8")
        try:
            proc = subprocess.run(
                list(command) + [str(in_path), str(out_path)],
                capture_output=True, timeout=timeout_s,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            log.warning("plugin %s unavailable: %s", command, exc)
            return None
        if proc.returncode != 0:
            log.warning("plugin %s failed rc=%d: %s", command, proc.returncode,
                        proc.stderr.decode("utf-8", "replace")[:500])
            return None
        try:
            doc = json.loads(out_path.read_text(encoding="utf-8"))
            scores = doc["scores"]
        except (OSError, ValueError, KeyError) as exc:
            log.warning("plugin %s wrote unusable output: %s", command, exc)
            return None
        if not isinstance(scores, list) or len(scores) != len(pairs):
            log.warning("plugin %s returned %s scores for %d pairs",
                        command, len(scores) if isinstance(scores, list) else "?", len(pairs))
            return None
        return [float(s) for s in scores]
