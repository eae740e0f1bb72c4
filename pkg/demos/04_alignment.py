"""Tie each answer sentence back to the note sentences that support it.

The alignment step takes a finished answer, asks the model for a map
from answer-sentence index to note-sentence ids, and optionally makes a
second pass for any sentence the first reply left uncited. Second-pass
citations never override first-pass ones; they only fill gaps. The demo
aligns the reference answers, shows the fill-only merge rule on a small
explicit example, and scores the maps against the annotated gold.

    python3 demos/04_alignment.py
"""

from __future__ import annotations

import json
from importlib.resources import files

from ehrqa.backend import MockBackend
from ehrqa.corpus import load_corpus
from ehrqa.evaluation import alignment_micro_f1
from ehrqa.pipeline import RunConfig, merge_alignment_passes, run_subtask4
from ehrqa.prompting import load_templates
from ehrqa.structured import AlignmentMap, GeneratedAnswer

CORPUS = str(files("ehrqa").joinpath("data/fixture_corpus.json"))
TEMPLATES = str(files("ehrqa").joinpath("templates"))
REFERENCES = str(files("ehrqa").joinpath("data/q3_references.json"))


def load_reference_answers():
    with open(REFERENCES, encoding="utf-8") as fh:
        doc = json.load(fh)
    return {row["case_id"]: row["references"][0] for row in doc["cases"]}


def main():
    cases = load_corpus(CORPUS)
    registry = load_templates(TEMPLATES)
    answers = load_reference_answers()
    backend = MockBackend()

    config = RunConfig(model_id="demo-model", template_id="s4-p2",
                       two_pass=True)

    predictions = {}
    for case in cases:
        answer = GeneratedAnswer.from_text(answers[case.case_id])
        result = run_subtask4(case, answer, config, backend, registry)
        if not result.outcome.ok:
            print(f"{case.case_id}: failed "
                  f"({result.outcome.failure_kind.value})")
            predictions[case.case_id] = None
            continue
        predictions[case.case_id] = result.outcome.value
        second = "two passes" if result.raw_text_pass2 else "one pass"
        print(f"{case.case_id} ({second}):")
        for idx in sorted(result.outcome.value.entries):
            cited = result.outcome.value.entries[idx]
            print(f"  answer sentence {idx} <- note sentences {cited}")
    print()

    # the merge rule on its own: pass 2 fills gaps, never overrides
    pass1 = {1: [2], 2: [], 3: [7]}
    pass2 = {1: [9], 2: [5]}
    print(f"pass 1: {pass1}")
    print(f"pass 2: {pass2}")
    print(f"merged: {merge_alignment_passes(pass1, pass2)}")
    print()

    gold = {c.case_id: AlignmentMap(entries=c.gold.gold_alignment)
            for c in cases}
    prf = alignment_micro_f1(predictions, gold)
    print(f"alignment micro-F1 {prf.f1:.3f} "
          f"(tp={prf.tp} fp={prf.fp} fn={prf.fn})")


if __name__ == "__main__":
    main()
