"""Walk one case through evidence selection, end to end.

Loads the packaged five-case corpus, renders a prompt for a single case,
sends it to the offline mock backend, and scores the parsed selection
against the gold relevance labels.

Run from the repository root after installing the package:

    python3 demos/01_walkthrough.py
"""

from __future__ import annotations

from importlib.resources import files

from ehrqa.backend import MockBackend
from ehrqa.corpus import load_corpus
from ehrqa.evaluation import gold_positives, strict_micro_f1
from ehrqa.pipeline import RunConfig, run_subtask2
from ehrqa.prompting import load_templates, render

CORPUS = str(files("ehrqa").joinpath("data/fixture_corpus.json"))
TEMPLATES = str(files("ehrqa").joinpath("templates"))


def main():
    cases = load_corpus(CORPUS)
    registry = load_templates(TEMPLATES)
    case = cases[0]

    print(f"case {case.case_id}: {case.note_size} note sentences")
    print(f"patient asks:   {case.patient_question}")
    print(f"clinician asks: {case.clinician_question}")
    print()

    template = registry.get("s2-p3")
    payload = render(template, case)
    print("rendered prompt (user part, first 400 chars)")
    print("-" * 60)
    print(payload.user[:400])
    print("-" * 60)
    print()

    backend = MockBackend()
    config = RunConfig(model_id="demo-model", template_id="s2-p3")
    result = run_subtask2(case, config, backend, registry)

    print(f"raw reply: {result.raw_text!r}")
    if result.outcome.ok:
        print(f"parsed selection: {list(result.outcome.value.sentence_ids)}")
    else:
        print(f"parse failed: {result.outcome.failure_kind.value}"
              f" ({result.outcome.detail})")
    print(f"gold essential ids: {sorted(gold_positives(case.gold, 'strict'))}")
    print()

    preds = {case.case_id: result.outcome.value if result.outcome.ok else None}
    prf = strict_micro_f1(preds, {case.case_id: case.gold}, mode="strict")
    print(f"single-case strict F1: {prf.f1:.3f}"
          f"  (tp={prf.tp} fp={prf.fp} fn={prf.fn})")


if __name__ == "__main__":
    main()
