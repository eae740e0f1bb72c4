"""Combine weak evidence selectors by majority vote, then let a judge
pick between generated answers.

Three model/prompt pairings vote sentence by sentence; ids kept by
at least the threshold number of voters survive. The demo compares each
voter's F1 with the ensemble's, asks the subset search which combination
would have been best on this (tiny) dev set, and finishes with the
answer judge.

    python3 demos/03_ensembling.py
"""

from __future__ import annotations

from importlib.resources import files

from ehrqa.backend import MockBackend
from ehrqa.corpus import load_corpus
from ehrqa.ensemble import (
    JudgeSpec,
    default_threshold,
    judge_select,
    search_ensemble,
    vote_evidence,
)
from ehrqa.evaluation import gold_positives, strict_micro_f1
from ehrqa.pipeline import RunConfig, run_matrix, run_subtask3
from ehrqa.prompting import Subtask, load_templates
from ehrqa.structured import EvidenceSelection

CORPUS = str(files("ehrqa").joinpath("data/fixture_corpus.json"))
TEMPLATES = str(files("ehrqa").joinpath("templates"))

# deterministic mock voters chosen so their errors only partly overlap
VOTERS = (
    ("margin-70b", "s2-p3"),
    ("keystone-8b", "s2-p3"),
    ("atlas-7b", "s2-p6"),
)


def main():
    cases = load_corpus(CORPUS)
    registry = load_templates(TEMPLATES)
    gold = {c.case_id: c.gold for c in cases}
    backend = MockBackend()

    configs = [RunConfig(model_id=m, template_id=t) for m, t in VOTERS]
    grid = run_matrix(cases, configs, backend, registry, Subtask.Q2)

    per_voter = {}
    for config in configs:
        results = grid.cell(config.model_id, config.template_id)
        per_voter[config.config_id] = {
            r.case_id: (r.outcome.value if r.outcome.ok else None)
            for r in results
        }

    n = len(configs)
    threshold = default_threshold(n)
    print(f"{n} voters, majority threshold {threshold}")
    for config_id, preds in per_voter.items():
        prf = strict_micro_f1(preds, gold, mode="strict")
        print(f"  {config_id:24s} F1 {prf.f1:.3f}")

    voted = {}
    for case in cases:
        ballots = [per_voter[c.config_id][case.case_id] for c in configs]
        ballots = [b for b in ballots if b is not None]
        if not ballots or threshold > len(ballots):
            voted[case.case_id] = None
        else:
            voted[case.case_id] = vote_evidence(ballots, threshold)
    prf = strict_micro_f1(voted, gold, mode="strict")
    print(f"  {'majority vote':24s} F1 {prf.f1:.3f}")
    print()

    selections = {
        config_id: {cid: (list(sel.sentence_ids) if sel is not None else None)
                    for cid, sel in preds.items()}
        for config_id, preds in per_voter.items()
    }
    dev_gold = {c.case_id: sorted(gold_positives(c.gold, "strict")) for c in cases}
    found = search_ensemble(selections, dev_gold, k_max=n)
    print(f"best subset on the dev set: {found.chosen} (F1 {found.dev_score:.3f})")
    for subset, score in found.scored_alternatives:
        print(f"  considered {subset}: {score:.3f}")
    print()

    # answer judging over two generation prompts
    case = cases[0]
    candidates = []
    candidate_ids = ("demo-model::s3-p7", "demo-model::s3-p9")
    for template_id in ("s3-p7", "s3-p9"):
        result = run_subtask3(case, RunConfig(model_id="demo-model",
                                              template_id=template_id),
                              backend, registry)
        if result.outcome.ok:
            candidates.append(result.outcome.value)
    if len(candidates) < 2:
        print("need two parsed answers to judge; mock produced "
              f"{len(candidates)}")
        return
    spec = JudgeSpec(judge_config=RunConfig(model_id="demo-judge",
                                            template_id="judge"),
                     candidate_configs=candidate_ids)
    decision = judge_select(case, candidates, spec, backend)
    label = candidate_ids[decision.winner_index]
    note = " (fallback)" if decision.fallback else ""
    print(f"judge picked candidate {decision.winner_index} [{label}]{note}")
    print(f"winning answer: {candidates[decision.winner_index].text}")


if __name__ == "__main__":
    main()
