"""Run a model-by-template matrix and report it as a score grid.

Executes every (model, template) pair over the packaged corpus on the
mock backend, persists the grid to disk, then prints the strict-F1 table
and the cost ledger. The grid directory layout is the same one the
command line `run` subcommand writes.

    python3 demos/02_run_matrix.py
"""

from __future__ import annotations

import tempfile
from importlib.resources import files
from pathlib import Path

from ehrqa.backend import CostLedger, DiskCache, MockBackend, ledger_report
from ehrqa.corpus import load_corpus
from ehrqa.evaluation import report_grid, strict_micro_f1
from ehrqa.pipeline import RunConfig, read_grid, run_matrix, write_grid
from ehrqa.prompting import Subtask, load_templates

CORPUS = str(files("ehrqa").joinpath("data/fixture_corpus.json"))
TEMPLATES = str(files("ehrqa").joinpath("templates"))

MODELS = ("margin-9b", "margin-70b")
TEMPLATE_IDS = ("s2-p3", "s2-p4", "s2-p5")


def main():
    cases = load_corpus(CORPUS)
    registry = load_templates(TEMPLATES)
    gold = {c.case_id: c.gold for c in cases}

    configs = [
        RunConfig(model_id=model, template_id=template_id)
        for model in MODELS
        for template_id in TEMPLATE_IDS
    ]
    # per-million-token pricing so the ledger has something to add up
    pricing = {"margin-9b": {"input": 0.2, "output": 0.6},
               "margin-70b": {"input": 1.2, "output": 3.6}}

    with tempfile.TemporaryDirectory() as scratch:
        backend = MockBackend(pricing=pricing,
                              cache=DiskCache(Path(scratch) / "cache"),
                              ledger=CostLedger())
        grid = run_matrix(cases, configs, backend, registry, Subtask.Q2,
                          parallelism=4)

        out = Path(scratch) / "grid"
        write_grid(grid, out)
        reloaded, manifest = read_grid(out)
        print(f"grid persisted to {out.name}/: "
              f"{len(manifest['cases'])} cases x {len(reloaded.cells)} cells")
        print()

        def scorer(results):
            preds = {r.case_id: (r.outcome.value if r.outcome.ok else None)
                     for r in results}
            return strict_micro_f1(preds, gold, mode="strict").f1

        report = report_grid(reloaded, scorer, "f1-strict")
        print("strict micro-F1, scaled to 0..100 (rows: templates)")
        print(report.to_csv())

        failures = [r for results in grid.cells.values()
                    for r in results if not r.outcome.ok]
        print(f"failed case-runs: {len(failures)}")
        for r in failures:
            print(f"  {r.model_id} / {r.template_id} / {r.case_id}: "
                  f"{r.outcome.failure_kind.value}")
        print()
        print(ledger_report(backend.ledger))


if __name__ == "__main__":
    main()
