"""Batch front end over the library: run matrices, vote, judge, score, export.

Exit codes: 0 clean, 1 batch finished but some cases failed, 2 configuration
or IO trouble. stderr carries structured logs, one JSON object per line;
stdout carries only each subcommand's primary output.

Most knobs live in a single JSON run-config file; command-line flags override
individual fields. Shape:

    {"corpus": "cases.json",
     "templates_dir": "templates/",
     "cache_dir": ".cache/",
     "parallelism": 1,
     "backend": {"kind": "mock" | "http", ...},
     "configs": [{"model_id": "m", "template_id": "s2-p3", ...}, ...],
     "judge": {"model_id": "m"}}
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from .backend import CostLedger, DiskCache, HttpBackend, MockBackend
from .corpus import load_corpus
from .ensemble import JudgeSpec, default_threshold, judge_select, vote_alignment, vote_evidence
from .errors import ConfigError, EhrqaError, IncompleteResults
from .evaluation import alignment_micro_f1, generation_scores, report_grid, strict_micro_f1
from .pipeline import RunConfig, config_digest, file_digest, read_grid, run_matrix, write_grid
from .prompting import Subtask, load_templates, template_digests
from .structured import (
    ANSWER_WORD_LIMIT,
    QUERY_WORD_LIMIT,
    AlignmentMap,
    EvidenceSelection,
    GeneratedAnswer,
    failure_record,
)

log = logging.getLogger(__name__)

_SUBTASKS = {"1": Subtask.Q1, "2": Subtask.Q2, "3": Subtask.Q3, "4": Subtask.Q4}
_CONFIG_FIELDS = {"corpus", "templates_dir", "cache_dir", "parallelism",
                  "backend", "configs", "judge"}


# ---------------------------------------------------------------------------
# plumbing

def _emit(doc):
    sys.stderr.write(json.dumps(doc, ensure_ascii=False, sort_keys=True) + "\n")
    sys.stderr.flush()


def _log_event(event, **fields):
    _emit({"event": event, **fields})


class _JsonLineHandler(logging.Handler):
    def emit(self, record):
        try:
            _emit({
                "event": "log",
                "level": record.levelname.lower(),
                "logger": record.name,
                "message": record.getMessage(),
            })
        except Exception:
            pass  # logging must never take the batch down


def _setup_logging(verbose: bool):
    root = logging.getLogger("ehrqa")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(isinstance(h, _JsonLineHandler) for h in root.handlers):
        root.addHandler(_JsonLineHandler())


def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def _write_json(path, payload):
    path = Path(path)
    if path.parent != Path("."):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _print_or_write(doc, out):
    if out:
        _write_json(out, doc)
    else:
        print(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False))


def load_run_config(path) -> dict:
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    extra = set(doc) - _CONFIG_FIELDS
    if extra:
        raise ConfigError(f"{path}: unknown fields {sorted(extra)}")
    return doc


def _check_pricing(pricing):
    if pricing is None:
        return None
    if not isinstance(pricing, dict):
        raise ConfigError("pricing must map model ids to rate objects")
    for model_id, rates in pricing.items():
        if (not isinstance(rates, dict)
                or not set(rates) <= {"input", "output"}
                or not all(isinstance(v, (int, float)) for v in rates.values())):
            raise ConfigError(
                f"pricing for {model_id!r} must be "
                '{"input": usd_per_mtok, "output": usd_per_mtok}')
    return pricing


def build_backend(spec, cache_dir):
    """Construct the completion backend named by the config's backend block."""
    spec = dict(spec) if spec else {"kind": "mock"}
    kind = spec.pop("kind", "mock")
    cache = DiskCache(cache_dir) if cache_dir else None
    ledger = CostLedger()
    pricing = _check_pricing(spec.pop("pricing", None))
    if kind == "mock":
        fixtures = spec.pop("fixtures", None)
        if isinstance(fixtures, str):
            fixtures = _read_json(fixtures)
        strict = bool(spec.pop("strict", False))
        if spec:
            raise ConfigError(f"unknown mock backend fields {sorted(spec)}")
        return MockBackend(fixtures=fixtures, strict=strict,
                           pricing=pricing, cache=cache, ledger=ledger)
    if kind == "http":
        endpoint = spec.pop("endpoint", None)
        if not endpoint:
            raise ConfigError("http backend needs an endpoint")
        kwargs = {name: spec.pop(name) for name in ("api_key_env", "retries", "timeout_s")
                  if name in spec}
        if spec:
            raise ConfigError(f"unknown http backend fields {sorted(spec)}")
        return HttpBackend(endpoint, pricing=pricing, cache=cache, ledger=ledger, **kwargs)
    raise ConfigError(f"unknown backend kind {kind!r}")


@dataclass
class _Context:
    cfg: dict
    corpus_path: str
    templates_dir: str
    cases: list
    registry: object
    backend: object
    parallelism: int


def _load_context(args) -> _Context:
    cfg = load_run_config(args.config)
    corpus_path = args.corpus or cfg.get("corpus")
    templates_dir = args.templates_dir or cfg.get("templates_dir")
    if not corpus_path:
        raise ConfigError("no corpus given (config field or --corpus)")
    if not templates_dir:
        raise ConfigError("no templates_dir given (config field or --templates-dir)")
    cache_dir = args.cache_dir or cfg.get("cache_dir")
    parallelism = args.parallelism or cfg.get("parallelism", 1)
    if not isinstance(parallelism, int) or parallelism < 1:
        raise ConfigError(f"parallelism must be a positive integer, got {parallelism!r}")
    return _Context(
        cfg=cfg,
        corpus_path=corpus_path,
        templates_dir=templates_dir,
        cases=load_corpus(corpus_path),
        registry=load_templates(templates_dir),
        backend=build_backend(cfg.get("backend"), cache_dir),
        parallelism=parallelism,
    )


def _select_configs(ctx: _Context, subtask: Subtask, args) -> list:
    """Run configs from the config file, restricted to one subtask and any
    --models/--templates filters."""
    raw = ctx.cfg.get("configs") or []
    configs = [RunConfig.from_dict(d) for d in raw]
    picked = []
    for config in configs:
        template = ctx.registry.get(config.template_id)
        if template.subtask is not subtask:
            continue
        if args.models and config.model_id not in args.models:
            continue
        if args.templates and config.template_id not in args.templates:
            continue
        picked.append(config)
    if not picked:
        raise ConfigError(f"no run configs match subtask {subtask.value} and the given filters")
    return picked


def load_answers(path) -> dict:
    """Answers for alignment runs: a Q3 submission file or a bare
    {case_id: text} map. Blank text marks a failed case."""
    doc = _read_json(path)
    raw = doc.get("predictions", doc) if isinstance(doc, dict) else None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object mapping case ids to answer text")
    answers = {}
    for case_id, value in raw.items():
        if isinstance(value, dict):
            value = value.get("answer", "")
        if not isinstance(value, str):
            raise ConfigError(f"{path}: answer for {case_id} must be a string")
        answers[case_id] = GeneratedAnswer.from_text(value) if value.strip() else None
    return answers


def _pick_cell(grid, model, template):
    keys = sorted(grid.cells)
    if model:
        keys = [k for k in keys if k[0] == model]
    if template:
        keys = [k for k in keys if k[1] == template]
    if not keys:
        raise ConfigError("no run cell matches the model/template selection")
    if len(keys) > 1:
        raise ConfigError(
            f"selection is ambiguous across {len(keys)} cells; narrow with --model/--template"
        )
    return keys[0]


def _count_failures(grid) -> int:
    return sum(1 for results in grid.cells.values() for r in results if not r.outcome.ok)


# ---------------------------------------------------------------------------
# subcommands

def cmd_validate_corpus(args) -> int:
    cases = load_corpus(args.corpus, strict=not args.lenient)
    summary = {
        "cases": len(cases),
        "with_clinician_question": sum(1 for c in cases if c.clinician_question),
        "with_gold": sum(1 for c in cases if c.gold is not None),
        "sentences": sum(c.note_size for c in cases),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    ctx = _load_context(args)
    subtask = _SUBTASKS[args.subtask]
    configs = _select_configs(ctx, subtask, args)
    answers = load_answers(args.answers) if getattr(args, "answers", None) else None
    if subtask is Subtask.Q4 and answers is None:
        raise ConfigError("subtask 4 needs --answers (a Q3 submission or case-to-text map)")

    _log_event("run-start", subtask=subtask.value, configs=len(configs),
               cases=len(ctx.cases), backend=ctx.backend.backend_id)
    grid = run_matrix(ctx.cases, configs, ctx.backend, ctx.registry, subtask,
                      parallelism=ctx.parallelism, answers=answers)
    manifest_path = write_grid(grid, args.out, manifest_extra={
        "config_digest": config_digest(ctx.cfg),
        "corpus_digest": file_digest(ctx.corpus_path),
        "template_digests": template_digests(ctx.templates_dir),
        "backend": ctx.backend.backend_id,
    })
    _write_json(Path(args.out) / "ledger.json", ctx.backend.ledger.to_dict())

    failures = _count_failures(grid)
    _log_event("run-complete", out=str(args.out), subtask=subtask.value,
               cells=len(grid.cells), cases=len(grid.case_ids), failures=failures)
    print(json.dumps({
        "manifest": str(manifest_path),
        "cells": len(grid.cells),
        "cases": len(grid.case_ids),
        "failures": failures,
    }, sort_keys=True))
    return 1 if failures else 0


def cmd_align(args) -> int:
    args.subtask = "4"
    return cmd_run(args)


def cmd_vote(args) -> int:
    grid, _ = read_grid(args.run)
    if grid.subtask not in (Subtask.Q2, Subtask.Q4):
        raise ConfigError("voting applies to evidence or alignment runs")
    ordered = sorted(grid.cells)
    n = len(ordered)
    if n < 2:
        raise ConfigError(f"voting needs at least 2 run cells, found {n}")
    threshold = args.threshold if args.threshold is not None else default_threshold(n)
    if not isinstance(threshold, int) or not 1 <= threshold <= n:
        raise ConfigError(f"threshold {threshold} out of range for {n} voters")

    pos = {cid: i for i, cid in enumerate(grid.case_ids)}
    predictions = {}
    abstentions = {}
    empty_cases = []
    for case_id in grid.case_ids:
        ballots = []
        for key in ordered:
            result = grid.cells[key][pos[case_id]]
            if result.outcome.ok:
                ballots.append(result.outcome.value)
        dropped = n - len(ballots)
        if dropped:
            abstentions[case_id] = dropped
        # failed voters abstain; the threshold stays put, so too few
        # surviving ballots means nothing can win
        if grid.subtask is Subtask.Q2:
            if not ballots or threshold > len(ballots):
                predictions[case_id] = []
            else:
                predictions[case_id] = list(vote_evidence(ballots, threshold).sentence_ids)
        else:
            if not ballots or threshold > len(ballots):
                predictions[case_id] = {}
            else:
                voted = vote_alignment(ballots, threshold)
                predictions[case_id] = {
                    str(idx): list(ids) for idx, ids in sorted(voted.entries.items())
                }
        if not ballots:
            empty_cases.append(case_id)

    doc = {
        "subtask": grid.subtask.value,
        "voters": [f"{m}::{t}" for m, t in ordered],
        "threshold": threshold,
        "predictions": predictions,
    }
    if abstentions:
        doc["abstentions"] = abstentions
    _print_or_write(doc, args.out)
    _log_event("vote-complete", subtask=grid.subtask.value, voters=n,
               threshold=threshold, empty_cases=len(empty_cases))
    return 1 if empty_cases else 0


def cmd_judge(args) -> int:
    cfg = load_run_config(args.config)
    corpus_path = args.corpus or cfg.get("corpus")
    if not corpus_path:
        raise ConfigError("no corpus given (config field or --corpus)")
    cases = {c.case_id: c for c in load_corpus(corpus_path)}
    backend = build_backend(cfg.get("backend"), args.cache_dir or cfg.get("cache_dir"))
    judge_model = args.model or (cfg.get("judge") or {}).get("model_id")
    if not judge_model:
        raise ConfigError("no judge model (config judge.model_id or --model)")

    grid, _ = read_grid(args.run)
    if grid.subtask is not Subtask.Q3:
        raise ConfigError("judging applies to answer-generation runs")
    ordered = sorted(grid.cells)
    config_ids = [f"{m}::{t}" for m, t in ordered]
    spec = JudgeSpec(
        judge_config=RunConfig(model_id=judge_model, template_id="judge"),
        candidate_configs=tuple(config_ids),
    )

    pos = {cid: i for i, cid in enumerate(grid.case_ids)}
    predictions = {}
    winners = {}
    fallbacks = []
    failed = []
    for case_id in grid.case_ids:
        case = cases.get(case_id)
        if case is None:
            raise ConfigError(f"case {case_id} from the run is missing from the corpus")
        candidates = []
        labels = []
        for key, config_id in zip(ordered, config_ids):
            result = grid.cells[key][pos[case_id]]
            if result.outcome.ok:
                candidates.append(result.outcome.value)
                labels.append(config_id)
        if not candidates:
            predictions[case_id] = ""
            failed.append(case_id)
            continue
        if len(candidates) == 1:
            index, fell_back = 0, False
        else:
            decision = judge_select(case, candidates, spec, backend)
            index, fell_back = decision.winner_index, decision.fallback
        predictions[case_id] = candidates[index].text
        winners[case_id] = labels[index]
        if fell_back:
            fallbacks.append(case_id)

    doc = {
        "subtask": Subtask.Q3.value,
        "judge_model": judge_model,
        "candidates": config_ids,
        "predictions": predictions,
        "winners": winners,
    }
    if fallbacks:
        doc["fallbacks"] = fallbacks
    if failed:
        doc["failed_cases"] = failed
    _print_or_write(doc, args.out)
    _log_event("judge-complete", cases=len(grid.case_ids),
               fallbacks=len(fallbacks), failed=len(failed))
    return 1 if failed else 0


def _as_answer(value):
    """Adapt a prediction to something with .text for the lexical metrics."""
    if value is None:
        return None
    if isinstance(value, GeneratedAnswer):
        return value
    if hasattr(value, "query"):
        value = value.query
    if isinstance(value, str):
        return GeneratedAnswer.from_text(value) if value.strip() else None
    raise ConfigError(f"cannot score prediction of type {type(value).__name__}")


def _predictions_from_run(args, subtask):
    grid, _ = read_grid(args.run)
    if grid.subtask is not subtask:
        raise ConfigError(f"run directory holds {grid.subtask.value}, not {subtask.value}")
    key = _pick_cell(grid, args.model, args.template)
    return {r.case_id: (r.outcome.value if r.outcome.ok else None)
            for r in grid.cells[key]}


def _predictions_from_file(args, subtask):
    doc = _read_json(args.pred)
    raw = doc.get("predictions") if isinstance(doc, dict) else None
    if not isinstance(raw, dict):
        raise ConfigError(f"{args.pred}: submission file needs a predictions object")
    preds = {}
    for case_id, value in raw.items():
        if subtask in (Subtask.Q1, Subtask.Q3):
            if not isinstance(value, str):
                raise ConfigError(f"{args.pred}: {case_id} must map to a string")
            preds[case_id] = value.strip() or None
        elif subtask is Subtask.Q2:
            if not isinstance(value, list) or any(
                not isinstance(i, int) or isinstance(i, bool) for i in value
            ):
                raise ConfigError(f"{args.pred}: {case_id} must map to an integer list")
            preds[case_id] = EvidenceSelection(sentence_ids=tuple(sorted(set(value))))
        else:
            if not isinstance(value, dict):
                raise ConfigError(f"{args.pred}: {case_id} must map to an alignment object")
            if not value:
                preds[case_id] = None  # exported failures are empty maps
                continue
            entries = {}
            for idx, ids in value.items():
                try:
                    idx = int(idx)
                except (TypeError, ValueError):
                    raise ConfigError(f"{args.pred}: {case_id} has a non-integer key {idx!r}")
                if not isinstance(ids, list) or any(
                    not isinstance(i, int) or isinstance(i, bool) for i in ids
                ):
                    raise ConfigError(f"{args.pred}: {case_id}[{idx}] must be an integer list")
                entries[idx] = sorted(set(ids))
            preds[case_id] = AlignmentMap(entries=entries)
    return preds


def _load_references(path, cases):
    doc = _read_json(path)
    rows = doc.get("cases") if isinstance(doc, dict) else None
    if not isinstance(rows, list):
        raise ConfigError(f'{path}: expected {{"cases": [...]}}')
    references = {}
    sources = {}
    for row in rows:
        case_id = row.get("case_id")
        refs = row.get("references")
        if not isinstance(case_id, str) or not isinstance(refs, list) or not refs:
            raise ConfigError(f"{path}: every entry needs case_id and a non-empty references list")
        if case_id not in cases:
            raise ConfigError(f"{path}: unknown case {case_id}")
        references[case_id] = [str(r) for r in refs]
        sources[case_id] = row.get("source") or cases[case_id].patient_question
    return references, sources


def cmd_score(args) -> int:
    subtask = _SUBTASKS[args.subtask]
    cases = {c.case_id: c for c in load_corpus(args.gold)}
    if args.run:
        preds = _predictions_from_run(args, subtask)
    else:
        preds = _predictions_from_file(args, subtask)

    if subtask is Subtask.Q2:
        gold = {cid: c.gold for cid, c in cases.items() if c.gold is not None}
        preds = {cid: p for cid, p in preds.items() if cid in gold}
        prf = strict_micro_f1(preds, gold, mode=args.mode)
        out = dict(prf.to_dict(), mode=args.mode)
    elif subtask is Subtask.Q4:
        gold = {cid: AlignmentMap(entries=c.gold.gold_alignment)
                for cid, c in cases.items()
                if c.gold is not None and c.gold.gold_alignment is not None}
        preds = {cid: p for cid, p in preds.items() if cid in gold}
        prf = alignment_micro_f1(preds, gold)
        out = prf.to_dict()
    elif subtask is Subtask.Q1:
        gold = {cid: c.gold.gold_query for cid, c in cases.items()
                if c.gold is not None and c.gold.gold_query}
        references = {cid: [q] for cid, q in gold.items()}
        sources = {cid: cases[cid].patient_question for cid in gold}
        answers = {cid: _as_answer(preds.get(cid)) for cid in gold}
        out = generation_scores(answers, references, sources)
    else:
        if not args.references:
            raise ConfigError("scoring subtask 3 needs --references")
        references, sources = _load_references(args.references, cases)
        answers = {cid: _as_answer(preds.get(cid)) for cid in references}
        out = generation_scores(answers, references, sources)

    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_grid(args) -> int:
    grid, _ = read_grid(args.run)
    subtask = grid.subtask
    cases = {c.case_id: c for c in load_corpus(args.gold)}

    if subtask in (Subtask.Q2, Subtask.Q4):
        metric = args.metric or "f1"
        if metric != "f1":
            raise ConfigError(f"{subtask.value} grids support only the f1 metric")
        if subtask is Subtask.Q2:
            gold = {cid: c.gold for cid, c in cases.items() if c.gold is not None}

            def scorer(results):
                preds = {r.case_id: (r.outcome.value if r.outcome.ok else None)
                         for r in results if r.case_id in gold}
                return strict_micro_f1(preds, gold, mode=args.mode).f1

            metric_name = f"f1-{args.mode}"
        else:
            gold = {cid: AlignmentMap(entries=c.gold.gold_alignment)
                    for cid, c in cases.items()
                    if c.gold is not None and c.gold.gold_alignment is not None}

            def scorer(results):
                preds = {r.case_id: (r.outcome.value if r.outcome.ok else None)
                         for r in results if r.case_id in gold}
                return alignment_micro_f1(preds, gold).f1

            metric_name = "f1"
    else:
        metric = args.metric or "rouge_lsum"
        if metric not in ("rouge_lsum", "bleu", "sari"):
            raise ConfigError(f"unknown generation metric {metric!r}")
        if subtask is Subtask.Q1:
            references = {cid: [c.gold.gold_query] for cid, c in cases.items()
                          if c.gold is not None and c.gold.gold_query}
            sources = {cid: cases[cid].patient_question for cid in references}
        else:
            if not args.references:
                raise ConfigError("grids over subtask 3 need --references")
            references, sources = _load_references(args.references, cases)

        def scorer(results):
            answers = {r.case_id: _as_answer(r.outcome.value if r.outcome.ok else None)
                       for r in results if r.case_id in references}
            return generation_scores(answers, references, sources)[metric]

        metric_name = metric

    report = report_grid(grid, scorer, metric_name)
    csv_text = report.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(csv_text, encoding="utf-8")
    else:
        sys.stdout.write(csv_text)
    return 0


_EMPTY_PREDICTION = {
    Subtask.Q1: "",
    Subtask.Q2: [],
    Subtask.Q3: "",
    Subtask.Q4: {},
}


def export_submission(grid, manifest, key, enforce_length: bool):
    """Canonical per-subtask submission shape, one entry per manifest case.

    Failed cases become empty predictions; the failure records are returned
    separately so the caller can write the sidecar.
    """
    subtask = grid.subtask
    results = {r.case_id: r for r in grid.cells[key]}
    missing = [cid for cid in manifest["cases"] if cid not in results]
    if missing:
        raise IncompleteResults(f"no result for cases {missing}")

    predictions = {}
    violations = []
    failures = []
    for case_id in manifest["cases"]:
        result = results[case_id]
        if not result.outcome.ok:
            predictions[case_id] = _EMPTY_PREDICTION[subtask]
            failures.append(
                failure_record(case_id, result.outcome.failure_kind, result.raw_text)
            )
            continue
        value = result.outcome.value
        if subtask is Subtask.Q1:
            text = value.query
            if enforce_length:
                words = text.split()
                if len(words) > QUERY_WORD_LIMIT:
                    text = " ".join(words[:QUERY_WORD_LIMIT])
                    violations.append(case_id)
            predictions[case_id] = text
        elif subtask is Subtask.Q2:
            predictions[case_id] = list(value.sentence_ids)
        elif subtask is Subtask.Q3:
            text = value.text
            if enforce_length:
                words = text.split()
                if len(words) > ANSWER_WORD_LIMIT:
                    text = " ".join(words[:ANSWER_WORD_LIMIT])
                    violations.append(case_id)
            predictions[case_id] = text
        else:
            predictions[case_id] = {
                str(idx): list(ids) for idx, ids in sorted(value.entries.items())
            }

    doc = {
        "subtask": subtask.value,
        "model_id": key[0],
        "template_id": key[1],
        "predictions": predictions,
    }
    if enforce_length:
        doc["length_violations"] = violations
    return doc, failures


def cmd_export(args) -> int:
    grid, manifest = read_grid(args.run)
    key = _pick_cell(grid, args.model, args.template)
    doc, failures = export_submission(grid, manifest, key, args.enforce_length)

    out_path = Path(args.out)
    _write_json(out_path, doc)
    sidecar = out_path.with_name(out_path.stem + ".failures.json")
    _write_json(sidecar, {"failures": failures})

    _log_event("export-complete", out=str(out_path), cases=len(doc["predictions"]),
               failures=len(failures))
    print(json.dumps({
        "out": str(out_path),
        "sidecar": str(sidecar),
        "cases": len(doc["predictions"]),
        "failures": len(failures),
    }, sort_keys=True))
    return 1 if failures else 0


def cmd_cache(args) -> int:
    cache_dir = args.cache_dir
    if not cache_dir and args.config:
        cache_dir = load_run_config(args.config).get("cache_dir")
    if not cache_dir:
        raise ConfigError("no cache directory (pass --cache-dir or a config with cache_dir)")
    cache = DiskCache(cache_dir)
    if args.action == "stats":
        print(json.dumps(cache.stats(), sort_keys=True))
    else:
        removed = cache.clear()
        print(json.dumps({"removed": removed}, sort_keys=True))
    return 0


def cmd_ledger(args) -> int:
    doc = _read_json(Path(args.run) / "ledger.json")
    models = doc.get("models") or {}
    lines = [f"{'model':40s} {'calls':>7s} {'tok_in':>10s} {'tok_out':>10s} {'cost_usd':>10s}"]
    for model in sorted(models, key=lambda m: (-models[m]["cost_usd"], m)):
        row = models[model]
        lines.append(
            f"{model:40s} {row['calls']:>7d} {row['tokens_in']:>10d} "
            f"{row['tokens_out']:>10d} {row['cost_usd']:>10.4f}"
        )
    lines.append(f"{'TOTAL':40s} {'':7s} {'':10s} {'':10s} {doc.get('total_usd', 0.0):>10.4f}")
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def _add_run_flags(sub):
    sub.add_argument("--config", required=True, help="run-config JSON file")
    sub.add_argument("--out", required=True, help="output grid directory")
    sub.add_argument("--corpus", help="override the config's corpus path")
    sub.add_argument("--templates-dir", dest="templates_dir",
                     help="override the config's template directory")
    sub.add_argument("--cache-dir", dest="cache_dir", help="override the config's cache directory")
    sub.add_argument("--parallelism", type=int, help="worker threads (default from config, else 1)")
    sub.add_argument("--models", nargs="*", help="restrict to these model ids")
    sub.add_argument("--templates", nargs="*", help="restrict to these template ids")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ehrqa",
        description="Grounded clinical QA batch tool: run, vote, judge, score, export.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug-level stderr logs")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("validate-corpus", help="validate a corpus file")
    sub.add_argument("--corpus", required=True)
    sub.add_argument("--lenient", action="store_true",
                     help="warn on unknown fields instead of failing")
    sub.set_defaults(func=cmd_validate_corpus)

    sub = commands.add_parser("run", help="run a model-by-template matrix for one subtask")
    sub.add_argument("--subtask", required=True, choices=sorted(_SUBTASKS))
    _add_run_flags(sub)
    sub.add_argument("--answers", help="answers to align (subtask 4 only)")
    sub.set_defaults(func=cmd_run)

    sub = commands.add_parser("align", help="shorthand for run --subtask 4")
    _add_run_flags(sub)
    sub.add_argument("--answers", required=True,
                     help="Q3 submission file or {case_id: text} map")
    sub.set_defaults(func=cmd_align)

    sub = commands.add_parser("vote", help="majority-vote the cells of a run directory")
    sub.add_argument("--run", required=True, help="grid directory from run")
    sub.add_argument("--threshold", type=int, help="votes needed (default: strict majority)")
    sub.add_argument("--out", help="write the voted submission here instead of stdout")
    sub.set_defaults(func=cmd_vote)

    sub = commands.add_parser("judge", help="pick the best answer per case across run cells")
    sub.add_argument("--config", required=True)
    sub.add_argument("--run", required=True, help="answer-generation grid directory")
    sub.add_argument("--corpus", help="override the config's corpus path")
    sub.add_argument("--cache-dir", dest="cache_dir")
    sub.add_argument("--model", help="judge model id (overrides config judge.model_id)")
    sub.add_argument("--out", help="write the judged submission here instead of stdout")
    sub.set_defaults(func=cmd_judge)

    sub = commands.add_parser("score", help="score predictions against a gold corpus")
    sub.add_argument("--subtask", required=True, choices=sorted(_SUBTASKS))
    sub.add_argument("--gold", required=True, help="corpus file with gold annotations")
    group = sub.add_mutually_exclusive_group(required=True)
    group.add_argument("--run", help="grid directory (pick a cell with --model/--template)")
    group.add_argument("--pred", help="submission file")
    sub.add_argument("--model", help="cell selector within --run")
    sub.add_argument("--template", help="cell selector within --run")
    sub.add_argument("--mode", choices=("strict", "lenient"), default="strict",
                     help="evidence gold standard (subtask 2)")
    sub.add_argument("--references", help="reference answers JSON (subtask 3)")
    sub.set_defaults(func=cmd_score)

    sub = commands.add_parser("grid", help="CSV of per-cell scores for a run directory")
    sub.add_argument("--run", required=True)
    sub.add_argument("--gold", required=True)
    sub.add_argument("--metric", help="f1 (subtasks 2/4) or rouge_lsum/bleu/sari (1/3)")
    sub.add_argument("--mode", choices=("strict", "lenient"), default="strict")
    sub.add_argument("--references", help="reference answers JSON (subtask 3)")
    sub.add_argument("--out", help="write CSV here instead of stdout")
    sub.set_defaults(func=cmd_grid)

    sub = commands.add_parser("export", help="write the canonical submission for one cell")
    sub.add_argument("--run", required=True)
    sub.add_argument("--out", required=True, help="submission file path")
    sub.add_argument("--model", help="cell selector")
    sub.add_argument("--template", help="cell selector")
    sub.add_argument("--enforce-length", dest="enforce_length", action="store_true",
                     help="truncate over-limit queries/answers at export time")
    sub.set_defaults(func=cmd_export)

    sub = commands.add_parser("cache", help="inspect or clear the completion cache")
    sub.add_argument("action", choices=("stats", "clear"))
    sub.add_argument("--cache-dir", dest="cache_dir")
    sub.add_argument("--config", help="read cache_dir from this run config")
    sub.set_defaults(func=cmd_cache)

    sub = commands.add_parser("ledger", help="print the cost table for a run directory")
    sub.add_argument("--run", required=True)
    sub.set_defaults(func=cmd_ledger)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except EhrqaError as exc:
        _emit({"event": "error", "error": type(exc).__name__, "detail": str(exc)})
        return 2
    except OSError as exc:
        _emit({"event": "error", "error": type(exc).__name__, "detail": str(exc)})
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
