from __future__ import annotations

import datetime
import json

import pytest
from hypothesis import given, strategies as st

from ehrqa.backend import MockBackend
from ehrqa.corpus import CaseRecord, NoteSentence
from ehrqa.errors import InvalidRunConfig, TransportError
from ehrqa.pipeline import (
    TIMESTAMP_ENV,
    CaseResult,
    RunConfig,
    case_result_from_dict,
    case_result_to_dict,
    cell_filename,
    config_digest,
    file_digest,
    merge_alignment_passes,
    outcome_from_dict,
    outcome_to_dict,
    read_grid,
    run_matrix,
    run_subtask1,
    run_subtask2,
    run_subtask3,
    run_subtask4,
    run_timestamp,
    write_grid,
)
from ehrqa.prompting import Subtask
from ehrqa.structured import (
    AlignmentMap,
    EvidenceSelection,
    FailureKind,
    GeneratedAnswer,
    ParseOutcome,
    make_query,
)


def case(case_id="case-x", clinician=True, sentences=("Alpha fact.", "Beta fact.", "Gamma fact.")):
    return CaseRecord(
        case_id=case_id,
        patient_question="Why was my medicine changed at the last visit?",
        clinician_question="Reason for medication change?" if clinician else None,
        note=tuple(NoteSentence(id=i, text=t) for i, t in enumerate(sentences, start=1)),
        gold=None,
    )


def backend_with(replies):
    """Mock whose reply is chosen by the first matching substring of the user text."""

    def responder(request):
        for marker, reply in replies:
            if marker in request.payload.user:
                return reply
        raise AssertionError(f"no scripted reply matches: {request.payload.user[:120]}")

    return MockBackend(responder=responder)


def constant_backend(reply):
    return MockBackend(responder=lambda request: reply)


class TestRunConfig:
    def test_config_id(self):
        assert RunConfig("m", "t").config_id == "m::t"

    def test_dict_round_trip(self):
        config = RunConfig("m", "t", temperature=0.2, two_pass=True)
        doc = config.to_dict()
        assert doc == {"model_id": "m", "template_id": "t",
                       "temperature": 0.2, "two_pass": True}
        assert RunConfig.from_dict(doc) == config

    def test_unknown_field_rejected(self):
        with pytest.raises(InvalidRunConfig):
            RunConfig.from_dict({"model_id": "m", "template_id": "t", "seed": 3})


class TestSubtask1:
    def test_happy_path(self, registry):
        backend = constant_backend('{"query": "Why was the dose increased now?"}')
        result = run_subtask1(case(), RunConfig("m", "s1-p1"), backend, registry)
        assert result.outcome.ok
        assert result.outcome.value.query == "Why was the dose increased now?"
        assert not result.outcome.value.length_violation
        assert result.raw_text.startswith('{"query"')
        assert result.prompt_tokens > 0

    def test_refusal_is_unparseable(self, registry):
        backend = constant_backend("I cannot determine that.")
        result = run_subtask1(case(), RunConfig("m", "s1-p1"), backend, registry)
        assert result.outcome.failure_kind is FailureKind.UNPARSEABLE
        assert result.raw_text == "I cannot determine that."

    def test_backend_error_is_captured(self, registry):
        backend = MockBackend(strict=True)  # every call misses its fixtures
        result = run_subtask1(case(), RunConfig("m", "s1-p1"), backend, registry)
        assert result.outcome.failure_kind is FailureKind.BACKEND_ERROR

    def test_wrong_subtask_template_raises(self, registry):
        with pytest.raises(InvalidRunConfig):
            run_subtask1(case(), RunConfig("m", "s3-p7"), constant_backend("x"), registry)


class TestSubtask2CaseLevel:
    def test_happy_path(self, registry):
        backend = constant_backend('{"sentence_ids": [2, 1, 2]}')
        result = run_subtask2(case(), RunConfig("m", "s2-p3"), backend, registry)
        assert result.outcome.ok
        assert result.outcome.value.sentence_ids == (1, 2)

    def test_out_of_range_id(self, registry):
        backend = constant_backend('{"sentence_ids": [9]}')
        result = run_subtask2(case(), RunConfig("m", "s2-p3"), backend, registry)
        assert result.outcome.failure_kind is FailureKind.RANGE_VIOLATION

    def test_missing_clinician_question(self, registry):
        backend = constant_backend('{"sentence_ids": []}')
        result = run_subtask2(case(clinician=False), RunConfig("m", "s2-p3"),
                              backend, registry)
        assert result.outcome.failure_kind is FailureKind.MISSING_CLINICIAN_QUESTION


class TestSubtask2PerSentence:
    CONFIG = RunConfig("m", "s2-p1", per_sentence=True)

    @staticmethod
    def label_backend():
        return backend_with([
            ("Alpha", '{"label": "essential"}'),
            ("Beta", '{"label": "supplementary"}'),
            ("Gamma", '{"label": "not-relevant"}'),
        ])

    def test_strict_keeps_essential_only(self, registry):
        result = run_subtask2(case(), self.CONFIG, self.label_backend(), registry)
        assert result.outcome.ok
        assert result.outcome.value.sentence_ids == (1,)
        # one sub-call per note sentence, folded into one raw transcript
        assert result.raw_text.count("\n") == 2

    def test_lenient_adds_supplementary(self, registry):
        config = RunConfig("m", "s2-p1", per_sentence=True, lenient_aggregation=True)
        result = run_subtask2(case(), config, self.label_backend(), registry)
        assert result.outcome.value.sentence_ids == (1, 2)

    def test_one_bad_reply_fails_the_case(self, registry):
        backend = backend_with([
            ("Alpha", '{"label": "essential"}'),
            ("Beta", "no idea"),
            ("Gamma", '{"label": "essential"}'),
        ])
        result = run_subtask2(case(), self.CONFIG, backend, registry)
        assert result.outcome.failure_kind is FailureKind.UNPARSEABLE
        assert "sentence 2" in result.outcome.detail

    def test_unknown_label_fails_the_case(self, registry):
        backend = backend_with([
            ("Alpha", '{"label": "essential"}'),
            ("Beta", '{"label": "critical"}'),
            ("Gamma", '{"label": "essential"}'),
        ])
        result = run_subtask2(case(), self.CONFIG, backend, registry)
        assert result.outcome.failure_kind is FailureKind.SCHEMA_MISMATCH

    def test_per_sentence_template_requires_flag(self, registry):
        with pytest.raises(InvalidRunConfig):
            run_subtask2(case(), RunConfig("m", "s2-p1"), self.label_backend(), registry)


class TestSubtask3:
    def test_fenced_reply_is_unwrapped(self, registry):
        backend = constant_backend("```\nTake the tablet daily. Call if dizzy.\n```")
        result = run_subtask3(case(), RunConfig("m", "s3-p7"), backend, registry)
        assert result.outcome.ok
        assert result.outcome.value.text == "Take the tablet daily. Call if dizzy."
        assert len(result.outcome.value.sentences) == 2
        # the transcript keeps the fence even though the answer drops it
        assert result.raw_text.startswith("```")

    def test_blank_reply_is_empty_answer(self, registry):
        result = run_subtask3(case(), RunConfig("m", "s3-p7"),
                              constant_backend("  \n"), registry)
        assert result.outcome.failure_kind is FailureKind.EMPTY_ANSWER

    def test_over_length_reply_is_flagged_not_failed(self, registry):
        backend = constant_backend(" ".join(["word"] * 80) + ".")
        result = run_subtask3(case(), RunConfig("m", "s3-p7"), backend, registry)
        assert result.outcome.ok
        assert result.outcome.value.length_violation


ANSWER = GeneratedAnswer.from_text("The dose went up. Watch for swelling.")


class TestSubtask4:
    def test_missing_answer(self, registry):
        result = run_subtask4(case(), None, RunConfig("m", "s4-p1"),
                              constant_backend("{}"), registry)
        assert result.outcome.failure_kind is FailureKind.MISSING_ANSWER

    def test_single_pass(self, registry):
        backend = constant_backend('{"S1": [1, 2], "S2": [3]}')
        result = run_subtask4(case(), ANSWER, RunConfig("m", "s4-p1"), backend, registry)
        assert result.outcome.ok
        assert result.outcome.value.entries == {1: [1, 2], 2: [3]}
        assert result.raw_text_pass2 is None

    def test_lenient_parse_fills_missing_entry(self, registry):
        backend = constant_backend('{"S1": [1]}')
        result = run_subtask4(case(), ANSWER, RunConfig("m", "s4-p1"), backend, registry)
        assert result.outcome.ok
        assert result.outcome.value.entries == {1: [1], 2: []}
        assert result.outcome.warnings

    def test_two_pass_fills_empty_entries(self, registry):
        backend = backend_with([
            ("Remaining uncited answer sentences", '{"S2": [2]}'),
            ("", '{"S1": [1], "S2": []}'),
        ])
        config = RunConfig("m", "s4-p1", two_pass=True)
        result = run_subtask4(case(), ANSWER, config, backend, registry)
        assert result.outcome.ok
        assert result.outcome.value.entries == {1: [1], 2: [2]}
        assert result.raw_text_pass2 == '{"S2": [2]}'
        assert result.raw_text == '{"S1": [1], "S2": []}'

    def test_two_pass_skipped_when_nothing_is_empty(self, registry):
        calls = []

        def responder(request):
            calls.append(request.payload.user)
            return '{"S1": [1], "S2": [2]}'

        config = RunConfig("m", "s4-p1", two_pass=True)
        result = run_subtask4(case(), ANSWER, config, MockBackend(responder=responder),
                              registry)
        assert result.outcome.ok
        assert len(calls) == 1
        assert result.raw_text_pass2 is None

    def test_unusable_second_pass_keeps_first_map(self, registry):
        backend = backend_with([
            ("Remaining uncited answer sentences", "still can't tell"),
            ("", '{"S1": [1], "S2": []}'),
        ])
        config = RunConfig("m", "s4-p1", two_pass=True)
        result = run_subtask4(case(), ANSWER, config, backend, registry)
        assert result.outcome.ok
        assert result.outcome.value.entries == {1: [1], 2: []}
        assert any("second pass unusable" in w for w in result.outcome.warnings)
        assert result.raw_text_pass2 == "still can't tell"

    def test_failing_second_pass_degrades_with_warning(self, registry):
        class FlakyBackend(MockBackend):
            def _invoke(self, request):
                if "Remaining uncited answer sentences" in request.payload.user:
                    raise TransportError("boom")
                return super()._invoke(request)

        backend = FlakyBackend(responder=lambda request: '{"S1": [1], "S2": []}')
        config = RunConfig("m", "s4-p1", two_pass=True)
        result = run_subtask4(case(), ANSWER, config, backend, registry)
        assert result.outcome.ok
        assert result.outcome.value.entries == {1: [1], 2: []}
        assert any("second pass failed" in w for w in result.outcome.warnings)
        assert result.raw_text_pass2 is None


class TestMergePasses:
    def test_fills_only_empty_entries(self):
        pass1 = {1: [2], 2: [], 3: []}
        pass2 = {2: [5], 3: []}
        assert merge_alignment_passes(pass1, pass2) == {1: [2], 2: [5], 3: []}

    def test_second_pass_cannot_override(self):
        assert merge_alignment_passes({1: [2]}, {1: [9]}) == {1: [2]}

    @given(
        st.dictionaries(st.integers(1, 6), st.lists(st.integers(1, 9), max_size=3),
                        min_size=1, max_size=6),
        st.dictionaries(st.integers(1, 6), st.lists(st.integers(1, 9), max_size=3),
                        max_size=6),
    )
    def test_merge_rule_holds_pointwise(self, pass1, pass2):
        merged = merge_alignment_passes(pass1, pass2)
        assert set(merged) == set(pass1)
        for idx, ids in pass1.items():
            expected = ids if ids else pass2.get(idx, [])
            assert merged[idx] == list(expected)
        # a merge never empties an entry that had citations
        assert sum(1 for v in merged.values() if not v) <= sum(
            1 for v in pass1.values() if not v
        )


class TestRunMatrix:
    CONFIGS = [RunConfig("m1", "s2-p3"), RunConfig("m2", "s2-p4")]

    def cases(self):
        return [case("case-a"), case("case-b", sentences=("One.", "Two."))]

    def test_grid_shape(self, registry):
        grid = run_matrix(self.cases(), self.CONFIGS, MockBackend(), registry,
                          Subtask.Q2)
        assert grid.models == ["m1", "m2"]
        assert grid.templates == ["s2-p3", "s2-p4"]
        assert grid.case_ids == ["case-a", "case-b"]
        assert set(grid.cells) == {("m1", "s2-p3"), ("m2", "s2-p4")}
        assert [r.case_id for r in grid.cell("m1", "s2-p3")] == ["case-a", "case-b"]

    def test_duplicate_config_rejected(self, registry):
        configs = [RunConfig("m1", "s2-p3"), RunConfig("m1", "s2-p3")]
        with pytest.raises(InvalidRunConfig):
            run_matrix(self.cases(), configs, MockBackend(), registry, Subtask.Q2)

    def test_wrong_subtask_rejected(self, registry):
        with pytest.raises(InvalidRunConfig):
            run_matrix(self.cases(), [RunConfig("m1", "s1-p1")], MockBackend(),
                       registry, Subtask.Q2)

    def test_no_configs_rejected(self, registry):
        with pytest.raises(InvalidRunConfig):
            run_matrix(self.cases(), [], MockBackend(), registry, Subtask.Q2)

    def test_parallel_equals_serial(self, registry):
        serial = run_matrix(self.cases(), self.CONFIGS, MockBackend(), registry,
                            Subtask.Q2, parallelism=1)
        parallel = run_matrix(self.cases(), self.CONFIGS, MockBackend(), registry,
                              Subtask.Q2, parallelism=4)
        for key in serial.cells:
            left = [case_result_to_dict(r) for r in serial.cells[key]]
            right = [case_result_to_dict(r) for r in parallel.cells[key]]
            assert left == right

    def test_q4_pulls_answers_by_case_id(self, registry):
        answers = {"case-a": ANSWER}  # case-b has none and must fail
        grid = run_matrix(self.cases(), [RunConfig("m1", "s4-p1")],
                          constant_backend('{"S1": [1], "S2": [1]}'), registry,
                          Subtask.Q4, answers=answers)
        results = grid.cell("m1", "s4-p1")
        assert results[0].outcome.ok
        assert results[1].outcome.failure_kind is FailureKind.MISSING_ANSWER


OUTCOMES = [
    ParseOutcome.success(make_query("Why now?")),
    ParseOutcome.success(EvidenceSelection(sentence_ids=(1, 3))),
    ParseOutcome.success(GeneratedAnswer.from_text("One. Two.")),
    ParseOutcome.success(AlignmentMap(entries={1: [2], 2: []}), warnings=["w"]),
    ParseOutcome.failure(FailureKind.UNPARSEABLE, "nope"),
]


class TestSerialization:
    @pytest.mark.parametrize("outcome", OUTCOMES)
    def test_outcome_round_trip(self, outcome):
        doc = outcome_to_dict(outcome)
        json.dumps(doc)  # must already be plain JSON types
        back = outcome_from_dict(doc)
        assert outcome_to_dict(back) == doc
        assert back.ok == outcome.ok
        assert back.warnings == outcome.warnings

    def test_persisted_result_drops_runtime_details(self):
        result = CaseResult(
            case_id="c", model_id="m", template_id="t",
            outcome=OUTCOMES[0], raw_text="raw",
            prompt_tokens=5, completion_tokens=2, cost_usd=0.1,
            latency_ms=123, from_cache=True,
        )
        doc = case_result_to_dict(result)
        assert "latency_ms" not in doc
        assert "from_cache" not in doc
        assert "raw_text_pass2" not in doc

    def test_case_result_round_trip(self):
        result = CaseResult(
            case_id="c", model_id="m", template_id="t",
            outcome=OUTCOMES[3], raw_text="raw", raw_text_pass2="raw2",
            prompt_tokens=5, completion_tokens=2, cost_usd=0.1,
        )
        doc = case_result_to_dict(result)
        back = case_result_from_dict(doc)
        assert case_result_to_dict(back) == doc
        assert back.raw_text_pass2 == "raw2"


class TestGridFiles:
    def grid(self, registry):
        backend = backend_with([
            ("zebra", "not json at all"),
            ("", '{"sentence_ids": [1]}'),
        ])
        cases = [case("case-a"),
                 case("case-b", sentences=("First zebra fact.", "Second zebra fact."))]
        return run_matrix(cases, [RunConfig("m1", "s2-p3")], backend, registry,
                          Subtask.Q2)

    def test_round_trip(self, registry, tmp_path):
        grid = self.grid(registry)
        manifest_path = write_grid(grid, tmp_path / "run", manifest_extra={"note": "x"})
        loaded, manifest = read_grid(tmp_path / "run")
        assert manifest_path.name == "manifest.json"
        assert manifest["subtask"] == "Q2"
        assert manifest["cases"] == ["case-a", "case-b"]
        assert manifest["note"] == "x"
        left = [case_result_to_dict(r) for r in grid.cell("m1", "s2-p3")]
        right = [case_result_to_dict(r) for r in loaded.cell("m1", "s2-p3")]
        assert left == right

    def test_cell_file_records_failures(self, registry, tmp_path):
        write_grid(self.grid(registry), tmp_path / "run")
        cell_path = tmp_path / "run" / "cells" / cell_filename("m1", "s2-p3")
        doc = json.loads(cell_path.read_text())
        assert [f["case_id"] for f in doc["failures"]] == ["case-b"]
        assert doc["failures"][0]["failure_kind"] == "unparseable"
        # raw model text never lands in the failure sidecar, only its digest
        assert "not json at all" not in json.dumps(doc["failures"])

    def test_cell_filename_sanitizes(self):
        name = cell_filename("org/model:8b", "s2 p3")
        assert name == "org_model_8b__s2_p3.json"


class TestTimestamp:
    def test_env_override(self, monkeypatch):
        monkeypatch.setenv(TIMESTAMP_ENV, "2026-01-01T00:00:00+00:00")
        assert run_timestamp() == "2026-01-01T00:00:00+00:00"

    def test_default_is_utc_iso(self, monkeypatch):
        monkeypatch.delenv(TIMESTAMP_ENV, raising=False)
        stamp = run_timestamp()
        parsed = datetime.datetime.fromisoformat(stamp)
        assert parsed.tzinfo is not None


def test_digest_helpers(tmp_path):
    path = tmp_path / "f.json"
    path.write_text('{"a": 1}')
    assert len(file_digest(path)) == 64
    assert config_digest({"a": 1}) == config_digest({"a": 1})
    assert config_digest({"a": 1}) != config_digest({"a": 2})
