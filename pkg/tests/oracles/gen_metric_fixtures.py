"""Freeze expected metric values for the fixture pairs.

Run from the repository root:

    python tests/oracles/gen_metric_fixtures.py

Rewrites tests/data/metric_fixtures.json. Regenerate only when the shared
tokenizer or a metric definition deliberately changes.
"""

from __future__ import annotations

import json
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import textmetrics_oracle as oracle

FIXTURES = [
    {
        "id": "identity",
        "note": "candidate equals the reference; rouge and bleu must be exactly 1.0",
        "source": "continue taking lisinopril each day.",
        "candidate": "you should continue taking lisinopril every day.",
        "references": ["you should continue taking lisinopril every day."],
    },
    {
        "id": "disjoint",
        "note": "no shared vocabulary; rouge and bleu must be exactly 0.0",
        "source": "delta echo foxtrot golf.",
        "candidate": "alpha bravo charlie.",
        "references": ["delta echo foxtrot."],
    },
    {
        "id": "single-substitution",
        "note": "one word differs; whole-text LCS is 5 of 6",
        "source": "the cat sat on the mat.",
        "candidate": "the cat sat on the mat.",
        "references": ["the cat lay on the mat."],
    },
    {
        "id": "multi-sentence",
        "note": "two sentences each side; exercises per-sentence union LCS",
        "source": "the dose of amlodipine was increased. take it nightly.",
        "candidate": "the dose was increased. take it nightly.",
        "references": ["the dose was increased. take it every night."],
    },
    {
        "id": "reorder",
        "note": "same bag of words, different order",
        "source": "rest daily and take aspirin.",
        "candidate": "take aspirin daily and rest.",
        "references": ["rest daily and take aspirin."],
    },
    {
        "id": "subset",
        "note": "candidate is a prefix of the reference; recall drops",
        "source": "your kidney function is stable and your blood counts are normal.",
        "candidate": "your kidney function is stable.",
        "references": ["your kidney function is stable and your blood counts are normal."],
    },
    {
        "id": "repetition-clipping",
        "note": "repeated token across sentences; exercises hit clipping",
        "source": "no no yes. no.",
        "candidate": "no no no. yes.",
        "references": ["no yes. no."],
    },
    {
        "id": "multi-reference",
        "note": "two references of lengths 5 and 3 around a 4-token candidate; the brevity-penalty tie goes to the shorter",
        "source": "initiate the prescribed antibiotic course tonight.",
        "candidate": "start the antibiotic tonight.",
        "references": [
            "please start the antibiotic tonight.",
            "begin antibiotics tonight.",
        ],
    },
    {
        "id": "simplification-rewrite",
        "note": "jargon replaced by plain terms; all three sari components active",
        "source": "the myocardial infarction was treated with percutaneous intervention.",
        "candidate": "the heart attack was treated with a procedure.",
        "references": [
            "the heart attack was treated with a procedure.",
            "doctors treated the heart attack with a procedure.",
        ],
    },
    {
        "id": "simplification-partial",
        "note": "partially correct rewrite; keeps, deletions and additions all imperfect",
        "source": "metformin was discontinued due to acute kidney injury.",
        "candidate": "metformin was stopped because your kidneys were hurt.",
        "references": ["metformin was stopped because of sudden kidney injury."],
    },
]


def main():
    out = []
    for fx in FIXTURES:
        expected = {
            "rouge_l": oracle.rouge_l(fx["candidate"], fx["references"][0]),
            "rouge_lsum": oracle.rouge_lsum(fx["candidate"], fx["references"][0]),
            "bleu": oracle.bleu(fx["candidate"], fx["references"]),
            "sari": oracle.sari(fx["source"], fx["candidate"], fx["references"]),
        }
        row = dict(fx)
        row["expected"] = expected
        out.append(row)
        print(f"{fx['id']:26s}", "  ".join(f"{k}={v:.10f}" for k, v in expected.items()))

    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    path = os.path.join(root, "data", "metric_fixtures.json")
    payload = {
        "generator": "tests/oracles/gen_metric_fixtures.py",
        "fixtures": out,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
