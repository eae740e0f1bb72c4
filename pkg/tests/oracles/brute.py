"""Brute-force reference implementations used only to check the library.

Everything here is written for obviousness, not speed: explicit loops,
no set algebra shortcuts, no shared code with the package under test.
"""

from __future__ import annotations

from itertools import combinations


def vote_by_counting(selections, threshold):
    """Per-id counting vote: an id is kept iff >= threshold voters chose it."""
    kept = []
    universe = []
    for sel in selections:
        for i in sel:
            if i not in universe:
                universe.append(i)
    for i in sorted(universe):
        count = 0
        for sel in selections:
            if i in sel:
                count += 1
        if count >= threshold:
            kept.append(i)
    return kept


def prf_by_enumeration(pred_by_case, gold_by_case):
    """Pooled tp/fp/fn by walking every id of every case one at a time.

    ``pred_by_case`` and ``gold_by_case`` map case id -> list of items
    (sentence ids, or (answer_idx, note_id) link pairs). A missing / None
    prediction counts as predicting nothing.
    """
    tp = fp = fn = 0
    for case_id, gold_items in gold_by_case.items():
        pred_items = pred_by_case.get(case_id) or []
        for item in pred_items:
            if item in gold_items:
                tp += 1
            else:
                fp += 1
        for item in gold_items:
            if item not in pred_items:
                fn += 1
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0, 1.0, 1.0, (tp, fp, fn)
    p = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    r = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return p, r, f, (tp, fp, fn)


def merge_two_pass(pass1, pass2):
    """Direct statement of the merge rule: pass 2 fills only empty entries."""
    merged = {}
    for key in pass1:
        if len(pass1[key]) > 0:
            merged[key] = list(pass1[key])
        elif key in pass2 and len(pass2[key]) > 0:
            merged[key] = list(pass2[key])
        else:
            merged[key] = []
    return merged


def majority_threshold(n_voters):
    return n_voters // 2 + 1


def exhaustive_ensemble_argmax(config_ids, selections_by_config, gold_by_case,
                               k_max, threshold_for=None):
    """Re-score every voter subset from scratch and return the argmax.

    ``selections_by_config`` maps config id -> {case id -> list of items or
    None for a failed case}; failed voters abstain. Ties break toward the
    smaller subset, then the lexicographically smaller tuple of config ids.
    Returns (best_subset, best_score, all_scored) with all_scored a list of
    (subset_tuple, score).
    """
    scored = []
    for size in range(2, min(k_max, len(config_ids)) + 1):
        for subset in combinations(config_ids, size):
            if threshold_for is None:
                threshold = majority_threshold(size)
            else:
                threshold = threshold_for(size)
            preds = {}
            for case_id in gold_by_case:
                ballots = []
                for cid in subset:
                    sel = selections_by_config[cid].get(case_id)
                    if sel is not None:
                        ballots.append(sel)
                preds[case_id] = vote_by_counting(ballots, threshold)
            _, _, f1, _ = prf_by_enumeration(preds, gold_by_case)
            scored.append((subset, f1))
    best = None
    for subset, score in scored:
        if best is None:
            best = (subset, score)
            continue
        b_subset, b_score = best
        if score > b_score:
            best = (subset, score)
        elif score == b_score:
            if (len(subset), tuple(subset)) < (len(b_subset), tuple(b_subset)):
                best = (subset, score)
    return best[0], best[1], scored
