import itertools
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ave.backend import CostLedger, ScriptedBackend
from ave.matching import (
    PERFECT,
    ConfusionVector,
    ContractError,
    MatchOutcome,
    MatchProtocolError,
    confusion_from_sets,
    evaluate_instance,
    parse_match_reply,
    parse_match_request,
    render_match_request,
    semantic_set_match,
    synthesize_feedback,
)
from oracles import reference_semantic_matching
from support import concept_matcher, exact_matcher, match_backend


def feasible_cases(max_size=3):
    for sy, sh in itertools.product(range(max_size + 1), repeat=2):
        for n_tp in range(min(sy, sh) + 1):
            yield sy, sh, n_tp, sh - n_tp, sy - n_tp


def build(sy, sh, n_tp):
    y = [f"w{i}" for i in range(sy)]
    yhat = [f"m{j}" for j in range(sh)]
    outcome = MatchOutcome.from_index_pairs(y, yhat, [(i, i) for i in range(n_tp)]) if sy and sh else None
    return y, yhat, outcome


@pytest.mark.parametrize("case", list(feasible_cases()), ids=lambda c: "y{}_h{}_tp{}_fp{}_fn{}".format(*c))
def test_confusion_matches_reference_transcription(case):
    sy, sh, n_tp, n_fp, n_fn = case
    y, yhat, outcome = build(sy, sh, n_tp)
    c = confusion_from_sets(y, yhat, outcome)
    raw, score, perfect = reference_semantic_matching(sy, sh, n_tp, n_fp, n_fn)
    assert c.raw == raw
    assert c.normalized == tuple(float(f) for f in score)
    assert abs(math.fsum(c.normalized) - 1) <= 1e-12
    assert sum(raw) >= 1
    assert (synthesize_feedback(c, outcome, y, yhat) == PERFECT) == perfect


def test_confusion_examples():
    assert confusion_from_sets([], []).raw == (0, 1, 0, 0)
    assert confusion_from_sets([], []).normalized == (0, 1, 0, 0)
    assert confusion_from_sets(["w1"], []).normalized == (0, 0, 0, 1)
    y, yhat = ["w1", "w2"], ["m1", "m3"]
    outcome = MatchOutcome.from_index_pairs(y, yhat, [(0, 0)])
    c = confusion_from_sets(y, yhat, outcome)
    assert c.raw == (2, 0, 1, 1)
    assert c.normalized == (0.5, 0, 0.25, 0.25)


def test_tn_only_for_both_empty():
    hits = [case for case in feasible_cases() if confusion_from_sets(*build(*case[:3])).raw[1] == 1]
    assert [(c[0], c[1]) for c in hits] == [(0, 0)]


def test_outcome_contract():
    with pytest.raises(ContractError):
        confusion_from_sets(["a"], [], MatchOutcome.unmatched(["a"], []))
    with pytest.raises(ContractError):
        confusion_from_sets(["a"], ["b"])


# -- MatchOutcome and the wire format -------------------------------------------


def test_outcome_coverage():
    y, yhat = ["w1", "w2"], ["m1", "m3"]
    o = MatchOutcome.from_index_pairs(y, yhat, [(0, 0)])
    assert o.matched_pairs == (("w1", "m1"),)
    assert o.omissions == ("w2",) and o.hallucinations == ("m3",)


@pytest.mark.parametrize("pairs", [[(0, 0), (1, 0)], [(0, 0), (0, 1)], [(2, 0)], [(0, -1)], [(0, True)]])
def test_invalid_pairs_rejected(pairs):
    with pytest.raises(MatchProtocolError):
        MatchOutcome.from_index_pairs(["a", "b"], ["c", "d"], pairs)


def test_request_roundtrip_and_reply_parsing():
    y, yhat = ["a \"quoted\"", "line\nbreak"], ["c"]
    assert parse_match_request(render_match_request(y, yhat)) == (y, yhat)
    assert parse_match_reply('{"pairs": [[0, 1]]}') == [(0, 1)]
    assert parse_match_reply('Sure:\n```json\n{"pairs": []}\n```') == []
    assert parse_match_reply('blah {"pairs": [[1, 0]]} trailing') == [(1, 0)]
    with pytest.raises(MatchProtocolError):
        parse_match_reply("no json here")


def test_semantic_set_match_scripted_pairing():
    concepts = {"hand has six fingers": "fingers", "extra finger on left hand": "fingers"}
    backend = match_backend(concept_matcher(lambda s: concepts.get(s, s)))
    o = semantic_set_match(["hand has six fingers"], ["extra finger on left hand"], backend, CostLedger(1.0))
    assert len(o.matched_pairs) == 1 and o.omissions == () and o.hallucinations == ()


def test_semantic_set_match_partial():
    backend = ScriptedBackend(default='{"pairs": [[0, 0]]}')
    o = semantic_set_match(["w1", "w2"], ["m1", "m3"], backend, CostLedger(1.0))
    assert o.omissions == ("w2",) and o.hallucinations == ("m3",)


def test_one_to_one_violation_errors_after_one_retry():
    backend = ScriptedBackend(default='{"pairs": [[0, 0], [1, 0]]}')
    ledger = CostLedger(1.0)
    with pytest.raises(MatchProtocolError) as exc:
        semantic_set_match(["w1", "w2"], ["m1"], backend, ledger)
    assert len(backend.calls) == 2
    assert "more than once" in str(exc.value) and exc.value.raw_text


def test_retry_can_recover():
    backend = ScriptedBackend(queue=['{"pairs": [[5, 0]]}', '{"pairs": [[0, 0]]}'])
    o = semantic_set_match(["w1"], ["m1"], backend, CostLedger(1.0))
    assert o.matched_pairs == (("w1", "m1"),)


def test_semantic_set_match_requires_nonempty_sets():
    with pytest.raises(ContractError):
        semantic_set_match([], ["a"], match_backend(), CostLedger(1.0))


# -- feedback ----------------------------------------------------------------------


def test_feedback_examples():
    assert synthesize_feedback(ConfusionVector.from_raw(0, 1, 0, 0), None, [], []) == "Perfect prediction."
    y, yhat = ["w1", "w2"], ["m1", "m3"]
    o = MatchOutcome.from_index_pairs(y, yhat, [(0, 0)])
    c = confusion_from_sets(y, yhat, o)
    assert synthesize_feedback(c, o, y, yhat) == "Omissions: w2; Hallucinations: m3"
    c = confusion_from_sets([], ["m1"])
    assert synthesize_feedback(c, None, [], ["m1"]) == "Omissions: (none); Hallucinations: m1"
    c = confusion_from_sets(["w1", "w2"], [])
    assert synthesize_feedback(c, None, ["w1", "w2"], []) == "Omissions: w1; w2; Hallucinations: (none)"


def test_perfect_when_all_matched():
    y = ["a", "b"]
    o = MatchOutcome.from_index_pairs(y, y, [(0, 1), (1, 0)])
    c = confusion_from_sets(y, y, o)
    assert c.raw == (3, 0, 0, 0)
    assert synthesize_feedback(c, o, y, y) == PERFECT


# -- evaluate_instance ---------------------------------------------------------------


def test_evaluate_instance_examples():
    ledger = CostLedger(1.0)
    ev = evaluate_instance([], [], match_backend(), ledger)
    assert ev.feedback == PERFECT and ev.confusion.normalized == (0, 1, 0, 0)
    ev = evaluate_instance(["m1"], [], match_backend(), ledger)
    assert ev.confusion.normalized == (0, 0, 1, 0)
    assert ledger.entries == []

    backend = ScriptedBackend(default=json.dumps({"pairs": [[0, 0]]}))
    ev = evaluate_instance(["m1", "m3"], ["w1", "w2"], backend, ledger)
    assert ev.confusion.normalized == (0.5, 0, 0.25, 0.25)
    assert "w2" in ev.feedback and "m3" in ev.feedback
    assert ev.n_predicted == 2 and ev.n_referenced == 2


words = st.lists(st.sampled_from(["blur", "extra finger", "flicker", "wrong color", "bad physics", "no audio"]), unique=True, max_size=4)


@settings(max_examples=100, deadline=None)
@given(y=words, yhat=words)
def test_evaluate_instance_invariants(y, yhat):
    ev = evaluate_instance(yhat, y, match_backend(exact_matcher), CostLedger(10.0))
    o = ev.outcome
    assert len(o.matched_pairs) + len(o.omissions) == len(y)
    assert len(o.matched_pairs) + len(o.hallucinations) == len(yhat)
    assert abs(math.fsum(ev.confusion.normalized) - 1) <= 1e-12
    assert (ev.feedback == PERFECT) == (ev.confusion.raw[2] == 0 and ev.confusion.raw[3] == 0)
    assert (ev.confusion.raw[1] == 1) == (not y and not yhat)
