import csv
import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kendalltau as scipy_kendalltau

from ave.backend import CostLedger
from ave.matching import ConfusionVector, evaluate_instance
from ave.metrics import (
    EmptyAggregate,
    GlobalConfusion,
    MetricKind,
    aggregate_confusion,
    human_alignment_tau,
    kendall_tau,
    phi_apply,
    write_metric_report,
)
from oracles import phi_oracle, tau_oracle
from support import make_sample, match_backend


def cv(*values):
    return ConfusionVector(raw=(0, 0, 0, 0), normalized=tuple(values))


G = GlobalConfusion(0.5, 1, 0.25, 0.25, 2)


# -- aggregate_confusion -------------------------------------------------------------


def test_aggregate_examples():
    assert aggregate_confusion([]) == GlobalConfusion(0, 0, 0, 0, 0)
    assert aggregate_confusion([cv(0, 1, 0, 0)]) == GlobalConfusion(0, 1, 0, 0, 1)
    assert aggregate_confusion([cv(0, 1, 0, 0), cv(0.5, 0, 0.25, 0.25)]) == G


vectors = st.lists(
    st.tuples(*[st.integers(0, 4)] * 4).filter(lambda t: sum(t) > 0).map(lambda t: cv(*(v / sum(t) for v in t))),
    max_size=30,
)


@settings(max_examples=80, deadline=None)
@given(cs=vectors, seed=st.integers(0, 10**6))
def test_aggregate_permutation_invariant_and_sums_to_n(cs, seed):
    shuffled = list(cs)
    random.Random(seed).shuffle(shuffled)
    a = aggregate_confusion(cs)
    assert a == aggregate_confusion(shuffled)
    assert abs(a.tp + a.tn + a.fp + a.fn - a.n_instances) <= 1e-9


# -- phi_apply -------------------------------------------------------------------------


def test_phi_examples():
    assert phi_apply(MetricKind.F1, G) == pytest.approx(2 / 3, abs=1e-12)
    assert phi_apply(MetricKind.RECALL_MINUS_FPR, G) == pytest.approx(0.5 / 0.75 - 0.25 / 1.25, abs=1e-12)
    assert phi_apply(MetricKind.MCC, G) == pytest.approx(0.4375 / 0.9375, abs=1e-12)
    assert round(phi_apply(MetricKind.MCC, G), 6) == 0.466667


def test_phi_empty_aggregate():
    with pytest.raises(EmptyAggregate):
        phi_apply(MetricKind.F1, GlobalConfusion(0, 0, 0, 0, 0))


@pytest.mark.parametrize("kind", list(MetricKind))
@pytest.mark.parametrize("g", [(0, 1, 0, 0), (0, 0, 1, 0), (1, 0, 0, 0), (0, 0, 0, 1), (0, 2, 0, 1)])
def test_zero_denominators_give_zero(kind, g):
    value = phi_apply(kind, GlobalConfusion(*g, n_instances=sum(g)))
    assert value == phi_oracle(kind, *g)


@pytest.mark.parametrize("name, kind", [("f1", MetricKind.F1), ("MCC", MetricKind.MCC), ("rec-fpr", MetricKind.RECALL_MINUS_FPR), ("recall_minus_fpr", MetricKind.RECALL_MINUS_FPR)])
def test_metric_names(name, kind):
    assert MetricKind.parse(name) is kind


def test_unknown_metric_name():
    with pytest.raises(ValueError):
        MetricKind.parse("accuracy")


@settings(max_examples=300, deadline=None)
@given(t=st.tuples(*[st.floats(0, 50, allow_nan=False)] * 4), kind=st.sampled_from(list(MetricKind)))
def test_phi_against_rational_oracle_and_ranges(t, kind):
    value = phi_apply(kind, GlobalConfusion(*t, n_instances=1))
    assert abs(value - phi_oracle(kind, *t)) <= 1e-12
    lo = 0.0 if kind is MetricKind.F1 else -1.0
    assert lo - 1e-12 <= value <= 1 + 1e-12


# -- kendall_tau ------------------------------------------------------------------------


def test_tau_examples():
    assert kendall_tau([1, 2, 3], [10, 20, 30]) == 1.0
    assert kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0
    assert kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == tau_oracle([1, 2, 3, 4], [1, 3, 2, 4])
    assert kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(2 / 3, abs=1e-15)


def test_tau_errors_and_all_tied():
    with pytest.raises(ValueError):
        kendall_tau([1, 2], [1])
    with pytest.raises(ValueError):
        kendall_tau([1], [1])
    assert kendall_tau([1, 1, 1], [1, 2, 3]) == 0.0


int_lists = st.integers(2, 50).flatmap(lambda n: st.tuples(st.lists(st.integers(0, 6), min_size=n, max_size=n), st.lists(st.integers(0, 6), min_size=n, max_size=n)))


@settings(max_examples=200, deadline=None)
@given(pair=int_lists)
def test_tau_matches_pair_counting_oracle_and_scipy(pair):
    xs, ys = pair
    tau = kendall_tau(xs, ys)
    assert tau == tau_oracle(xs, ys)
    ref = scipy_kendalltau(xs, ys).statistic
    assert (0.0 if math.isnan(ref) else ref) == pytest.approx(tau, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(xs=st.lists(st.integers(-20, 20), min_size=2, max_size=30).filter(lambda v: len(set(v)) >= 2))
def test_tau_self_is_one_and_reversal_is_antisymmetric(xs):
    assert kendall_tau(xs, xs) == 1.0
    ys = list(range(len(xs)))
    assert kendall_tau(xs, [-y for y in ys]) == -kendall_tau(xs, ys)


@settings(max_examples=100, deadline=None)
@given(pair=int_lists)
def test_tau_invariant_under_increasing_transform(pair):
    xs, ys = pair
    assert kendall_tau([math.exp(x) for x in xs], [3 * y + 1 for y in ys]) == kendall_tau(xs, ys)


# -- human_alignment_tau ------------------------------------------------------------------


def evals_for(n_ref, n_pred):
    out = []
    for i, (a, b) in enumerate(zip(n_ref, n_pred)):
        y = [f"ref {i}.{k}" for k in range(a)]
        yhat = [f"pred {i}.{k}" for k in range(b)]
        ev = evaluate_instance(yhat, y, match_backend(), CostLedger(1.0))
        out.append((ev, make_sample(f"s{i}", weaknesses=y)))
    return out


def test_alignment_examples():
    assert human_alignment_tau(evals_for([0, 1, 2, 3], [0, 1, 2, 3])) == 1.0
    assert human_alignment_tau(evals_for([0, 1, 2, 3], [3, 2, 1, 0])) == -1.0
    assert human_alignment_tau(evals_for([0, 1, 2, 3], [0, 2, 1, 3])) == pytest.approx(2 / 3, abs=1e-15)


def test_alignment_verdict_strategy():
    evs = evals_for([0, 1, 0, 2], [0, 1, 0, 0])
    evs = [(ev, s.__class__(**{**s.__dict__, "verdict": "pass" if not s.weaknesses else "fail"})) for ev, s in evs]
    assert human_alignment_tau(evs, "verdict") == kendall_tau([1, 0, 1, 1], [1, 0, 1, 0])


def test_alignment_needs_two_instances():
    with pytest.raises(ValueError):
        human_alignment_tau(evals_for([1], [1]))


# -- reports ------------------------------------------------------------------------------


def test_report_writer(tmp_path):
    rows = [("perception", "f1", 0.5), ("physical_logical", "tau", -0.25)]
    write_metric_report(rows, tmp_path / "m.csv", tmp_path / "m.json")
    with open(tmp_path / "m.csv", newline="") as fh:
        table = list(csv.DictReader(fh))
    assert [(r["task_family"], r["metric"], float(r["value"])) for r in table] == rows
    assert json.loads((tmp_path / "m.json").read_text())[1] == {"task_family": "physical_logical", "metric": "tau", "value": -0.25}
