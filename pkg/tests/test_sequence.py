import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_planner.core import LABELS, CalibrationRecord, ConfidenceVector, adjust_epsilon, fit, predict_set
from conformal_planner.harness import calibrate_on, sequence_record
from conformal_planner.scenario import sample_scenarios
from conformal_planner.scorer import ScorerSpec, SyntheticScorer
from conformal_planner.sequence import (
    MAX_ENUMERATION_HORIZON,
    SequenceRecord,
    beta_bar_reduce,
    causal_step_set,
    fit_sequence,
    noncausal_sequence_set,
    sequence_score,
)

from _oracles import naive_quantile


def cv(**scores):
    return ConfidenceVector.from_mapping(scores)


def product(sets):
    return set(itertools.product(*[s.ranking for s in sets]))


# -- scores -----------------------------------------------------------------

def test_sequence_score_is_minimum():
    steps = (cv(A=0.9), cv(B=0.6), cv(C=0.8))
    assert sequence_score(SequenceRecord(steps, true_labels=("A", "B", "C"))) == pytest.approx(0.6)
    assert sequence_score(SequenceRecord((cv(D=0.35),), true_labels=("D",))) == pytest.approx(0.35)
    assert sequence_score(SequenceRecord((cv(A=0.5), cv(A=0.5)), true_labels="AA")) == 0.5


def test_sequence_score_length_mismatch():
    record = SequenceRecord((cv(A=0.5), cv(A=0.5)), true_labels="AA")
    with pytest.raises(ValueError):
        sequence_score(record, ("A",))
    with pytest.raises(ValueError):
        SequenceRecord((cv(A=0.5),), true_labels="AB")


def test_beta_bar_walks_the_tree():
    steps = (cv(A=0.5, B=0.4), cv(C=0.9))
    tree = {(): frozenset("AB"), ("A",): frozenset("C"), ("B",): frozenset("D")}
    assert beta_bar_reduce(SequenceRecord(steps, tree=tree)) == ("A", "C")


def test_beta_bar_singletons():
    steps = (cv(A=0.1, E=0.9), cv(A=0.1, E=0.9))
    tree = {(): frozenset("B"), ("B",): frozenset("D")}
    assert beta_bar_reduce(SequenceRecord(steps, tree=tree)) == ("B", "D")


def test_beta_bar_ties_alphabetical():
    flat = ConfidenceVector((0.2,) * 5)
    tree = {(): frozenset("CE"), ("C",): frozenset("DB"), ("E",): frozenset("A")}
    assert beta_bar_reduce(SequenceRecord((flat, flat), tree=tree)) == ("C", "B")


def test_beta_bar_missing_branch():
    tree = {(): frozenset("A")}
    with pytest.raises(ValueError):
        beta_bar_reduce(SequenceRecord((cv(A=1.0), cv(A=1.0)), tree=tree))


# -- fit --------------------------------------------------------------------

def test_horizon_one_matches_single_step_fit():
    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.ones(5), size=300)
    truth = rng.integers(0, 5, size=300)
    seqs = [SequenceRecord((ConfidenceVector(tuple(p)),), true_labels=(LABELS[y],)) for p, y in zip(probs, truth)]
    flat = [CalibrationRecord(ConfidenceVector(tuple(p)), true_label=LABELS[y]) for p, y in zip(probs, truth)]
    a, b = fit_sequence(seqs, 0.2, 0.05), fit(flat, 0.2, 0.05)
    assert (a.q_hat, a.epsilon_hat, a.n) == (b.q_hat, b.epsilon_hat, b.n)
    assert a.mode == "sequence"


def test_constant_confidence_any_horizon():
    records = [SequenceRecord((cv(A=0.9, B=0.1),) * t, true_labels="A" * t) for t in (1, 2, 3, 4)] * 100
    assert fit_sequence(records, 0.15, 0.01).q_hat == pytest.approx(0.1)
    assert fit_sequence(records, 0.15, 0.01).n == 400


def test_mixed_modes_rejected():
    single = SequenceRecord((cv(A=1.0),), true_labels="A")
    multi = SequenceRecord((cv(A=1.0),), tree={(): frozenset("A")})
    with pytest.raises(ValueError):
        fit_sequence([single, multi] * 200, 0.2, 0.05)


def test_sorting_generator_fit_matches_naive_oracle():
    scenarios = sample_scenarios("sorting", 400, 0)
    scorer = SyntheticScorer(ScorerSpec())
    model = calibrate_on(scenarios, scorer, 0, 0.25, 0.01)
    scores = [1.0 - sequence_score(sequence_record(scorer, s, 0)) for s in scenarios]
    assert model.q_hat == naive_quantile(scores, adjust_epsilon(0.25, 0.01, 400))
    assert model.mode == "sequence"


# -- sets -------------------------------------------------------------------

def test_causal_set_examples():
    # B sits exactly on the threshold 0.5 and is kept
    conf = cv(A=0.5, B=0.5)
    assert causal_step_set(0.5, conf).ranking == ("A", "B")
    conf = cv(A=0.6, B=0.25, C=0.15)
    assert causal_step_set(0.75, conf).ranking == ("A", "B")
    assert causal_step_set(0.0, cv(A=1.0)).ranking == ("A",)
    assert len(causal_step_set(0.0, conf)) == 0
    assert causal_step_set(1.0, conf).members == set(LABELS)


def test_noncausal_example():
    steps = [cv(A=0.4, B=0.35, C=0.25), cv(C=0.8, D=0.2)]
    assert {s.members for s in (causal_step_set(0.65, c) for c in steps)} == {frozenset("AB"), frozenset("C")}
    assert noncausal_sequence_set(0.65, steps) == {("A", "C"), ("B", "C")}


def test_noncausal_everything_at_one():
    steps = [cv(A=0.6), cv(C=0.8)]
    assert len(noncausal_sequence_set(1.0, steps)) == 25


def test_noncausal_accepts_record():
    record = SequenceRecord((cv(A=0.6, B=0.4), cv(C=0.8)), true_labels="AC")
    assert noncausal_sequence_set(0.5, record) == {("A", "C")}


def test_noncausal_horizon_cap():
    with pytest.raises(ValueError):
        noncausal_sequence_set(0.5, [cv(A=1.0)] * (MAX_ENUMERATION_HORIZON + 1))
    with pytest.raises(ValueError):
        noncausal_sequence_set(0.5, [])


@st.composite
def step_lists(draw):
    T = draw(st.integers(min_value=1, max_value=MAX_ENUMERATION_HORIZON))
    grid = st.sampled_from([0.0, 0.1, 0.2, 0.25, 0.3, 0.5, 0.7, 0.9, 1.0])
    steps = []
    for _ in range(T):
        raw = draw(st.lists(st.one_of(grid, st.floats(0.0, 1.0)), min_size=5, max_size=5))
        total = sum(raw)
        steps.append(ConfidenceVector(tuple(r / total for r in raw)) if total > 1 else ConfidenceVector(tuple(raw)))
    return steps


@settings(max_examples=300, deadline=None)
@given(step_lists(), st.one_of(st.sampled_from([i / 10 for i in range(11)]), st.floats(0.0, 1.0)))
def test_causal_product_equals_enumeration(steps, q_hat):
    assert product([causal_step_set(q_hat, c) for c in steps]) == noncausal_sequence_set(q_hat, steps)


def test_causal_sets_reduce_to_single_step():
    conf = cv(A=0.45, B=0.3, C=0.25)
    for q in (0.2, 0.55, 0.7, 0.8):
        assert causal_step_set(q, conf) == predict_set(q, conf)
