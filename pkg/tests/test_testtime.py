from __future__ import annotations

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolverify.backends import MockPolicy
from toolverify.errors import NoAnswerableCandidateError
from toolverify.synthetic import simulated_generator, simulated_verifier
from toolverify.testtime import (
    SCALING_BUDGETS,
    Candidate,
    SimulationModel,
    Strategy,
    aggregate,
    best_of_n,
    evaluate_benchmark,
    extract_answer,
    hard_weighted_sc,
    plain_self_consistency,
    score_candidate_sets,
    simulate_scaling,
    soft_weighted_sc,
)


def cands(answers, conf=None, judg=None):
    conf = conf or [0.5] * len(answers)
    judg = judg or [None] * len(answers)
    return [Candidate(f"The answer is ({a}).", a, j, c) for a, c, j in zip(answers, conf, judg)]


def test_extract_answer():
    assert extract_answer("Therefore, the dose is right. The answer is (B).") == "B"
    assert extract_answer("no conclusion") is None
    assert extract_answer("The answer is (A). Wait. the answer is ( d )") == "D"


def test_best_of_n_examples():
    assert best_of_n(cands("ABA", [0.2, 0.9, 0.4])).chosen_answer == "B"
    assert best_of_n(cands("C", [0.1])).chosen_answer == "C"
    assert best_of_n(cands("ABCD", [0.1, 0.7, 0.2, 0.7])).chosen_answer == "B"


def test_hard_weighted_examples():
    r = hard_weighted_sc(cands("ABA", judg=[1, 1, 0]))
    assert r.per_answer_scores == {"A": 1, "B": 1} and r.chosen_answer == "A"
    assert hard_weighted_sc(cands("AAB", judg=[1, 1, 1])).chosen_answer == "A"
    r = hard_weighted_sc(cands("AB", judg=[0, 0]))
    assert r.chosen_answer == "A" and r.fallback
    assert hard_weighted_sc(cands("BAB", judg=[None, None, 1])).chosen_answer == "B"


def test_soft_weighted_examples():
    r = soft_weighted_sc(cands("ABA", [0.9, 0.4, 0.3]))
    assert r.per_answer_scores == pytest.approx({"A": 1.2, "B": 0.4})
    assert r.chosen_answer == "A"
    assert soft_weighted_sc(cands("BA", [0.0, 0.0])).chosen_answer == "A"


def test_plain_examples():
    assert plain_self_consistency(cands("AAB")).chosen_answer == "A"
    assert plain_self_consistency(cands("AB")).chosen_answer == "A"
    rng = np.random.default_rng(0)
    answers = "".join(rng.choice(list("ABCDE"), size=32))
    counts = Counter(answers)
    want = min(counts, key=lambda a: (-counts[a], a))
    assert plain_self_consistency(cands(answers)).chosen_answer == want


def test_unanswerable_candidates():
    empty = [Candidate("nothing", None, 1, 0.9)]
    for s in Strategy:
        with pytest.raises(NoAnswerableCandidateError):
            aggregate(s, empty)
    # unanswerable ones are dropped from voting but counted
    r = plain_self_consistency(empty + cands("B"))
    assert r.chosen_answer == "B" and r.n_candidates == 2


def test_confidence_range():
    with pytest.raises(ValueError):
        Candidate("t", "A", 1, 1.5)


candidate_sets = st.lists(
    st.tuples(st.sampled_from("ABCDE"), st.floats(0.0, 1.0), st.sampled_from([0, 1, None])), min_size=1, max_size=32
)


def _build(rows):
    return [Candidate(f"The answer is ({a}).", a, j, c) for a, c, j in rows]


@settings(max_examples=500)
@given(candidate_sets, st.floats(0.01, 1.0))
def test_uniform_soft_equals_plain(rows, c):
    cs = [Candidate(x.trace_text, x.extracted_answer, x.judgment, c) for x in _build(rows)]
    assert soft_weighted_sc(cs).chosen_answer == plain_self_consistency(cs).chosen_answer


@settings(max_examples=500)
@given(candidate_sets)
def test_all_verified_hard_equals_plain(rows):
    cs = [Candidate(x.trace_text, x.extracted_answer, 1, x.confidence) for x in _build(rows)]
    h, p = hard_weighted_sc(cs), plain_self_consistency(cs)
    assert h.chosen_answer == p.chosen_answer
    assert h.per_answer_scores == p.per_answer_scores


@settings(max_examples=500)
@given(candidate_sets, st.floats(1e-3, 1.0))
def test_soft_scale_invariance(rows, k):
    # confidences are scaled down so they stay inside [0, 1]
    cs = _build(rows)
    scaled = [Candidate(x.trace_text, x.extracted_answer, x.judgment, x.confidence * k) for x in cs]
    a, b = soft_weighted_sc(cs), soft_weighted_sc(scaled)
    top = sorted(a.per_answer_scores.values(), reverse=True)
    if len(top) == 1 or top[0] - top[1] > 1e-9:
        assert a.chosen_answer == b.chosen_answer


@settings(max_examples=300)
@given(candidate_sets, st.randoms(use_true_random=False))
def test_permutation_stability(rows, rnd):
    cs = _build(rows)
    shuffled = list(cs)
    rnd.shuffle(shuffled)
    best = best_of_n(cs).chosen_answer
    assert best in {c.extracted_answer for c in cs}
    for s in (Strategy.SELF_CONSISTENCY, Strategy.HARD_WEIGHTED, Strategy.SOFT_WEIGHTED):
        a, b = aggregate(s, cs), aggregate(s, shuffled)
        top = sorted(a.per_answer_scores.values(), reverse=True)
        if len(top) == 1 or top[0] - top[1] > 1e-9:
            assert a.chosen_answer == b.chosen_answer
    confs = sorted((c.confidence for c in cs), reverse=True)
    if len(confs) == 1 or confs[0] > confs[1]:
        assert best_of_n(shuffled).chosen_answer == best


def test_single_candidate_all_strategies_agree():
    for rows in (("A", 0.1, 0), ("C", 0.9, 1), ("B", 0.5, None)):
        cs = _build([rows])
        assert {aggregate(s, cs).chosen_answer for s in Strategy} == {rows[0]}


def test_oracle_verifier_hard_never_below_plain():
    out = simulate_scaling(SimulationModel(p=0.55, q=1.0), 1000, seed=1)
    hard, plain = out["hard_weighted_sc"], out["self_consistency"]
    assert (hard.astype(int) >= plain.astype(int)).all()
    assert hard.mean(axis=0)[-1] > plain.mean(axis=0)[-1]


def test_simulate_scaling_shapes():
    out = simulate_scaling(SimulationModel(), 50, seed=0)
    assert set(out) == {s.value for s in Strategy}
    for arr in out.values():
        assert arr.shape == (50, len(SCALING_BUDGETS))
    # N = 1 column is the same single sample for every strategy
    first = [arr[:, 0] for arr in out.values()]
    assert all((f == first[0]).all() for f in first)


def test_score_candidate_sets_curve():
    sets = [("A", cands("ABA", [0.9, 0.8, 0.1], [1, 0, 0])), ("B", cands("AB", [0.2, 0.9], [0, 1]))]
    acc, curve, fallbacks = score_candidate_sets(sets, 3, list(Strategy), budgets=(1, 2))
    assert [row["n"] for row in curve] == [1, 2, 3]
    assert acc["best_of_n"] == 1.0
    assert curve[0]["self_consistency"] == 0.5
    assert fallbacks == 0


# end-to-end benchmark evaluation with simulated backends


def test_benchmark_n1_strategies_coincide(task, retriever):
    qs = task.benchmark(40, seed=5)
    report = evaluate_benchmark(qs, simulated_generator(0.55), simulated_verifier(0.8), retriever, N=1)
    assert len(set(report.accuracy.values())) == 1
    assert report.n_questions == 40 and report.skipped == 0


def test_benchmark_constant_verifier_reduces_to_plain(task, retriever):
    verifier = MockPolicy(responder=lambda req: "<think>fine</think><answer>1</answer>", logits=lambda ctx: (0.0, 0.0))
    qs = task.benchmark(30, seed=6)
    report = evaluate_benchmark(qs, simulated_generator(0.55), verifier, retriever, N=8)
    acc = report.accuracy
    assert acc["hard_weighted_sc"] == acc["self_consistency"]
    assert acc["soft_weighted_sc"] == acc["self_consistency"]
    # tied confidences: best-of-N keeps the first sample, i.e. N = 1 accuracy
    assert acc["best_of_n"] == report.curve[0]["self_consistency"]


def test_benchmark_skips_failing_questions(task, retriever):
    qs = task.benchmark(5, seed=7)
    report = evaluate_benchmark(qs, MockPolicy(), simulated_verifier(), retriever, N=2)
    assert report.skipped == 5
    assert all(v == 0 for v in report.accuracy.values())


def test_benchmark_rejects_zero_n(task, retriever):
    with pytest.raises(ValueError):
        evaluate_benchmark(task.benchmark(1, seed=0), simulated_generator(), simulated_verifier(), retriever, N=0)


def test_report_csv(tmp_path, task, retriever):
    report = evaluate_benchmark(task.benchmark(10, seed=8), simulated_generator(), simulated_verifier(), retriever, N=4)
    report.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].split(",")[0] == "n"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "2", "4"]
