"""Ledger, efficiency curves, bootstrap statistics, agreement, strata."""

import io
import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nextquery.analytics import (
    LedgerRow,
    ScoreSample,
    TokenLedger,
    bootstrap_ci,
    efficiency_curve,
    fleiss_kappa,
    paired_bootstrap_p,
    rubric_level,
    spearman_rho,
    stratified_report,
    write_curves_csv,
    write_strata_csv,
)


def _row(cid="c1", turn=1, interface="full_history", inp=10, out=5, estimated=False):
    return LedgerRow(cid, turn, interface, inp, out, estimated)


# --- ledger -----------------------------------------------------------------


def test_ledger_row_validation():
    with pytest.raises(ValueError):
        _row(turn=0)
    with pytest.raises(ValueError):
        _row(inp=-1)


def test_ledger_round_trips_through_jsonl():
    ledger = TokenLedger([_row(), _row(turn=2, estimated=True)])
    buf = io.StringIO()
    ledger.write_jsonl(buf)
    buf.seek(0)
    recovered = TokenLedger.read_jsonl(buf)
    assert recovered.rows == ledger.rows


def test_ledger_filter_by_interface():
    ledger = TokenLedger([_row(interface="full_history"), _row(interface="recursive_memory")])
    assert len(ledger.filtered("recursive_memory")) == 1
    assert len(ledger.filtered()) == 2
    assert len(ledger) == 2


def test_efficiency_curve_averages_across_conversations():
    ledger = TokenLedger(
        [
            _row(cid="a", turn=1, inp=10),
            _row(cid="b", turn=1, inp=20),
            _row(cid="a", turn=2, inp=30),
        ]
    )
    assert efficiency_curve(ledger, "full_history") == [(1, 15.0), (2, 30.0)]


def test_efficiency_curve_sums_multi_call_turns():
    # summarize-then-predict logs two rows for the same (conversation, turn)
    ledger = TokenLedger(
        [
            _row(cid="a", turn=1, interface="summarize_then_predict", inp=40),
            _row(cid="a", turn=1, interface="summarize_then_predict", inp=15),
        ]
    )
    assert efficiency_curve(ledger, "summarize_then_predict") == [(1, 55.0)]


def test_efficiency_curve_ignores_other_interfaces():
    ledger = TokenLedger([_row(interface="full_history"), _row(interface="current_turn", inp=999)])
    assert efficiency_curve(ledger, "full_history") == [(1, 10.0)]


def test_curves_csv_layout():
    buf = io.StringIO()
    write_curves_csv({"full_history": [(1, 10.0), (2, 20.5)]}, buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "interface,turn,mean_input_tokens"
    assert lines[1] == "full_history,1,10.000"
    assert lines[2] == "full_history,2,20.500"


# --- bootstrap ---------------------------------------------------------------


def test_bootstrap_ci_is_deterministic():
    scores = list(np.random.default_rng(1).normal(70, 10, 40))
    assert bootstrap_ci(scores, seed=3) == bootstrap_ci(scores, seed=3)


def test_bootstrap_ci_brackets_the_mean():
    scores = list(np.random.default_rng(2).normal(50, 5, 60))
    mean, lo, hi = bootstrap_ci(scores)
    assert lo <= mean <= hi
    assert mean == pytest.approx(float(np.mean(scores)))


def test_bootstrap_ci_chunking_does_not_change_the_answer():
    # SeedSequence spawning pins each chunk's stream independently of how
    # many chunks run, so the full resample set is split-invariant
    scores = list(np.random.default_rng(3).normal(0, 1, 30))
    assert bootstrap_ci(scores, resamples=500, chunk_size=250, seed=9) == bootstrap_ci(
        scores, resamples=500, chunk_size=250, seed=9
    )


def test_bootstrap_ci_width_shrinks_with_n():
    rng = np.random.default_rng(4)
    small = list(rng.normal(0, 1, 20))
    big = list(rng.normal(0, 1, 2000))
    _, lo_s, hi_s = bootstrap_ci(small, seed=1)
    _, lo_b, hi_b = bootstrap_ci(big, seed=1)
    assert (hi_b - lo_b) < (hi_s - lo_s)


def test_bootstrap_ci_level_controls_width():
    scores = list(np.random.default_rng(5).normal(0, 1, 50))
    _, lo_wide, hi_wide = bootstrap_ci(scores, level=0.99, seed=2)
    _, lo_narrow, hi_narrow = bootstrap_ci(scores, level=0.5, seed=2)
    assert (hi_wide - lo_wide) > (hi_narrow - lo_narrow)


def test_bootstrap_ci_close_to_analytic_width():
    # CLT check: percentile CI width ~ 2 * 1.96 * sd/sqrt(n)
    rng = np.random.default_rng(6)
    scores = list(rng.normal(100, 15, 400))
    _, lo, hi = bootstrap_ci(scores, resamples=1000, seed=0)
    analytic = 2 * 1.959964 * np.std(scores) / math.sqrt(len(scores))
    assert abs((hi - lo) - analytic) / analytic < 0.1


@pytest.mark.parametrize(
    "kwargs", [{"scores": [1.0]}, {"scores": [1.0, 2.0], "level": 1.0}, {"scores": [1.0, 2.0], "resamples": 0}]
)
def test_bootstrap_ci_validation(kwargs):
    with pytest.raises(ValueError):
        bootstrap_ci(**kwargs)


def test_paired_p_zero_on_identical_inputs():
    scores = [50.0, 60.0, 70.0]
    assert paired_bootstrap_p(scores, scores) == 0.0


def test_paired_p_one_under_strict_dominance():
    a = [80.0, 85.0, 90.0, 95.0]
    b = [10.0, 15.0, 20.0, 25.0]
    assert paired_bootstrap_p(a, b) == 1.0
    assert paired_bootstrap_p(b, a) == 0.0


def test_paired_p_is_deterministic_and_mid_for_noise():
    rng = np.random.default_rng(8)
    a = list(rng.normal(0, 1, 50))
    b = list(rng.normal(0, 1, 50))
    p1 = paired_bootstrap_p(a, b, seed=4)
    assert p1 == paired_bootstrap_p(a, b, seed=4)
    assert 0.0 < p1 < 1.0


def test_paired_p_requires_alignment():
    with pytest.raises(ValueError):
        paired_bootstrap_p([1.0, 2.0], [1.0])


# --- agreement and correlation ----------------------------------------------------


def test_kappa_perfect_agreement_is_one():
    assert fleiss_kappa([["k", "k", "k"], ["d", "d", "d"]]) == 1.0


def test_kappa_perfect_agreement_single_category_saturates_to_one():
    # every rater picks the same label everywhere: chance agreement is 1,
    # the usual formula degenerates, the coefficient is still 1 by convention
    assert fleiss_kappa([["k", "k", "k"], ["k", "k", "k"]]) == 1.0


def test_kappa_matches_hand_computed_case():
    # two items, two raters: agree on the first, split on the second
    ratings = [["a", "a"], ["a", "b"]]
    # P_bar = (1 + 0) / 2; p_a = 3/4, p_b = 1/4; P_e = 9/16 + 1/16 = 5/8
    expected = (0.5 - 0.625) / (1 - 0.625)
    assert fleiss_kappa(ratings) == pytest.approx(expected)


def test_kappa_validation():
    with pytest.raises(ValueError):
        fleiss_kappa([])
    with pytest.raises(ValueError):
        fleiss_kappa([["a"]])
    with pytest.raises(ValueError):
        fleiss_kappa([["a", "b"], ["a"]])
    with pytest.raises(ValueError):
        fleiss_kappa([["a", "b", None]])


def _brute_force_kappa(ratings):
    r = len(ratings[0])
    n = len(ratings)
    agreements = []
    for row in ratings:
        agree = sum(1 for x, y in combinations(row, 2) if x == y)
        agreements.append(agree / (r * (r - 1) / 2))
    p_bar = sum(agreements) / n
    labels = sorted({l for row in ratings for l in row}, key=repr)
    p_e = sum((sum(row.count(l) for row in ratings) / (n * r)) ** 2 for l in labels)
    return (p_bar - p_e) / (1 - p_e)


def test_kappa_matches_pairwise_brute_force():
    rng = np.random.default_rng(12)
    for _ in range(25):
        n_items = int(rng.integers(2, 8))
        n_raters = int(rng.integers(2, 6))
        ratings = [
            [str(rng.integers(0, 3)) for _ in range(n_raters)] for _ in range(n_items)
        ]
        labels = {l for row in ratings for l in row}
        if len(labels) < 2:
            continue
        assert fleiss_kappa(ratings) == pytest.approx(_brute_force_kappa(ratings), abs=1e-12)


def test_spearman_perfect_monotone():
    assert spearman_rho([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman_rho([1, 2, 3, 4], [40, 30, 20, 10]) == pytest.approx(-1.0)


def test_spearman_handles_ties_with_average_ranks():
    # x ties on the middle pair; classic averaged-rank value
    rho = spearman_rho([1, 2, 2, 3], [1, 2, 3, 4])
    pearson_of_ranks = np.corrcoef([1, 2.5, 2.5, 4], [1, 2, 3, 4])[0, 1]
    assert rho == pytest.approx(float(pearson_of_ranks), abs=1e-12)


def test_spearman_matches_rank_pearson_brute_force():
    rng = np.random.default_rng(13)
    for _ in range(25):
        n = int(rng.integers(3, 12))
        x = rng.integers(0, 5, size=n).astype(float)
        y = rng.integers(0, 5, size=n).astype(float)
        if np.all(x == x[0]) or np.all(y == y[0]):
            continue
        def ranks(v):
            order = np.argsort(v, kind="stable")
            out = np.empty(n)
            i = 0
            while i < n:
                j = i
                while j + 1 < n and v[order[j + 1]] == v[order[i]]:
                    j += 1
                out[order[i : j + 1]] = (i + j) / 2 + 1
                i = j + 1
            return out
        expected = float(np.corrcoef(ranks(x), ranks(y))[0, 1])
        assert spearman_rho(x, y) == pytest.approx(expected, abs=1e-12)


def test_spearman_rejects_degenerate_inputs():
    with pytest.raises(ValueError):
        spearman_rho([1.0], [1.0])
    with pytest.raises(ValueError):
        spearman_rho([1.0, 1.0], [1.0, 2.0])


@given(
    st.lists(
        st.tuples(st.floats(0, 100, allow_nan=False), st.floats(0, 100, allow_nan=False)),
        min_size=3,
        max_size=20,
    )
)
@settings(max_examples=50)
def test_spearman_bounded(pairs):
    x = [p[0] for p in pairs]
    y = [p[1] for p in pairs]
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    assert -1.0 - 1e-9 <= spearman_rho(x, y) <= 1.0 + 1e-9


# --- stratified report ----------------------------------------------------------------


def test_rubric_level_maps_to_nearest_anchor():
    assert [rubric_level(s) for s in (0.0, 25.0, 50.0, 75.0, 100.0)] == [1, 2, 3, 4, 5]
    assert rubric_level(60.0) == 3
    assert rubric_level(70.0) == 4


def _samples():
    return [
        ScoreSample("a", {"memory": 75.0, "full": 50.0}, turns=3, difficulty="hard", transfer="deepening"),
        ScoreSample("b", {"memory": 100.0, "full": 75.0}, turns=7, difficulty="easy", transfer="deepening"),
        ScoreSample("c", {"memory": 50.0, "full": 50.0}, turns=12, difficulty="hard", transfer="challenge"),
    ]


def test_report_length_buckets():
    report = stratified_report(_samples())
    assert report.by_length["memory"] == {"2-5": 75.0, "6-9": 100.0, "10+": 50.0}
    assert report.n_samples == 3


def test_report_histogram_sums_to_100():
    report = stratified_report(_samples())
    for hist in report.rubric_histogram.values():
        assert sum(hist.values()) == pytest.approx(100.0)
        assert set(hist) == {1, 2, 3, 4, 5}
    assert report.rubric_histogram["full"][3] == pytest.approx(200.0 / 3)


def test_report_difficulty_transfer_strata():
    report = stratified_report(_samples())
    assert report.by_difficulty_transfer["memory"]["hard/deepening"] == 75.0
    assert report.by_difficulty_transfer["memory"]["hard/challenge"] == 50.0


def test_report_skips_unlabeled_samples_in_strata_only():
    samples = [ScoreSample("x", {"m": 50.0}, turns=2)]
    report = stratified_report(samples)
    assert report.by_difficulty_transfer == {}
    assert report.by_length["m"] == {"2-5": 50.0}


def test_report_out_of_bucket_turns_skip_length_table():
    samples = [ScoreSample("x", {"m": 50.0}, turns=1)]
    report = stratified_report(samples)
    assert report.by_length == {}
    assert report.rubric_histogram["m"][3] == 100.0


def test_report_requires_samples():
    with pytest.raises(ValueError):
        stratified_report([])


def test_score_sample_validation():
    with pytest.raises(ValueError):
        ScoreSample("x", {"m": 101.0}, turns=2)
    with pytest.raises(ValueError):
        ScoreSample("x", {"m": 50.0}, turns=0)


def test_report_to_dict_stringifies_levels():
    d = stratified_report(_samples()).to_dict()
    assert set(d["rubric_histogram"]["memory"]) == {"1", "2", "3", "4", "5"}
    assert d["n_samples"] == 3


def test_strata_csv_layout():
    buf = io.StringIO()
    write_strata_csv(stratified_report(_samples()), buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "method,stratum,mean_score"
    assert any(line.startswith("memory,turns:2-5,") for line in lines)
    assert any(line.startswith("memory,hard/deepening,") for line in lines)
