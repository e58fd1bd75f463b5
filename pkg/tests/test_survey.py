import itertools
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from pydantic import ValidationError
from scipy.stats import mannwhitneyu

from schemas.survey import LIKERT_VALUES, ResponseSet
from services.exceptions import EmptyCollection, ItemMismatch, MalformedResponse
from services.survey_service import (
    agreement_fractions,
    analyze_survey,
    comparison_report,
    diff_means,
    load_responses,
    mann_whitney_u,
    mean,
    pooled_mean,
    response_counts,
    response_sets,
)


def responses(values, review_type="AI", item_id="q1", role="all"):
    return ResponseSet(role=role, review_type=review_type, item_id=item_id, values=list(values))


likert = st.sampled_from(LIKERT_VALUES)


# ---------- descriptive ----------
def test_mean_is_exact():
    assert mean(responses([2, 1, 0, -1])) == Fraction(1, 2)
    assert mean(responses([1, 1, 0])) == Fraction(2, 3)


def test_pooled_mean_weights_by_size():
    assert pooled_mean([responses([2, 2]), responses([0, 0, 0, -1])]) == Fraction(1, 2)


@given(st.lists(st.lists(likert, min_size=1, max_size=20), min_size=1, max_size=5))
def test_pooled_mean_equals_mean_of_concatenation(groups):
    combined = [value for group in groups for value in group]
    assert pooled_mean([responses(group) for group in groups]) == mean(responses(combined))


def test_diff_means_sign_and_item_check():
    ai, human = responses([2, 1]), responses([0, -1], review_type="human")
    assert diff_means(ai, human) == Fraction(2)
    with pytest.raises(ItemMismatch):
        diff_means(ai, responses([0], review_type="human", item_id="q2"))


def test_agreement_fractions():
    fractions = agreement_fractions(responses([2, 1, 0, -1, -2]))
    assert (fractions.agree, fractions.disagree, fractions.neutral) == (Fraction(2, 5), Fraction(2, 5), Fraction(1, 5))


def test_empty_and_out_of_range():
    with pytest.raises(EmptyCollection):
        mean(responses([]))
    with pytest.raises(EmptyCollection):
        pooled_mean([])
    with pytest.raises(ValidationError):
        responses([3])


# ---------- mann-whitney ----------
def test_exact_test_without_ties():
    result = mann_whitney_u(responses([2, 1]), responses([0, -1, -2], review_type="human"))
    assert result.method == "exact"
    assert result.u_statistic == 6.0
    assert result.p_value == pytest.approx(0.2)
    reference = mannwhitneyu([2, 1], [0, -1, -2], alternative="two-sided", method="exact")
    assert result.p_value == pytest.approx(reference.pvalue)


def test_exact_test_conditions_on_ties():
    result = mann_whitney_u(responses([2, 2, 1]), responses([0, -1, 0], review_type="human"))
    assert result.u_statistic == 9.0
    assert result.p_value == pytest.approx(0.1)


def brute_force_p(a, b):
    """라벨 재배정 전체 열거 (scipy 의 U 통계량 사용)"""
    pooled = a + b
    center = len(a) * len(b) / 2
    observed = abs(mannwhitneyu(a, b).statistic - center)
    extreme = total = 0
    for picked in itertools.combinations(range(len(pooled)), len(a)):
        left = [pooled[i] for i in picked]
        right = [pooled[i] for i in range(len(pooled)) if i not in picked]
        total += 1
        if abs(mannwhitneyu(left, right).statistic - center) >= observed - 1e-9:
            extreme += 1
    return extreme / total


@settings(max_examples=30, deadline=None)
@given(st.lists(likert, min_size=1, max_size=5), st.lists(likert, min_size=1, max_size=5))
def test_exact_p_matches_enumeration(a, b):
    result = mann_whitney_u(responses(a), responses(b, review_type="human"))
    assert result.method == "exact"
    assert result.u_statistic == pytest.approx(mannwhitneyu(a, b).statistic)
    assert result.p_value == pytest.approx(brute_force_p(a, b))


@settings(max_examples=50, deadline=None)
@given(st.lists(likert, min_size=8, max_size=40), st.lists(likert, min_size=8, max_size=40))
def test_normal_approximation_matches_scipy(a, b):
    assume(len(set(a + b)) > 1)
    result = mann_whitney_u(responses(a), responses(b, review_type="human"))
    reference = mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    assert result.method == "normal"
    assert result.u_statistic == pytest.approx(reference.statistic)
    assert result.p_value == pytest.approx(reference.pvalue, rel=1e-9, abs=1e-12)


def test_exact_cutoff_is_configurable():
    a, b = responses([2, 1, 1, 0]), responses([0, -1, -1, 0], review_type="human")
    assert mann_whitney_u(a, b).method == "exact"
    assert mann_whitney_u(a, b, exact_max_n=7).method == "normal"


# ---------- report ----------
def test_comparison_report_flags_significance():
    high = responses([2] * 30 + [1] * 10)
    low = responses([-2] * 20 + [-1] * 20, review_type="human")
    same = responses([0, 1] * 10, review_type="human")
    results = comparison_report([(high, low), (high, same.model_copy(update={"values": [2] * 30 + [1] * 10}))], alpha=0.01)
    assert results[0].significant and results[0].delta == Fraction(13, 4)
    assert not results[1].significant
    with pytest.raises(ItemMismatch):
        comparison_report([(low, high)])


CSV = """role,review_type,item_id,value
author,AI,q1,2
author,human,q1,0
PC,AI,q1,1
PC,human,q1,-1
AC,AI,q2,1
SPC,human,q2,2
author,AI,q2,-2
"""


@pytest.fixture
def responses_csv(tmp_path):
    path = tmp_path / "responses.csv"
    path.write_text(CSV, encoding="utf-8")
    return str(path)


def test_response_sets_by_group(responses_csv):
    frame = load_responses(responses_csv)
    overall = response_sets(frame)
    assert [(ai.item_id, ai.values, human.values) for ai, human in overall] == [("q1", [2, 1], [0, -1]), ("q2", [1, -2], [2])]
    authors = response_sets(frame, "authors")
    assert [ai.item_id for ai, _ in authors] == ["q1"]
    reviewers = response_sets(frame, "reviewers")
    assert [(ai.role, ai.values, human.values) for ai, human in reviewers] == [("reviewers", [1], [-1]), ("reviewers", [1], [2])]
    with pytest.raises(ValueError):
        response_sets(frame, "chairs")


def test_response_counts(responses_csv):
    counts = response_counts(load_responses(responses_csv))
    assert counts.loc["AI", "author"] == 2
    assert counts.loc["total", "total"] == 7
    assert list(counts.columns) == ["author", "PC", "SPC", "AC", "total"]


@pytest.mark.parametrize(
    "line, row",
    [
        ("reviewer,AI,q1,1", 3),
        ("PC,LLM,q1,1", 3),
        ("PC,AI,,1", 3),
        ("PC,AI,q1,often", 3),
        ("PC,AI,q1,3", 3),
    ],
)
def test_malformed_rows_report_row_number(tmp_path, line, row):
    path = tmp_path / "bad.csv"
    path.write_text("role,review_type,item_id,value\nauthor,AI,q1,2\nPC,human,q1,0\n" + line + "\n", encoding="utf-8")
    with pytest.raises(MalformedResponse) as excinfo:
        load_responses(str(path))
    assert excinfo.value.row == row
    assert f"row {row}" in str(excinfo.value)


def test_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("role,item_id,value\nPC,q1,1\n", encoding="utf-8")
    with pytest.raises(MalformedResponse, match="review_type"):
        load_responses(str(path))


def test_analyze_survey_is_deterministic(responses_csv, tmp_path):
    first = analyze_survey(responses_csv, str(tmp_path / "a"))
    second = analyze_survey(responses_csv, str(tmp_path / "b"))
    assert first["responses"] == 7
    assert first["comparisons"] == 5
    with open(first["comparison_csv"], "rb") as f1, open(second["comparison_csv"], "rb") as f2:
        assert f1.read() == f2.read()

    table = pd.read_csv(first["comparison_csv"], dtype=str)
    q1 = table[(table["group"] == "overall") & (table["item_id"] == "q1")].iloc[0]
    assert q1["mean_ai"] == "1.5000"
    assert q1["delta"] == "+2.0000"
    assert q1["method"] == "exact"


def test_normal_approximation_tracks_exact_near_the_cutoff():
    rng = np.random.default_rng(7)
    gaps = []
    for _ in range(40):
        n_a = int(rng.integers(5, 8))
        n_b = int(rng.integers(5, 8))
        a = responses(rng.choice(LIKERT_VALUES, size=n_a).tolist())
        b = responses(rng.choice(LIKERT_VALUES, size=n_b).tolist(), review_type="human")
        exact = mann_whitney_u(a, b, exact_max_n=14)
        normal = mann_whitney_u(a, b, exact_max_n=0)
        assert exact.method == "exact" and normal.method == "normal"
        assert exact.u_statistic == normal.u_statistic
        gaps.append(abs(exact.p_value - normal.p_value))
    assert float(np.mean(gaps)) <= 0.05
