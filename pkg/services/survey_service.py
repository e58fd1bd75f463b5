"""
Survey statistics
5점 Likert 응답(-2..2)의 평균, 풀링 평균, 평균 차이, 동의 비율, Mann-Whitney U 검정
내부 계산은 Fraction, 출력할 때만 소수 4자리
"""

import math
import os
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata

from schemas.survey import LIKERT_VALUES, REVIEWER_ROLES, ROLES, AgreementFractions, ComparisonResult, MannWhitneyResult, ResponseSet
from services.agents.utils import review_logger
from services.exceptions import EmptyCollection, ItemMismatch, MalformedResponse


RESPONSE_COLUMNS = ("role", "review_type", "item_id", "value")
REVIEW_TYPES = ("AI", "human")
GROUPS = {
    "overall": ROLES,
    "authors": ("author",),
    "reviewers": REVIEWER_ROLES,
}
DEFAULT_ALPHA = 0.01
DEFAULT_EXACT_MAX_N = 14


def _require(responses: ResponseSet):
    if not responses.values:
        raise EmptyCollection(f"no responses for item {responses.item_id} ({responses.role}, {responses.review_type})")


def mean(responses: ResponseSet) -> Fraction:
    _require(responses)
    return Fraction(sum(responses.values), len(responses.values))


def pooled_mean(groups: Sequence[ResponseSet]) -> Fraction:
    """크기 가중 풀링: sum(|R_i| * M(R_i)) / sum(|R_i|)"""
    if not groups:
        raise EmptyCollection("pooled_mean needs at least one group")
    for group in groups:
        _require(group)
    total = sum(len(group.values) * mean(group) for group in groups)
    return Fraction(total) / sum(len(group.values) for group in groups)


def diff_means(ai: ResponseSet, human: ResponseSet) -> Fraction:
    """양수 = AI 리뷰 쪽이 높음"""
    if ai.item_id != human.item_id:
        raise ItemMismatch(f"cannot compare item {ai.item_id} with item {human.item_id}")
    return mean(ai) - mean(human)


def agreement_fractions(responses: ResponseSet) -> AgreementFractions:
    _require(responses)
    n = len(responses.values)
    agree = sum(1 for value in responses.values if value >= 1)
    disagree = sum(1 for value in responses.values if value <= -1)
    return AgreementFractions(
        agree=Fraction(agree, n),
        disagree=Fraction(disagree, n),
        neutral=Fraction(n - agree - disagree, n),
    )


# ============= [MANN-WHITNEY U] ==============
def _doubled_midranks(values: Sequence[int]) -> np.ndarray:
    """중간 순위 x 2 (동점 순위가 .5 단위라 정수로 계산)"""
    return np.rint(2 * rankdata(values, method="average")).astype(np.int64)


def _exact_p(ranks2: np.ndarray, n_a: int, u2_observed: int) -> float:
    """동점 데이터에 조건부인 모든 라벨 배정 열거"""
    n_b = len(ranks2) - n_a
    center = n_a * n_b
    observed = abs(u2_observed - center)
    offset = n_a * (n_a + 1)
    extreme = 0
    total = 0
    for picked in combinations(range(len(ranks2)), n_a):
        u2 = int(ranks2[list(picked)].sum()) - offset
        total += 1
        if abs(u2 - center) >= observed:
            extreme += 1
    return float(Fraction(extreme, total))


def _normal_p(values: Sequence[int], n_a: int, u: float) -> float:
    """동점 보정 분산 + 연속성 보정"""
    n_b = len(values) - n_a
    n = n_a + n_b
    _, tie_counts = np.unique(values, return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(float) ** 3 - tie_counts))
    variance = n_a * n_b / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if variance <= 0:
        return 1.0
    z = max(abs(u - n_a * n_b / 2.0) - 0.5, 0.0) / math.sqrt(variance)
    return float(min(1.0, 2.0 * norm.sf(z)))


def mann_whitney_u(a: ResponseSet, b: ResponseSet, exact_max_n: int = DEFAULT_EXACT_MAX_N) -> MannWhitneyResult:
    """U = a 의 순위합 - n_a(n_a+1)/2. |a|+|b| <= exact_max_n 이면 정확 열거, 아니면 정규 근사"""
    _require(a)
    _require(b)
    pooled = list(a.values) + list(b.values)
    n_a = len(a.values)
    ranks2 = _doubled_midranks(pooled)
    u2 = int(ranks2[:n_a].sum()) - n_a * (n_a + 1)
    u = u2 / 2.0
    if len(pooled) <= exact_max_n:
        return MannWhitneyResult(u_statistic=u, p_value=_exact_p(ranks2, n_a, u2), method="exact")
    return MannWhitneyResult(u_statistic=u, p_value=_normal_p(pooled, n_a, u), method="normal")


# ============= [REPORT] ==============
def comparison_report(
    pairs: Sequence[Tuple[ResponseSet, ResponseSet]],
    group: str = "overall",
    alpha: float = DEFAULT_ALPHA,
    exact_max_n: int = DEFAULT_EXACT_MAX_N,
) -> List[ComparisonResult]:
    """(AI, human) 쌍마다 결과 하나, 입력 순서 유지"""
    results: List[ComparisonResult] = []
    for ai, human in pairs:
        if ai.review_type != "AI" or human.review_type != "human":
            raise ItemMismatch(f"item {ai.item_id}: expected an (AI, human) pair, got ({ai.review_type}, {human.review_type})")
        delta = diff_means(ai, human)
        test = mann_whitney_u(ai, human, exact_max_n)
        results.append(ComparisonResult(
            item_id=ai.item_id,
            group=group,
            n_ai=len(ai.values),
            n_human=len(human.values),
            mean_ai=mean(ai),
            mean_human=mean(human),
            delta=delta,
            u_statistic=test.u_statistic,
            p_value=test.p_value,
            method=test.method,
            significant=test.p_value < alpha,
        ))
    return results


def load_responses(csv_path: str) -> pd.DataFrame:
    """열: role, review_type, item_id, value. 잘못된 행은 1부터 세는 데이터 행 번호로 보고"""
    frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    missing = [column for column in RESPONSE_COLUMNS if column not in frame.columns]
    if missing:
        raise MalformedResponse(f"missing columns: {', '.join(missing)}", row=0)

    values: List[int] = []
    for index, record in enumerate(frame[list(RESPONSE_COLUMNS)].itertuples(index=False), start=1):
        role, review_type, item_id, raw = (str(field).strip() for field in record)
        if role not in ROLES:
            raise MalformedResponse(f"row {index}: unknown role {role!r}", row=index)
        if review_type not in REVIEW_TYPES:
            raise MalformedResponse(f"row {index}: unknown review type {review_type!r}", row=index)
        if not item_id:
            raise MalformedResponse(f"row {index}: empty item id", row=index)
        try:
            value = int(raw)
        except ValueError:
            raise MalformedResponse(f"row {index}: value {raw!r} is not an integer", row=index) from None
        if value not in LIKERT_VALUES:
            raise MalformedResponse(f"row {index}: value {value} outside the Likert scale -2..2", row=index)
        values.append(value)

    cleaned = frame[list(RESPONSE_COLUMNS)].apply(lambda column: column.str.strip())
    cleaned["value"] = values
    return cleaned


def response_sets(frame: pd.DataFrame, group: str = "overall") -> List[Tuple[ResponseSet, ResponseSet]]:
    """문항별 (AI, human) 쌍. 문항 순서 = CSV 첫 등장 순서, 한쪽이 비면 건너뜀"""
    if group not in GROUPS:
        raise ValueError(f"unknown group {group!r}; expected one of {sorted(GROUPS)}")
    role = {"overall": "all", "authors": "author", "reviewers": "reviewers"}[group]
    selected = frame[frame["role"].isin(GROUPS[group])]
    pairs = []
    for item_id in pd.unique(frame["item_id"]):
        item = selected[selected["item_id"] == item_id]
        ai = ResponseSet(role=role, review_type="AI", item_id=item_id, values=item[item["review_type"] == "AI"]["value"].tolist())
        human = ResponseSet(role=role, review_type="human", item_id=item_id, values=item[item["review_type"] == "human"]["value"].tolist())
        if ai.values and human.values:
            pairs.append((ai, human))
        else:
            review_logger.debug(f"문항 {item_id} ({group}): 한쪽 응답이 없어 비교 생략")
    return pairs


def response_counts(frame: pd.DataFrame) -> pd.DataFrame:
    """역할 x 리뷰 종류 응답 수 (합계 포함)"""
    counts = pd.crosstab(frame["review_type"], frame["role"], margins=True, margins_name="total")
    columns = [role for role in ROLES if role in counts.columns] + ["total"]
    rows = [kind for kind in REVIEW_TYPES if kind in counts.index] + ["total"]
    return counts.reindex(index=rows, columns=columns, fill_value=0)


def _decimal(value: Fraction, signed: bool = False) -> str:
    exact = (Decimal(value.numerator) / Decimal(value.denominator)).quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP)
    return format(exact, "+") if signed else str(exact)


def comparison_frame(results: Sequence[ComparisonResult]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "group": r.group,
                "item_id": r.item_id,
                "n_ai": r.n_ai,
                "n_human": r.n_human,
                "mean_ai": _decimal(r.mean_ai),
                "mean_human": _decimal(r.mean_human),
                "delta": _decimal(r.delta, signed=True),
                "u_statistic": f"{r.u_statistic:.1f}",
                "p_value": f"{r.p_value:.6f}",
                "method": r.method,
                "significant": int(r.significant),
            }
            for r in results
        ],
        columns=["group", "item_id", "n_ai", "n_human", "mean_ai", "mean_human", "delta", "u_statistic", "p_value", "method", "significant"],
    )


def analyze_survey(
    csv_path: str,
    output_dir: str,
    groups: Sequence[str] = ("overall", "authors", "reviewers"),
    alpha: float = DEFAULT_ALPHA,
    exact_max_n: int = DEFAULT_EXACT_MAX_N,
) -> Dict[str, object]:
    """comparison.csv + counts.csv 작성. 같은 입력이면 바이트 단위로 같은 출력"""
    frame = load_responses(csv_path)
    results: List[ComparisonResult] = []
    for group in groups:
        results.extend(comparison_report(response_sets(frame, group), group, alpha, exact_max_n))

    os.makedirs(output_dir, exist_ok=True)
    comparison_path = os.path.join(output_dir, "comparison.csv")
    counts_path = os.path.join(output_dir, "counts.csv")
    comparison_frame(results).to_csv(comparison_path, index=False, encoding="utf-8", lineterminator="\n")
    response_counts(frame).to_csv(counts_path, index_label="review_type", encoding="utf-8", lineterminator="\n")

    significant = sum(1 for r in results if r.significant)
    review_logger.info(f"📊 설문 분석: 응답 {len(frame)}건, 비교 {len(results)}건, 유의 {significant}건 (alpha={alpha})")
    return {
        "responses": len(frame),
        "comparisons": len(results),
        "significant": significant,
        "comparison_csv": comparison_path,
        "counts_csv": counts_path,
    }


def render_results(results: Sequence[ComparisonResult], limit: Optional[int] = None) -> str:
    frame = comparison_frame(results[:limit] if limit else results)
    return frame.to_string(index=False)
