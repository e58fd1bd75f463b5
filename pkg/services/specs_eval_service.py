"""
SPECS evaluation service
- run_variant / run_variants: 섭동 논문마다 baseline, targeted(단계), final 리뷰 생성
- judge_review: judge 백엔드 판정 + 인용문(excerpt)이 실제 리뷰에 있는지 하네스에서 재확인
- detection_rates / detection_matrix / mcnemar_exact / compare_variants / results_table: 집계
"""

import asyncio
import json
import math
import os
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd

from schemas.paper import PaperBundle
from schemas.pipeline import StagePlan
from schemas.specs import (
    SPECS_CRITERIA,
    DetectionMatrix,
    Judgment,
    McNemarResult,
    PairedOutcome,
    Perturbation,
    RecallCell,
    ReviewVariant,
    VariantComparison,
    VariantFailure,
    VariantKind,
    VariantReview,
)
from services.agents import JudgeAgent
from services.agents.utils import normalize_whitespace, review_logger
from services.exceptions import (
    DuplicateJudgment,
    EvaluationError,
    IncompleteCoverage,
    MalformedJudgeOutput,
    MismatchedSets,
)
from services.ingest_service import ingest_paper
from services.model_gateway import ModelGateway
from services.ocr_backends import OcrBackend
from services.prompt_registry import PromptRegistry
from services.review_pipeline_service import ReviewPipeline, baseline_plan, default_plan, targeted_plan


OVERALL = "all"
BundleLoader = Callable[[Perturbation], PaperBundle]


def expected_review_count(perturbation_count: int, variants: Sequence[ReviewVariant]) -> int:
    """783 x (baseline + 5 targeted + final) = 5,481"""
    return perturbation_count * len(variants)


def perturbation_bundle_loader(ocr: OcrBackend, target_dpi: int = 250) -> BundleLoader:
    """섭동 PDF -> 번들 (paper_id = perturbation_id)"""

    def load(perturbation: Perturbation) -> PaperBundle:
        if not perturbation.perturbed_pdf or not os.path.exists(perturbation.perturbed_pdf):
            raise EvaluationError(f"{perturbation.perturbation_id}: perturbed PDF is missing")
        return ingest_paper(perturbation.perturbed_pdf, ocr, target_dpi=target_dpi, paper_id=perturbation.perturbation_id)

    return load


# ============= [REVIEW VARIANTS] ==============
class VariantRunner:
    """계획별 ReviewPipeline 을 두고 섭동 단위로 실행. store_factory 가 있으면 계획마다 체크포인트 분리"""

    def __init__(
        self,
        gateway: ModelGateway,
        registry: Optional[PromptRegistry] = None,
        store_factory: Optional[Callable[[str], object]] = None,
        backend_id: str = "reviewer",
        workers: int = 4,
        clock_factory=None,
    ):
        self.gateway = gateway
        self.registry = registry or PromptRegistry()
        self.store_factory = store_factory
        self.backend_id = backend_id
        self.workers = max(1, workers)
        self.clock_factory = clock_factory
        self._pipelines: Dict[str, ReviewPipeline] = {}

    def _pipeline(self, plan: StagePlan) -> ReviewPipeline:
        if plan.plan_id not in self._pipelines:
            store = self.store_factory(plan.plan_id.replace(":", "-")) if self.store_factory else None
            self._pipelines[plan.plan_id] = ReviewPipeline(self.gateway, self.registry, store, self.clock_factory)
        return self._pipelines[plan.plan_id]

    async def _run_plan(self, bundle: PaperBundle, plan: StagePlan):
        pipeline = self._pipeline(plan)
        checkpoint = pipeline.store.load_checkpoint(bundle.paper_id) if pipeline.store is not None else None
        return await pipeline.run(bundle, plan, checkpoint=checkpoint)

    async def _reviews_for(
        self,
        perturbation: Perturbation,
        variants: Sequence[ReviewVariant],
        bundle_loader: BundleLoader,
        standalone: bool,
    ) -> Tuple[List[VariantReview], List[VariantFailure]]:
        pid = perturbation.perturbation_id
        reviews: List[VariantReview] = []
        failures: List[VariantFailure] = []

        def fail(group: Iterable[ReviewVariant], error: BaseException):
            review_logger.log_error("VariantRunner", error, {"perturbation_id": pid})
            failures.extend(VariantFailure(perturbation_id=pid, variant=v.key, error=f"{type(error).__name__}: {error}") for v in group)

        try:
            bundle = bundle_loader(perturbation)
        except Exception as e:
            fail(variants, e)
            return reviews, failures

        baseline = [v for v in variants if v.kind is VariantKind.BASELINE]
        staged = [v for v in variants if v.kind is not VariantKind.BASELINE]

        if baseline:
            try:
                _, artifact = await self._run_plan(bundle, baseline_plan(self.backend_id))
                reviews.append(VariantReview(perturbation_id=pid, variant=baseline[0].key, body=artifact.body))
            except Exception as e:
                fail(baseline, e)

        if staged and standalone:
            # 변형마다 독립 실행 (targeted 는 기본 지시문 + 해당 단계만)
            for variant in staged:
                plan = targeted_plan(variant.stage, self.backend_id) if variant.kind is VariantKind.TARGETED else default_plan(self.backend_id)
                try:
                    _, artifact = await self._run_plan(bundle, plan)
                    reviews.append(VariantReview(perturbation_id=pid, variant=variant.key, body=artifact.body))
                except Exception as e:
                    fail([variant], e)
        elif staged:
            # 전체 파이프라인 한 번: targeted 는 단계 기록, final 은 마지막 단계
            try:
                records, artifact = await self._run_plan(bundle, default_plan(self.backend_id))
                by_stage = {record.stage: record.response_text for record in records}
                for variant in staged:
                    body = artifact.body if variant.kind is VariantKind.FINAL else by_stage[variant.stage]
                    reviews.append(VariantReview(perturbation_id=pid, variant=variant.key, body=body))
            except Exception as e:
                fail(staged, e)
        return reviews, failures

    async def run(
        self,
        perturbations: Sequence[Perturbation],
        variants: Sequence[ReviewVariant],
        bundle_loader: BundleLoader,
        standalone: bool = False,
    ) -> Tuple[List[VariantReview], List[VariantFailure]]:
        semaphore = asyncio.Semaphore(self.workers)

        async def worker(perturbation: Perturbation):
            async with semaphore:
                return await self._reviews_for(perturbation, variants, bundle_loader, standalone)

        results = await asyncio.gather(*(worker(p) for p in perturbations))
        order = {v.key: index for index, v in enumerate(variants)}
        reviews = sorted((r for batch, _ in results for r in batch), key=lambda r: (r.perturbation_id, order[r.variant]))
        failures = sorted((f for _, batch in results for f in batch), key=lambda f: (f.perturbation_id, order[f.variant]))
        review_logger.info(
            f"📝 변형 리뷰 {len(reviews)}건 생성, 실패 {len(failures)}건 "
            f"(예상 {expected_review_count(len(perturbations), variants)}건)"
        )
        return reviews, failures


async def run_variant(
    perturbations: Sequence[Perturbation],
    variant: ReviewVariant,
    gateway: ModelGateway,
    bundle_loader: BundleLoader,
    registry: Optional[PromptRegistry] = None,
    store_factory=None,
    backend_id: str = "reviewer",
    workers: int = 4,
    clock_factory=None,
) -> Tuple[List[VariantReview], List[VariantFailure]]:
    """변형 하나만 독립 실행"""
    runner = VariantRunner(gateway, registry, store_factory, backend_id, workers, clock_factory)
    return await runner.run(perturbations, [variant], bundle_loader, standalone=True)


async def run_variants(
    perturbations: Sequence[Perturbation],
    gateway: ModelGateway,
    bundle_loader: BundleLoader,
    variants: Optional[Sequence[ReviewVariant]] = None,
    registry: Optional[PromptRegistry] = None,
    store_factory=None,
    backend_id: str = "reviewer",
    workers: int = 4,
    clock_factory=None,
) -> Tuple[List[VariantReview], List[VariantFailure]]:
    """기본값은 7개 변형 전체. targeted/final 은 섭동당 전체 파이프라인 1회에서 파생"""
    variants = list(variants or ReviewVariant.all_variants())
    runner = VariantRunner(gateway, registry, store_factory, backend_id, workers, clock_factory)
    return await runner.run(perturbations, variants, bundle_loader)


# ============= [JUDGING] ==============
def excerpt_in_review(excerpt: str, review_body: str) -> bool:
    """공백 정규화 후 부분 문자열 검사"""
    needle = normalize_whitespace(excerpt)
    return bool(needle) and needle in normalize_whitespace(review_body)


async def judge_review(
    review: VariantReview,
    perturbation: Perturbation,
    gateway: ModelGateway,
    backend_id: str = "judge",
    agent: Optional[JudgeAgent] = None,
) -> Judgment:
    if review.perturbation_id != perturbation.perturbation_id:
        raise EvaluationError(f"review for {review.perturbation_id} judged against {perturbation.perturbation_id}")
    verdict = await (agent or JudgeAgent()).judge(perturbation, review.body, review.variant, gateway, backend_id)

    caught, reason = verdict["caught"], ""
    if caught and not verdict["excerpt"]:
        caught, reason = False, "missing_excerpt"
    elif caught and not excerpt_in_review(verdict["excerpt"], review.body):
        caught, reason = False, "excerpt_unverified"
    if reason:
        review_logger.warning(f"🔍 [{review.perturbation_id}/{review.variant}] judge 판정 강등: {reason}")

    return Judgment(
        perturbation_id=perturbation.perturbation_id,
        variant=review.variant,
        criterion=perturbation.criterion,
        caught=caught,
        supporting_excerpt=verdict["excerpt"] if caught else "",
        justification=verdict["justification"],
        reason=reason,
    )


async def judge_reviews(
    reviews: Sequence[VariantReview],
    perturbations: Sequence[Perturbation],
    gateway: ModelGateway,
    backend_id: str = "judge",
    workers: int = 4,
) -> Tuple[List[Judgment], List[VariantFailure]]:
    """(섭동, 변형) 쌍 단위 병렬 판정. 판정 실패는 기록만"""
    by_id = {p.perturbation_id: p for p in perturbations}
    agent = JudgeAgent()
    semaphore = asyncio.Semaphore(max(1, workers))

    async def worker(review: VariantReview):
        async with semaphore:
            perturbation = by_id.get(review.perturbation_id)
            if perturbation is None:
                return None, VariantFailure(perturbation_id=review.perturbation_id, variant=review.variant, error="unknown perturbation")
            try:
                return await judge_review(review, perturbation, gateway, backend_id, agent), None
            except (MalformedJudgeOutput, EvaluationError) as e:
                return None, VariantFailure(perturbation_id=review.perturbation_id, variant=review.variant, error=f"{type(e).__name__}: {e}")
            except Exception as e:
                review_logger.log_error("judge_reviews", e, {"perturbation_id": review.perturbation_id, "variant": review.variant})
                return None, VariantFailure(perturbation_id=review.perturbation_id, variant=review.variant, error=f"{type(e).__name__}: {e}")

    results = await asyncio.gather(*(worker(r) for r in reviews))
    judgments = [j for j, _ in results if j is not None]
    failures = [f for _, f in results if f is not None]
    review_logger.info(f"⚖️ 판정 {len(judgments)}건, 실패 {len(failures)}건")
    return judgments, failures


# ============= [AGGREGATION] ==============
def _check_unique(judgments: Iterable[Judgment]):
    seen = set()
    for judgment in judgments:
        key = (judgment.perturbation_id, judgment.variant)
        if key in seen:
            raise DuplicateJudgment(f"{judgment.perturbation_id} judged twice for {judgment.variant}")
        seen.add(key)


def _criterion_order(criteria: Iterable[str]) -> List[str]:
    present = set(criteria)
    return [c for c in SPECS_CRITERIA if c in present] + sorted(present - set(SPECS_CRITERIA))


def detection_rates(judgments: Sequence[Judgment]) -> Dict[str, Dict[str, RecallCell]]:
    """variant -> criterion -> RecallCell ('all' 행 포함)"""
    _check_unique(judgments)
    table: Dict[str, Dict[str, RecallCell]] = {}
    by_variant: Dict[str, List[Judgment]] = {}
    for judgment in judgments:
        by_variant.setdefault(judgment.variant, []).append(judgment)
    for variant, group in by_variant.items():
        rows: Dict[str, RecallCell] = {}
        for criterion in _criterion_order(j.criterion for j in group):
            members = [j for j in group if j.criterion == criterion]
            rows[criterion] = RecallCell(caught=sum(j.caught for j in members), n=len(members))
        rows[OVERALL] = RecallCell(caught=sum(j.caught for j in group), n=len(group))
        table[variant] = rows
    return table


def _margin(row: Dict[str, RecallCell], criterion: str, stages: Sequence[str], n: int) -> Fraction:
    """대각 값 - 가장 큰 비대각 값"""
    off_diagonal = max(row[stage].caught for stage in stages if stage != criterion)
    return Fraction(row[criterion].caught - off_diagonal, n)


def detection_matrix(judgments: Sequence[Judgment]) -> DetectionMatrix:
    """행 = 섭동 기준, 열 = targeted 단계. 셀은 독립 계산이므로 행 합이 1 을 넘을 수 있음"""
    targeted = [j for j in judgments if j.variant.startswith(f"{VariantKind.TARGETED.value}:")]
    _check_unique(targeted)
    stages = list(SPECS_CRITERIA)

    cells: Dict[str, Dict[str, RecallCell]] = {}
    row_n: Dict[str, int] = {}
    margins: Dict[str, float] = {}
    for criterion in SPECS_CRITERIA:
        row: Dict[str, RecallCell] = {}
        expected_ids = None
        for stage in stages:
            members = [j for j in targeted if j.criterion == criterion and j.variant == f"targeted:{stage}"]
            ids = {j.perturbation_id for j in members}
            if not members:
                raise IncompleteCoverage(f"no judgments for criterion {criterion} under targeted:{stage}")
            if expected_ids is not None and ids != expected_ids:
                raise IncompleteCoverage(f"criterion {criterion}: targeted:{stage} covers a different perturbation set")
            expected_ids = ids
            row[stage] = RecallCell(caught=sum(j.caught for j in members), n=len(members))
        n = len(expected_ids)
        cells[criterion] = row
        row_n[criterion] = n
        margins[criterion] = float(_margin(row, criterion, stages, n))
    return DetectionMatrix(criteria=list(SPECS_CRITERIA), stages=stages, cells=cells, row_n=row_n, margins=margins)


def mcnemar_exact(pairs: Sequence[PairedOutcome]) -> McNemarResult:
    """양측 정확 McNemar: p = min(1, 2 * P(X >= max(b, c))), X ~ Binom(b + c, 1/2)"""
    b = sum(1 for pair in pairs if pair.a_caught and not pair.b_caught)
    c = sum(1 for pair in pairs if not pair.a_caught and pair.b_caught)
    n = b + c
    if n == 0:
        return McNemarResult(b=0, c=0, p_value=1.0)
    tail = Fraction(sum(math.comb(n, k) for k in range(max(b, c), n + 1)), 2**n)
    return McNemarResult(b=b, c=c, p_value=float(min(Fraction(1), 2 * tail)))


def _by_perturbation(judgments: Sequence[Judgment]) -> Dict[str, Judgment]:
    mapped: Dict[str, Judgment] = {}
    for judgment in judgments:
        if judgment.perturbation_id in mapped:
            raise DuplicateJudgment(f"{judgment.perturbation_id} appears twice in one variant's judgments")
        mapped[judgment.perturbation_id] = judgment
    return mapped


def _compare(criterion: str, ids: List[str], a: Dict[str, Judgment], b: Dict[str, Judgment]) -> VariantComparison:
    n = len(ids)
    caught_a = sum(a[pid].caught for pid in ids)
    caught_b = sum(b[pid].caught for pid in ids)
    pairs = [PairedOutcome(perturbation_id=pid, a_caught=a[pid].caught, b_caught=b[pid].caught) for pid in ids]
    return VariantComparison(
        criterion=criterion,
        n=n,
        recall_a=caught_a / n if n else 0.0,
        recall_b=caught_b / n if n else 0.0,
        delta=float(Fraction(caught_b - caught_a, n)) if n else 0.0,
        caught_a=caught_a,
        caught_b=caught_b,
        mcnemar=mcnemar_exact(pairs),
    )


def compare_variants(judgments_a: Sequence[Judgment], judgments_b: Sequence[Judgment]) -> List[VariantComparison]:
    """기준별 + 전체('all') 비교. delta = recall(B) - recall(A)"""
    a, b = _by_perturbation(judgments_a), _by_perturbation(judgments_b)
    if set(a) != set(b):
        only = sorted(set(a) ^ set(b))
        raise MismatchedSets(f"variants were judged over different perturbations: {only[:5]}")
    for pid in a:
        if a[pid].criterion != b[pid].criterion:
            raise MismatchedSets(f"{pid}: criterion differs between variants")

    ids = sorted(a)
    rows = [
        _compare(criterion, [pid for pid in ids if a[pid].criterion == criterion], a, b)
        for criterion in _criterion_order(j.criterion for j in a.values())
    ]
    rows.append(_compare(OVERALL, ids, a, b))
    return rows


# ============= [REPORT] ==============
RESULT_COLUMNS = ("criterion", "n", "baseline", "targeted", "final", "delta_tb", "p_tb", "delta_fb", "p_fb")
FOUR_PLACES = Decimal("0.0001")


def format_rate(value: Fraction) -> str:
    exact = Decimal(value.numerator) / Decimal(value.denominator)
    return str(exact.quantize(FOUR_PLACES, rounding=ROUND_HALF_UP))


def format_delta(value: Fraction) -> str:
    exact = Decimal(value.numerator) / Decimal(value.denominator)
    return format(exact.quantize(FOUR_PLACES, rounding=ROUND_HALF_UP), "+")


def format_p(value: float) -> str:
    if value < 0.0001:
        return "<0.0001"
    return str(Decimal(repr(value)).quantize(FOUR_PLACES, rounding=ROUND_HALF_UP))


def _targeted_own_stage(judgments: Sequence[Judgment]) -> List[Judgment]:
    """각 섭동을 자기 기준의 targeted 단계 판정으로"""
    return [j for j in judgments if j.variant == f"targeted:{j.criterion}"]


def results_table(judgments: Sequence[Judgment]) -> List[Dict[str, object]]:
    """criterion, n, baseline, targeted, final, delta_tb, p_tb, delta_fb, p_fb (+ 원시 값 raw)"""
    _check_unique(judgments)
    columns = {
        "baseline": [j for j in judgments if j.variant == VariantKind.BASELINE.value],
        "targeted": _targeted_own_stage(judgments),
        "final": [j for j in judgments if j.variant == VariantKind.FINAL.value],
    }
    present = {name: _by_perturbation(group) for name, group in columns.items() if group}
    criteria = _criterion_order(j.criterion for group in present.values() for j in group.values())

    rows: List[Dict[str, object]] = []
    for criterion in criteria + [OVERALL]:
        row: Dict[str, object] = {column: "" for column in RESULT_COLUMNS}
        raw: Dict[str, object] = {}
        row["criterion"] = criterion
        subsets = {
            name: {pid: j for pid, j in group.items() if criterion == OVERALL or j.criterion == criterion}
            for name, group in present.items()
        }
        sizes = {len(subset) for subset in subsets.values()}
        row["n"] = max(sizes) if sizes else 0
        for name, subset in subsets.items():
            if subset:
                rate = Fraction(sum(j.caught for j in subset.values()), len(subset))
                row[name] = format_rate(rate)
                raw[name] = {"caught": sum(j.caught for j in subset.values()), "n": len(subset)}
        for other, delta_key, p_key in (("targeted", "delta_tb", "p_tb"), ("final", "delta_fb", "p_fb")):
            if subsets.get("baseline") and subsets.get(other):
                comparison = _compare(criterion, sorted(subsets["baseline"]), subsets["baseline"], subsets[other]) \
                    if set(subsets["baseline"]) == set(subsets[other]) else None
                if comparison is None:
                    raise MismatchedSets(f"{criterion}: baseline and {other} cover different perturbations")
                row[delta_key] = format_delta(Fraction(comparison.caught_b - comparison.caught_a, comparison.n))
                row[p_key] = format_p(comparison.mcnemar.p_value)
                raw[delta_key] = comparison.delta
                raw[p_key] = comparison.mcnemar.model_dump()
        row["raw"] = raw
        rows.append(row)
    return rows


def write_report(judgments: Sequence[Judgment], output_dir: str) -> Dict[str, str]:
    """results.csv + results.json, 전체 targeted 판정이 있으면 detection_matrix.csv"""
    os.makedirs(output_dir, exist_ok=True)
    rows = results_table(judgments)
    paths = {"results_csv": os.path.join(output_dir, "results.csv"), "results_json": os.path.join(output_dir, "results.json")}

    frame = pd.DataFrame([{column: row[column] for column in RESULT_COLUMNS} for row in rows], columns=list(RESULT_COLUMNS))
    frame.to_csv(paths["results_csv"], index=False, encoding="utf-8", lineterminator="\n")
    with open(paths["results_json"], "w", encoding="utf-8") as f:
        json.dump(rows, f, ensure_ascii=False, indent=2, sort_keys=True)

    try:
        matrix = detection_matrix(judgments)
    except IncompleteCoverage as e:
        review_logger.warning(f"⚠️ 탐지 행렬 생략: {e}")
    else:
        paths["matrix_csv"] = os.path.join(output_dir, "detection_matrix.csv")
        records = []
        for criterion in matrix.criteria:
            n, row = matrix.row_n[criterion], matrix.cells[criterion]
            record = {"criterion": criterion, "n": n}
            record.update({stage: format_rate(Fraction(row[stage].caught, n)) for stage in matrix.stages})
            record["margin"] = format_delta(_margin(row, criterion, matrix.stages, n))
            records.append(record)
        matrix_frame = pd.DataFrame(records)
        matrix_frame.to_csv(paths["matrix_csv"], index=False, encoding="utf-8", lineterminator="\n")
    review_logger.info(f"📈 SPECS 결과 보고서 -> {output_dir}")
    return paths
