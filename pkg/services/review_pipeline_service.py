"""
Review pipeline service (stage engine)
논문 한 편에 대해 단계 계획을 순서대로 실행
- 각 단계 요청 = 기본 지시문 + 이전 단계들의 프롬프트/결과 + 현재 단계 프롬프트
- 단계마다 체크포인트 기록, 같은 계획이면 완료된 단계는 다시 호출하지 않음
"""

import json
import time
from typing import Callable, List, Optional, Tuple

from schemas.gateway import Effort, ModelRequest, PromptSegment, ToolSet
from schemas.paper import MARKDOWN_UNAVAILABLE_NOTICE, PaperBundle
from schemas.pipeline import (
    CORE_STAGES,
    DEFAULT_STAGE_ORDER,
    Checkpoint,
    ReviewArtifact,
    StagePlan,
    StageRecord,
    StageSpec,
)
from services.agents.utils import SystemClock, canonical_json, review_logger, sha256_text, utc_iso
from services.exceptions import GatewayError, Interrupted, InvalidPlan, PlanDigestMismatch, StageFailed
from services.model_gateway import DocumentStore, ModelGateway, estimate_tokens
from services.prompt_registry import SIGNIFICANCE_SCOPE_NOTE, PromptRegistry


ELISION_MARKER = "[earlier stage output elided to fit the context window]"

StopCheck = Callable[[], bool]
StageCallback = Callable[[str, StageRecord], None]


# ============= [PLANS] ==============
def stage_tools(stage: str) -> ToolSet:
    if stage in ("evaluations", "correctness"):
        return ToolSet(code_execution=True)
    if stage == "significance":
        return ToolSet(web_search=True, web_search_scope_note=SIGNIFICANCE_SCOPE_NOTE)
    return ToolSet()


def stage_spec(stage: str, backend_id: str = "reviewer", effort: Effort = Effort.MEDIUM) -> StageSpec:
    return StageSpec(name=stage, prompt_id=stage, tools=stage_tools(stage), backend_id=backend_id, effort=effort)


def default_plan(backend_id: str = "reviewer", effort: Effort = Effort.MEDIUM) -> StagePlan:
    return StagePlan(plan_id="default", stages=[stage_spec(name, backend_id, effort) for name in DEFAULT_STAGE_ORDER])


def baseline_plan(backend_id: str = "reviewer", effort: Effort = Effort.MEDIUM) -> StagePlan:
    """단일 프롬프트 리뷰"""
    return StagePlan(plan_id="baseline", stages=[stage_spec("baseline", backend_id, effort)])


def targeted_plan(stage: str, backend_id: str = "reviewer", effort: Effort = Effort.MEDIUM) -> StagePlan:
    """기본 지시문 + 해당 핵심 단계 하나"""
    if stage not in CORE_STAGES:
        raise InvalidPlan(f"targeted plans only exist for core stages, got {stage!r}")
    return StagePlan(plan_id=f"targeted:{stage}", stages=[stage_spec(stage, backend_id, effort)])


def plan_by_id(plan_id: str, backend_id: str = "reviewer") -> StagePlan:
    if plan_id == "default":
        return default_plan(backend_id)
    if plan_id == "baseline":
        return baseline_plan(backend_id)
    if plan_id.startswith("targeted:"):
        return targeted_plan(plan_id.split(":", 1)[1], backend_id)
    raise InvalidPlan(f"unknown plan id: {plan_id}")


def plan_digest(plan: StagePlan, registry: PromptRegistry) -> str:
    prompt_ids = [plan.base_instruction_id] + [spec.prompt_id for spec in plan.stages]
    return plan.digest(registry.digests(prompt_ids))


# ============= [CONTEXT] ==============
def _template_variables(bundle: PaperBundle, stage: str) -> dict:
    return {
        "paper_id": bundle.paper_id,
        "title": bundle.metadata.title or "",
        "venue": bundle.metadata.venue or "",
        "track": bundle.metadata.track or "",
        "stage": stage,
    }


def build_stage_context(
    bundle: PaperBundle,
    prior: List[StageRecord],
    spec: StageSpec,
    registry: PromptRegistry,
    documents: DocumentStore,
    base_instruction_id: str = "base",
) -> ModelRequest:
    """기본 지시문 -> (이전 단계 프롬프트, 결과, 도구 기록)* -> 현재 단계 프롬프트"""
    variables = _template_variables(bundle, spec.name)
    segments = [PromptSegment(role="system", text=registry.render(base_instruction_id, **variables), label="base")]
    if bundle.degraded:
        segments.append(PromptSegment(role="system", text=MARKDOWN_UNAVAILABLE_NOTICE, label="notice"))

    for record in prior:
        segments.append(PromptSegment(role="user", text=record.prompt_text, label=f"{record.stage}:prompt"))
        segments.append(PromptSegment(role="assistant", text=record.response_text, label=f"{record.stage}:result"))
        if record.tool_traces:
            traces = json.dumps([trace.model_dump(mode="json") for trace in record.tool_traces], ensure_ascii=False)
            segments.append(PromptSegment(role="tool", text=traces, label=f"{record.stage}:tools"))

    segments.append(PromptSegment(role="user", text=registry.render(spec.prompt_id, **variables), label=f"{spec.name}:prompt"))
    return ModelRequest(
        segments=segments,
        attachments=documents.register_bundle(bundle),
        tools=spec.tools,
        effort=spec.effort,
        match_key=spec.name,
        paper_id=bundle.paper_id,
    )


def fit_context(request: ModelRequest, context_window: int, documents: Optional[DocumentStore] = None) -> ModelRequest:
    """창 초과 시 도구 기록 제거 -> 오래된 단계 결과부터 생략 표시로 대체. 기본 지시문과 현재 프롬프트는 유지"""
    if estimate_tokens(request, documents) <= context_window:
        return request

    segments = [segment for segment in request.segments if segment.role != "tool"]
    trimmed = request.model_copy(update={"segments": segments})
    for index, segment in enumerate(segments):
        if estimate_tokens(trimmed, documents) <= context_window:
            break
        if segment.role == "assistant" and segment.text != ELISION_MARKER:
            segments[index] = segment.model_copy(update={"text": ELISION_MARKER})
            trimmed = request.model_copy(update={"segments": list(segments)})
    review_logger.warning(
        f"✂️ [{request.paper_id}] {request.match_key}: 컨텍스트 축소 "
        f"({estimate_tokens(request, documents)} -> {estimate_tokens(trimmed, documents)} tokens, 창 {context_window})"
    )
    return trimmed


def request_digest(request: ModelRequest) -> str:
    return sha256_text(canonical_json(request.model_dump(mode="json")))


# ============= [ENGINE] ==============
class ReviewPipeline:
    """단계 실행기. store 가 있으면 단계마다 체크포인트 기록"""

    def __init__(
        self,
        gateway: ModelGateway,
        registry: Optional[PromptRegistry] = None,
        store=None,
        clock_factory: Optional[Callable[[str], object]] = None,
    ):
        self.gateway = gateway
        self.registry = registry or PromptRegistry()
        self.store = store
        self.clock_factory = clock_factory or (lambda paper_id: SystemClock())

    def digest(self, plan: StagePlan) -> str:
        return plan_digest(plan, self.registry)

    async def run(
        self,
        bundle: PaperBundle,
        plan: StagePlan,
        checkpoint: Optional[Checkpoint] = None,
        stop_after: Optional[str] = None,
        should_stop: Optional[StopCheck] = None,
        on_stage: Optional[StageCallback] = None,
    ) -> Tuple[List[StageRecord], Optional[ReviewArtifact]]:
        """(기록 목록, 리뷰) 반환. stop_after 로 중간에 멈추면 리뷰는 None"""
        if not plan.stages:
            raise InvalidPlan("plan has no stages")
        digest = self.digest(plan)
        paper_id = bundle.paper_id

        records: List[StageRecord] = []
        if checkpoint is not None:
            if checkpoint.plan_digest != digest:
                raise PlanDigestMismatch(f"{paper_id}: checkpoint plan digest does not match the current plan")
            if checkpoint.completed_stages != plan.stage_names[:len(checkpoint.records)]:
                raise PlanDigestMismatch(f"{paper_id}: checkpoint stages are not a prefix of the plan")
            records = list(checkpoint.records)
            if records:
                review_logger.info(f"♻️ [{paper_id}] 체크포인트에서 재개: {len(records)}/{len(plan.stages)} 단계 완료")
        if self.store is not None:
            self.store.begin_checkpoint(paper_id, digest)

        clock = self.clock_factory(paper_id)
        for spec in plan.stages[len(records):]:
            if stop_after is not None and records and records[-1].stage == stop_after:
                break
            if should_stop is not None and should_stop():
                raise Interrupted(f"{paper_id}: cancelled before stage {spec.name}", paper_id=paper_id, stage=spec.name)
            record = await self._run_stage(bundle, records, spec, plan, clock)
            if self.store is not None:
                self.store.append_record(paper_id, record)
            records.append(record)
            if on_stage is not None:
                on_stage(paper_id, record)

        if len(records) < len(plan.stages):
            return records, None

        artifact = ReviewArtifact(paper_id=paper_id, body=records[-1].response_text, plan_digest=digest, stage_count=len(records))
        if self.store is not None:
            self.store.write_review(paper_id, artifact.body)
        return records, artifact

    async def _run_stage(self, bundle: PaperBundle, prior: List[StageRecord], spec: StageSpec, plan: StagePlan, clock) -> StageRecord:
        paper_id = bundle.paper_id
        backend = self.gateway.resolve(spec.backend_id)
        request = build_stage_context(bundle, prior, spec, self.registry, self.gateway.documents, plan.base_instruction_id)
        request = fit_context(request, backend.context_window, self.gateway.documents)

        review_logger.log_stage_start(paper_id, spec.name)
        started_at = utc_iso(clock.now())
        t0 = time.perf_counter()
        try:
            response = await self.gateway.invoke(request, spec.backend_id)
        except GatewayError as e:
            review_logger.log_stage_end(paper_id, spec.name, time.perf_counter() - t0, False, getattr(e, "attempts", 1) or 1)
            review_logger.log_error("ReviewPipeline", e, {"paper_id": paper_id, "stage": spec.name})
            raise StageFailed(f"{paper_id}: stage {spec.name} failed: {e}", stage=spec.name, paper_id=paper_id, cause=e) from e
        finished_at = utc_iso(clock.now())
        review_logger.log_stage_end(paper_id, spec.name, time.perf_counter() - t0, True, response.attempts)

        return StageRecord(
            stage=spec.name,
            prompt_id=spec.prompt_id,
            prompt_text=request.segments[-1].text,
            request_digest=request_digest(request),
            response_text=response.text,
            tool_traces=response.tool_traces,
            token_usage=response.token_usage,
            started_at=started_at,
            finished_at=finished_at,
            attempts=response.attempts,
            backend_id=response.backend_id,
        )


async def run_pipeline(
    bundle: PaperBundle,
    plan: StagePlan,
    gateway: ModelGateway,
    registry: Optional[PromptRegistry] = None,
    store=None,
    clock_factory=None,
) -> Tuple[List[StageRecord], ReviewArtifact]:
    records, artifact = await ReviewPipeline(gateway, registry, store, clock_factory).run(bundle, plan)
    return records, artifact


async def resume_from_checkpoint(
    checkpoint: Checkpoint,
    bundle: PaperBundle,
    plan: StagePlan,
    gateway: ModelGateway,
    registry: Optional[PromptRegistry] = None,
    store=None,
    clock_factory=None,
) -> Tuple[List[StageRecord], ReviewArtifact]:
    if checkpoint.paper_id != bundle.paper_id:
        raise PlanDigestMismatch(f"checkpoint is for {checkpoint.paper_id}, bundle is {bundle.paper_id}")
    return await ReviewPipeline(gateway, registry, store, clock_factory).run(bundle, plan, checkpoint=checkpoint)
