import asyncio

import pytest

from schemas.gateway import ModelRequest, PromptSegment
from schemas.paper import MARKDOWN_UNAVAILABLE_NOTICE
from schemas.pipeline import DEFAULT_STAGE_ORDER
from db.run_store import RunStore
from services.agents.utils import StepClock
from services.exceptions import Interrupted, InvalidPlan, PipelineError, PlanDigestMismatch, StageFailed
from services.model_backends import MOCK_REVIEW
from services.review_pipeline_service import (
    ELISION_MARKER,
    ReviewPipeline,
    baseline_plan,
    default_plan,
    fit_context,
    plan_by_id,
    resume_from_checkpoint,
    run_pipeline,
    targeted_plan,
)

from tests.conftest import make_bundle, mock_gateway


def step_clock(paper_id):
    return StepClock()


def test_plans():
    assert default_plan().stage_names == list(DEFAULT_STAGE_ORDER)
    assert baseline_plan().stage_names == ["baseline"]
    assert targeted_plan("correctness").stage_names == ["correctness"]
    assert plan_by_id("targeted:story").plan_id == "targeted:story"
    with pytest.raises(InvalidPlan):
        targeted_plan("initial_review")
    with pytest.raises(InvalidPlan):
        plan_by_id("everything")


def test_stage_tools():
    tools = {spec.name: spec.tools for spec in default_plan().stages}
    assert tools["evaluations"].code_execution and tools["correctness"].code_execution
    assert tools["significance"].web_search and not tools["significance"].code_execution
    assert tools["significance"].web_search_scope_note
    assert not tools["story"].code_execution and not tools["story"].web_search


def test_each_stage_sees_all_prior_prompts_and_results():
    gateway = mock_gateway()
    records, artifact = asyncio.run(run_pipeline(make_bundle("p1"), default_plan(), gateway, clock_factory=step_clock))

    calls = gateway.resolve("reviewer").calls
    assert [call.match_key for call in calls] == list(DEFAULT_STAGE_ORDER)
    for index, call in enumerate(calls):
        assert len(call.segments) == 2 + 2 * index
        assert call.segments[0].label == "base"
        assert call.segments[-1].label == f"{DEFAULT_STAGE_ORDER[index]}:prompt"
        labels = [segment.label for segment in call.segments[1:-1]]
        expected = [f"{stage}:{part}" for stage in DEFAULT_STAGE_ORDER[:index] for part in ("prompt", "result")]
        assert labels == expected

    last = calls[-1]
    assert last.segments[2].text == records[0].response_text
    assert artifact.body == MOCK_REVIEW.replace("{paper_id}", "p1")
    assert artifact.stage_count == 8
    assert {ref.kind for ref in last.attachments} == {"pdf", "markdown"}


def test_degraded_bundle_carries_notice():
    gateway = mock_gateway()
    asyncio.run(run_pipeline(make_bundle("p1", degraded=True), baseline_plan(), gateway))
    call = gateway.resolve("reviewer").calls[0]
    assert call.segments[1].text == MARKDOWN_UNAVAILABLE_NOTICE
    assert [ref.kind for ref in call.attachments] == ["pdf"]


def test_failed_stage_resumes_from_checkpoint(output_root):
    bundle = make_bundle("p1")
    store = RunStore(output_root, "r1")
    failing = mock_gateway({"correctness": [{"error": "auth"}]})

    with pytest.raises(StageFailed) as e:
        asyncio.run(ReviewPipeline(failing, store=store).run(bundle, default_plan()))
    assert e.value.stage == "correctness"
    checkpoint = store.load_checkpoint("p1")
    assert checkpoint.completed_stages == ["story", "presentation", "evaluations"]

    gateway = mock_gateway()
    records, artifact = asyncio.run(resume_from_checkpoint(checkpoint, bundle, default_plan(), gateway, store=store))
    assert [call.match_key for call in gateway.resolve("reviewer").calls] == list(DEFAULT_STAGE_ORDER[3:])
    assert len(records) == 8
    assert store.load_checkpoint("p1").completed_stages == list(DEFAULT_STAGE_ORDER)
    assert store.read_review("p1") == artifact.body


def test_checkpoint_from_another_plan_is_rejected(output_root):
    bundle = make_bundle("p1")
    store = RunStore(output_root, "r1")
    asyncio.run(ReviewPipeline(mock_gateway(), store=store).run(bundle, baseline_plan()))
    checkpoint = store.load_checkpoint("p1")

    with pytest.raises(PlanDigestMismatch):
        asyncio.run(ReviewPipeline(mock_gateway()).run(bundle, default_plan(), checkpoint=checkpoint))


def test_stop_after_then_continue(output_root):
    bundle = make_bundle("p1")
    store = RunStore(output_root, "r1")
    pipeline = ReviewPipeline(mock_gateway(), store=store)

    records, artifact = asyncio.run(pipeline.run(bundle, default_plan(), stop_after="significance"))
    assert [r.stage for r in records] == list(DEFAULT_STAGE_ORDER[:5])
    assert artifact is None
    assert store.read_review("p1") is None

    records, artifact = asyncio.run(pipeline.run(bundle, default_plan(), checkpoint=store.load_checkpoint("p1")))
    assert len(records) == 8
    assert artifact is not None


def test_cancel_between_stages_keeps_checkpoint(output_root):
    store = RunStore(output_root, "r1")
    calls = iter([False, False, True])
    with pytest.raises(Interrupted):
        asyncio.run(ReviewPipeline(mock_gateway(), store=store).run(make_bundle("p1"), default_plan(), should_stop=lambda: next(calls)))
    assert store.load_checkpoint("p1").completed_stages == ["story", "presentation"]


def test_deterministic_records_under_step_clock(tmp_path):
    outputs = []
    bundle = make_bundle("p1")
    for name in ("a", "b"):
        store = RunStore(str(tmp_path / name), "r1")
        asyncio.run(ReviewPipeline(mock_gateway(), store=store, clock_factory=step_clock).run(bundle, default_plan()))
        with open(store.records_path("p1"), "rb") as f:
            outputs.append(f.read())
    assert outputs[0] == outputs[1]


def test_fit_context_elides_oldest_results_first():
    segments = [PromptSegment(role="system", text="base", label="base")]
    for stage in ("story", "presentation", "evaluations"):
        segments.append(PromptSegment(role="user", text=f"{stage} prompt", label=f"{stage}:prompt"))
        segments.append(PromptSegment(role="assistant", text="x" * 400, label=f"{stage}:result"))
    segments.append(PromptSegment(role="user", text="current prompt", label="correctness:prompt"))
    request = ModelRequest(segments=segments, match_key="correctness")

    trimmed = fit_context(request, context_window=150)

    results = [s.text for s in trimmed.segments if s.role == "assistant"]
    assert results[0] == ELISION_MARKER
    assert results[-1] == "x" * 400
    assert trimmed.segments[0].text == "base"
    assert trimmed.segments[-1].text == "current prompt"


def test_truncated_last_checkpoint_line_is_ignored(output_root):
    store = RunStore(output_root, "r1")
    asyncio.run(ReviewPipeline(mock_gateway(), store=store).run(make_bundle("p1"), default_plan(), stop_after="presentation"))
    with open(store.records_path("p1"), "a", encoding="utf-8") as f:
        f.write('{"type": "stage", "rec')
    assert store.load_checkpoint("p1").completed_stages == ["story", "presentation"]

    with open(store.records_path("p1"), "a", encoding="utf-8") as f:
        f.write('\n{"type": "stage"}\n')
    with pytest.raises(PipelineError):
        store.load_checkpoint("p1")


def test_resume_after_torn_write_keeps_every_new_record(output_root):
    bundle = make_bundle("p1")
    store = RunStore(output_root, "r1")
    asyncio.run(ReviewPipeline(mock_gateway(), store=store).run(bundle, default_plan(), stop_after="story"))
    with open(store.records_path("p1"), "a", encoding="utf-8") as f:
        f.write('{"type": "stage", "rec')
    assert store.load_checkpoint("p1").completed_stages == ["story"]

    pipeline = ReviewPipeline(mock_gateway(), store=store)
    asyncio.run(pipeline.run(bundle, default_plan(), checkpoint=store.load_checkpoint("p1"), stop_after="presentation"))
    assert store.load_checkpoint("p1").completed_stages == ["story", "presentation"]

    asyncio.run(pipeline.run(bundle, default_plan(), checkpoint=store.load_checkpoint("p1"), stop_after="evaluations"))
    assert store.load_checkpoint("p1").completed_stages == ["story", "presentation", "evaluations"]
    with open(store.records_path("p1"), "r", encoding="utf-8") as f:
        assert f.read().endswith("\n")


@pytest.mark.parametrize("boundary", range(1, len(DEFAULT_STAGE_ORDER)))
def test_resume_at_every_stage_boundary(tmp_path, boundary):
    bundle = make_bundle("p1")
    _, expected = asyncio.run(ReviewPipeline(mock_gateway(), store=RunStore(str(tmp_path / "full"), "r1")).run(bundle, default_plan()))

    store = RunStore(str(tmp_path / "split"), "r1")
    stop_after = DEFAULT_STAGE_ORDER[boundary - 1]
    asyncio.run(ReviewPipeline(mock_gateway(), store=store).run(bundle, default_plan(), stop_after=stop_after))

    gateway = mock_gateway()
    records, artifact = asyncio.run(ReviewPipeline(gateway, store=store).run(bundle, default_plan(), checkpoint=store.load_checkpoint("p1")))
    assert [call.match_key for call in gateway.resolve("reviewer").calls] == list(DEFAULT_STAGE_ORDER[boundary:])
    assert [r.stage for r in records] == list(DEFAULT_STAGE_ORDER)
    assert artifact.body == expected.body
