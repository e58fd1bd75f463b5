import asyncio

import pytest
from hypothesis import given
from hypothesis import strategies as st

from db.run_store import RunStore
from schemas.pipeline import BatchState, Gate, RolloutPolicy
from services.batch_service import approve_rollout, load_batch, run_batch
from services.exceptions import WrongState
from services.review_pipeline_service import ReviewPipeline, baseline_plan, default_plan

from tests.conftest import make_bundle, mock_gateway


def test_initial_batch_size_for_full_venue():
    assert RolloutPolicy(initial_fraction=0.30).initial_batch_size(22977) == 6893


@given(n=st.integers(min_value=0, max_value=100_000), percent=st.integers(min_value=0, max_value=100))
def test_initial_batch_size_is_exact_floor(n, percent):
    size = RolloutPolicy(initial_fraction=percent / 100).initial_batch_size(n)
    assert size == (percent * n) // 100


@pytest.fixture(scope="module")
def bundles():
    return [make_bundle(f"p{i:02d}") for i in range(10)]


def start(bundles, output_root, gateway=None, plan=None, **policy):
    store = RunStore(output_root, "b1")
    pipeline = ReviewPipeline(gateway or mock_gateway(), store=store)
    handle = asyncio.run(run_batch(bundles, plan or baseline_plan(), pipeline, RolloutPolicy(**policy), run_id="b1", workers=3))
    return handle, store


def test_manual_gate_pauses_after_initial_fraction(bundles, output_root):
    handle, store = start(bundles, output_root)

    report = handle.status()
    assert report.state == BatchState.AWAITING_APPROVAL
    assert report.initial_batch_size == 3
    assert report.processed == 3
    assert report.pending == 7
    assert [p.status for p in report.papers[:3]] == ["completed"] * 3
    assert store.load_batch().state == BatchState.AWAITING_APPROVAL

    report = asyncio.run(approve_rollout(handle).run())
    assert report.state == BatchState.COMPLETED
    assert report.processed == 10
    assert {p.phase for p in report.papers[3:]} == {"remainder"}


def test_approval_only_from_awaiting_state(bundles, output_root):
    handle, _ = start(bundles, output_root)
    asyncio.run(approve_rollout(handle).run())
    with pytest.raises(WrongState):
        approve_rollout(handle)


def test_auto_gate_runs_everything(bundles, output_root):
    handle, _ = start(bundles, output_root, gate=Gate.AUTO)
    assert handle.state == BatchState.COMPLETED
    assert handle.status().processed == 10


def test_manual_gate_with_full_fraction_completes_without_approval(bundles, output_root):
    handle, store = start(bundles, output_root, initial_fraction=1.0)
    assert handle.state == BatchState.COMPLETED
    assert handle.status().processed == 10
    assert store.load_batch().state == BatchState.COMPLETED
    with pytest.raises(WrongState):
        approve_rollout(handle)


def test_failed_paper_does_not_stop_the_batch(bundles, output_root):
    gateway = mock_gateway({"p01/baseline": [{"error": "auth"}]})
    handle, store = start(bundles, output_root, gateway=gateway, gate=Gate.AUTO)

    report = handle.status()
    assert report.state == BatchState.COMPLETED
    assert report.failed == 1
    assert report.processed == 9
    failed = report.papers[1]
    assert failed.status == "failed"
    assert failed.failed_stage == "baseline"
    assert failed.failure_cause.startswith("NonRetryable")
    assert "failed[p01]" in open(f"{store.run_dir}/status.txt", encoding="utf-8").read()


def test_initial_stop_after_leaves_papers_paused(bundles, output_root):
    handle, store = start(bundles[:4], output_root, plan=default_plan(), initial_fraction=0.5, initial_stop_after="significance")

    report = handle.status()
    assert report.state == BatchState.AWAITING_APPROVAL
    assert [p.status for p in report.papers] == ["paused", "paused", "pending", "pending"]
    assert report.stage_progress()["significance"] == 2
    assert "initial_review" not in report.stage_progress()

    report = asyncio.run(approve_rollout(handle).run())
    assert report.processed == 4
    assert store.load_checkpoint("p00").completed_stages[-1] == "final_review"


def test_cancel_while_awaiting(bundles, output_root):
    handle, store = start(bundles, output_root)
    handle.cancel()
    assert handle.state == BatchState.CANCELLED
    assert store.load_batch().state == BatchState.CANCELLED
    with pytest.raises(WrongState):
        approve_rollout(handle)


def test_approval_from_a_restored_handle(bundles, output_root):
    start(bundles, output_root)

    store = RunStore(output_root, "b1")
    gateway = mock_gateway()
    by_id = {bundle.paper_id: bundle for bundle in bundles}
    handle = load_batch(store, baseline_plan(), ReviewPipeline(gateway, store=store), by_id.__getitem__)
    assert handle.state == BatchState.AWAITING_APPROVAL

    report = asyncio.run(approve_rollout(handle).run())
    assert report.processed == 10
    assert len(gateway.resolve("reviewer").calls) == 7


def test_zero_fraction_runs_nothing_before_approval(bundles, output_root):
    gateway = mock_gateway()
    handle, _ = start(bundles, output_root, gateway=gateway, initial_fraction=0.0)
    assert handle.status().initial_batch_size == 0
    assert handle.state == BatchState.AWAITING_APPROVAL
    assert gateway.resolve("reviewer").calls == []
