"""
Batch rollout service
초기 배치(⌊fraction × N⌋편) 실행 -> 수동 승인 대기 -> 나머지 실행
- 논문 간 병렬(workers), 논문 내 단계는 순차
- 논문별 실패는 기록만 하고 배치는 계속
- 상태는 run store 의 batch.json / status.txt 에 저장 (다른 프로세스에서 승인/조회)
"""

import asyncio
import threading
import time
from typing import Callable, Dict, List, Optional, Sequence

from tqdm import tqdm

from schemas.paper import PaperBundle
from schemas.pipeline import BatchReport, BatchState, Gate, PaperStatus, RolloutPolicy, StagePlan, StageRecord
from services.agents.utils import SystemClock, review_logger, utc_iso
from services.exceptions import Interrupted, InvalidPlan, StageFailed, WrongState
from services.review_pipeline_service import ReviewPipeline


BundleLoader = Callable[[str], PaperBundle]


class BatchHandle:
    """배치 제어 핸들. status / cancel / approve 는 다른 스레드에서 호출 가능"""

    def __init__(
        self,
        report: BatchReport,
        plan: StagePlan,
        pipeline: ReviewPipeline,
        bundle_loader: BundleLoader,
        workers: int = 4,
        show_progress: bool = False,
    ):
        self._report = report
        self.plan = plan
        self.pipeline = pipeline
        self.bundle_loader = bundle_loader
        self.workers = max(1, workers)
        self.show_progress = show_progress
        self._lock = threading.Lock()
        self._cancel = threading.Event()
        self._clock = SystemClock()

    # ---------- control ----------
    @property
    def run_id(self) -> str:
        return self._report.run_id

    @property
    def state(self) -> BatchState:
        with self._lock:
            return self._report.state

    @property
    def report(self) -> BatchReport:
        return self.status()

    def status(self) -> BatchReport:
        with self._lock:
            return self._report.model_copy(deep=True)

    def cancel(self):
        """진행 중인 단계가 끝나면 멈춤 (체크포인트 보존)"""
        self._cancel.set()
        review_logger.warning(f"🛑 [{self.run_id}] 취소 요청")
        with self._lock:
            if self._report.state == BatchState.AWAITING_APPROVAL:
                self._report.state = BatchState.CANCELLED
                self._persist_locked()

    @property
    def cancel_requested(self) -> bool:
        return self._cancel.is_set()

    # ---------- state updates ----------
    def _persist_locked(self):
        self._report.updated_at = utc_iso(self._clock.now())
        store = self.pipeline.store
        if store is not None:
            store.save_batch(self._report)

    def _paper(self, paper_id: str) -> PaperStatus:
        for paper in self._report.papers:
            if paper.paper_id == paper_id:
                return paper
        raise KeyError(paper_id)

    def _update(self, paper_id: str, **fields):
        with self._lock:
            paper = self._paper(paper_id)
            for name, value in fields.items():
                setattr(paper, name, value)
            self._persist_locked()

    def _set_state(self, state: BatchState):
        with self._lock:
            self._report.state = state
            self._persist_locked()

    def _on_stage(self, paper_id: str, record: StageRecord):
        with self._lock:
            paper = self._paper(paper_id)
            paper.completed_stages = paper.completed_stages + [record.stage]
            self._persist_locked()

    # ---------- execution ----------
    async def _process_paper(self, paper_id: str, stop_after: Optional[str]):
        if self.cancel_requested:
            return
        started = time.perf_counter()
        self._update(paper_id, status="running", started_at=utc_iso(self._clock.now()), failure_cause=None, failed_stage=None)
        status, fields = "failed", {}
        try:
            bundle = self.bundle_loader(paper_id)
            store = self.pipeline.store
            checkpoint = store.load_checkpoint(paper_id) if store is not None else None
            records, artifact = await self.pipeline.run(
                bundle,
                self.plan,
                checkpoint=checkpoint,
                stop_after=stop_after,
                should_stop=self._cancel.is_set,
                on_stage=self._on_stage,
            )
            status = "completed" if artifact is not None else "paused"
            fields["completed_stages"] = [record.stage for record in records]
        except Interrupted:
            status = "pending"
        except StageFailed as e:
            fields.update(failure_cause=f"{type(e.cause).__name__}: {e.cause}", failed_stage=e.stage)
        except Exception as e:
            # 논문 단위 격리: 예외는 기록만
            review_logger.log_error("BatchHandle", e, {"paper_id": paper_id})
            fields.update(failure_cause=f"{type(e).__name__}: {e}")
        self._update(
            paper_id,
            status=status,
            finished_at=utc_iso(self._clock.now()),
            duration_seconds=round(time.perf_counter() - started, 3),
            **fields,
        )

    async def _process(self, paper_ids: Sequence[str], phase: str, stop_after: Optional[str] = None):
        if not paper_ids:
            return
        for paper_id in paper_ids:
            self._update(paper_id, phase=phase)
        review_logger.info(f"📦 [{self.run_id}] {phase} 단계 시작: {len(paper_ids)}편 (workers={self.workers})")

        semaphore = asyncio.Semaphore(self.workers)
        progress = tqdm(total=len(paper_ids), desc=f"{self.run_id}:{phase}", disable=not self.show_progress)

        async def worker(paper_id: str):
            async with semaphore:
                await self._process_paper(paper_id, stop_after)
                progress.update(1)

        try:
            await asyncio.gather(*(worker(paper_id) for paper_id in paper_ids))
        finally:
            progress.close()

    def _finish(self, awaiting: bool):
        if self.cancel_requested:
            self._set_state(BatchState.CANCELLED)
        elif awaiting:
            self._set_state(BatchState.AWAITING_APPROVAL)
        else:
            self._set_state(BatchState.COMPLETED)
        summary = self.status().summary()
        review_logger.info(
            f"📊 [{self.run_id}] {summary['state']}: 완료 {summary['processed']}, 실패 {summary['failed']}, 대기 {summary['pending']}"
        )

    def _remaining(self) -> List[str]:
        with self._lock:
            return [paper.paper_id for paper in self._report.papers if paper.status not in ("completed", "failed")]

    async def run_initial(self):
        report = self.status()
        initial = [paper.paper_id for paper in report.papers[:report.initial_batch_size]]
        if report.policy.gate == Gate.AUTO:
            await self._process(initial, "initial")
            if not self.cancel_requested:
                await self._process(self._remaining(), "remainder")
            self._finish(awaiting=False)
            return
        await self._process(initial, "initial", stop_after=report.policy.initial_stop_after)
        # 초기 배치가 전체면 승인할 나머지가 없음
        self._finish(awaiting=bool(self._remaining()))

    async def run_remainder(self):
        await self._process(self._remaining(), "remainder")
        self._finish(awaiting=False)


class BatchContinuation:
    """approve_rollout 결과. await 하거나 run() 호출"""

    def __init__(self, handle: BatchHandle):
        self.handle = handle
        self.paper_ids = handle._remaining()

    async def run(self) -> BatchReport:
        await self.handle.run_remainder()
        return self.handle.status()

    def __await__(self):
        return self.run().__await__()


def new_report(run_id: str, paper_ids: Sequence[str], rollout: RolloutPolicy, plan_digest: str, config_digest: str = "") -> BatchReport:
    return BatchReport(
        run_id=run_id,
        state=BatchState.RUNNING,
        policy=rollout,
        plan_digest=plan_digest,
        config_digest=config_digest,
        initial_batch_size=rollout.initial_batch_size(len(paper_ids)),
        papers=[PaperStatus(paper_id=paper_id) for paper_id in paper_ids],
    )


async def run_batch(
    bundles: Sequence[PaperBundle],
    plan: StagePlan,
    pipeline: ReviewPipeline,
    rollout: RolloutPolicy,
    run_id: str = "batch",
    workers: int = 4,
    config_digest: str = "",
    show_progress: bool = False,
) -> BatchHandle:
    """초기 배치 실행 후 핸들 반환. manual 게이트면 AWAITING_APPROVAL 상태로 멈춤"""
    handle = prepare_batch(bundles, plan, pipeline, rollout, run_id, workers, config_digest, show_progress)
    await handle.run_initial()
    return handle


def prepare_batch(
    bundles: Sequence[PaperBundle],
    plan: StagePlan,
    pipeline: ReviewPipeline,
    rollout: RolloutPolicy,
    run_id: str = "batch",
    workers: int = 4,
    config_digest: str = "",
    show_progress: bool = False,
) -> BatchHandle:
    """검증 + 초기 상태 저장만. 실행은 handle.run_initial()"""
    if not bundles:
        raise InvalidPlan("batch needs at least one paper")
    if rollout.initial_stop_after is not None and rollout.initial_stop_after not in plan.stage_names:
        raise InvalidPlan(f"initial_stop_after {rollout.initial_stop_after!r} is not a stage of the plan")
    by_id: Dict[str, PaperBundle] = {bundle.paper_id: bundle for bundle in bundles}
    if len(by_id) != len(bundles):
        raise InvalidPlan("duplicate paper ids in batch")

    report = new_report(run_id, [bundle.paper_id for bundle in bundles], rollout, pipeline.digest(plan), config_digest)
    handle = BatchHandle(report, plan, pipeline, by_id.__getitem__, workers=workers, show_progress=show_progress)
    with handle._lock:
        handle._persist_locked()
    review_logger.info(f"🚦 [{run_id}] 배치 시작: {report.total}편, 초기 배치 {report.initial_batch_size}편, 게이트 {rollout.gate.value}")
    return handle


def approve_rollout(handle: BatchHandle) -> BatchContinuation:
    with handle._lock:
        if handle._report.state != BatchState.AWAITING_APPROVAL:
            raise WrongState(f"batch {handle.run_id} is {handle._report.state.value}, not AWAITING_APPROVAL")
        handle._report.state = BatchState.RUNNING
        handle._persist_locked()
    review_logger.info(f"✅ [{handle.run_id}] 롤아웃 승인")
    return BatchContinuation(handle)


def load_batch(store, plan: StagePlan, pipeline: ReviewPipeline, bundle_loader: BundleLoader, workers: int = 4) -> BatchHandle:
    """저장된 batch.json 에서 핸들 복원 (다른 프로세스에서 승인할 때)"""
    report = store.load_batch()
    if report is None:
        raise WrongState(f"no batch state under {store.run_dir}")
    if report.plan_digest != pipeline.digest(plan):
        raise InvalidPlan(f"batch {report.run_id} was started with a different plan")
    # 중단된 프로세스의 running 상태는 pending 으로 되돌림
    for paper in report.papers:
        if paper.status == "running":
            paper.status = "pending"
    return BatchHandle(report, plan, pipeline, bundle_loader, workers=workers)
