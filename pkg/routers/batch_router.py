import asyncio
from typing import Callable, Dict, Optional

from fastapi import APIRouter, Depends, HTTPException

from services.batch_service import BatchHandle, approve_rollout
from services.exceptions import PipelineError, WrongState

router = APIRouter(prefix="/batches", tags=["batches"])


class BatchRegistry:
    """실행 중인 배치 핸들 모음. 메모리에 없으면 loader 로 저장된 상태에서 복원"""

    def __init__(self, loader: Optional[Callable[[str], BatchHandle]] = None):
        self._handles: Dict[str, BatchHandle] = {}
        self._tasks: Dict[str, asyncio.Task] = {}
        self.loader = loader

    def add(self, handle: BatchHandle):
        self._handles[handle.run_id] = handle

    def run_ids(self):
        return sorted(self._handles)

    def get(self, run_id: str) -> Optional[BatchHandle]:
        if run_id not in self._handles and self.loader is not None:
            try:
                self._handles[run_id] = self.loader(run_id)
            except (PipelineError, FileNotFoundError):
                return None
        return self._handles.get(run_id)

    def start(self, run_id: str, coroutine) -> asyncio.Task:
        task = asyncio.get_running_loop().create_task(coroutine)
        self._tasks[run_id] = task
        return task


_registry = BatchRegistry()


def get_registry() -> BatchRegistry:
    return _registry


def set_registry(registry: BatchRegistry):
    global _registry
    _registry = registry


def _handle_or_404(registry: BatchRegistry, run_id: str) -> BatchHandle:
    handle = registry.get(run_id)
    if handle is None:
        raise HTTPException(status_code=404, detail=f"배치를 찾을 수 없습니다: {run_id}")
    return handle


@router.get("/")
def list_batches(registry: BatchRegistry = Depends(get_registry)):
    """메모리에 올라온 배치 목록"""
    return {"runs": registry.run_ids()}


@router.get("/{run_id}/status")
def batch_status(run_id: str, registry: BatchRegistry = Depends(get_registry)):
    """처리/실패/대기/진행 중 수와 단계별 완료 수"""
    try:
        report = _handle_or_404(registry, run_id).status()
        return {
            **report.summary(),
            "papers": [paper.model_dump(mode="json") for paper in report.papers],
        }
    except HTTPException as e:
        raise e
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"서버 오류: {str(e)}")


@router.post("/{run_id}/approve")
async def approve_batch(run_id: str, registry: BatchRegistry = Depends(get_registry)):
    """AWAITING_APPROVAL 배치의 나머지 논문 처리를 백그라운드로 시작"""
    try:
        handle = _handle_or_404(registry, run_id)
        continuation = approve_rollout(handle)
        registry.start(run_id, continuation.run())
        return {"run_id": run_id, "state": handle.state.value, "remaining": len(continuation.paper_ids)}
    except WrongState as e:
        raise HTTPException(status_code=409, detail=str(e))
    except HTTPException as e:
        raise e
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"서버 오류: {str(e)}")


@router.post("/{run_id}/cancel")
def cancel_batch(run_id: str, registry: BatchRegistry = Depends(get_registry)):
    """진행 중인 단계가 끝나면 멈춤"""
    try:
        handle = _handle_or_404(registry, run_id)
        handle.cancel()
        return {"run_id": run_id, "state": handle.state.value, "cancel_requested": True}
    except HTTPException as e:
        raise e
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"서버 오류: {str(e)}")
