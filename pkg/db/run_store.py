"""
Run store (파일 기반)
<output_root>/runs/<run_id>/
    run.json                    실행 매니페스트 (설정 스냅샷 + 해시)
    batch.json / status.txt     배치 상태 (프로세스 간 승인/조회)
    <paper_id>/bundle/          정규화 번들
    <paper_id>/records.jsonl    단계 기록 (헤더 줄 + 단계별 한 줄, append + fsync)
    <paper_id>/review.md        최종 리뷰
"""

import json
import os
import threading
from typing import Any, Dict, List, Optional

from schemas.pipeline import BatchReport, Checkpoint, StageRecord
from services.agents.utils import canonical_json, review_logger
from services.exceptions import PipelineError, PlanDigestMismatch


def _atomic_write(path: str, text: str):
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp_path, path)


def _drop_torn_tail(path: str):
    """마지막 개행 이후의 잘린 줄을 잘라냄 (다음 기록이 같은 줄에 붙지 않도록)"""
    with open(path, "rb+") as f:
        data = f.read()
        if not data or data.endswith(b"\n"):
            return
        f.truncate(data.rfind(b"\n") + 1)
        f.flush()
        os.fsync(f.fileno())
    review_logger.warning(f"⚠️ {path}: 잘린 마지막 줄 제거 후 이어서 기록")


class RunStore:
    def __init__(self, output_root: str, run_id: str):
        self.output_root = output_root
        self.run_id = run_id
        self.run_dir = os.path.join(output_root, "runs", run_id)
        os.makedirs(self.run_dir, exist_ok=True)
        self._locks: Dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock_for(self, key: str) -> threading.Lock:
        with self._locks_guard:
            if key not in self._locks:
                self._locks[key] = threading.Lock()
            return self._locks[key]

    # ---------- paths ----------
    def paper_dir(self, paper_id: str) -> str:
        path = os.path.join(self.run_dir, paper_id)
        os.makedirs(path, exist_ok=True)
        return path

    def bundle_dir(self, paper_id: str) -> str:
        return os.path.join(self.run_dir, paper_id, "bundle")

    def records_path(self, paper_id: str) -> str:
        return os.path.join(self.paper_dir(paper_id), "records.jsonl")

    def review_path(self, paper_id: str) -> str:
        return os.path.join(self.paper_dir(paper_id), "review.md")

    # ---------- checkpoints ----------
    def _append_line(self, path: str, entry: Dict[str, Any]):
        with open(path, "a", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")
            f.flush()
            os.fsync(f.fileno())

    def begin_checkpoint(self, paper_id: str, plan_digest: str):
        """헤더 줄이 없으면 기록. 기존 헤더와 plan 해시가 다르면 오류"""
        with self._lock_for(paper_id):
            existing = self._read_checkpoint(paper_id)
            if existing is None:
                path = self.records_path(paper_id)
                # 헤더 없는 잔여 파일은 버림
                if os.path.exists(path):
                    os.remove(path)
                self._append_line(path, {"type": "checkpoint", "paper_id": paper_id, "plan_digest": plan_digest})
            elif existing.plan_digest != plan_digest:
                raise PlanDigestMismatch(f"{paper_id}: checkpoint belongs to a different plan")
            else:
                _drop_torn_tail(self.records_path(paper_id))

    def append_record(self, paper_id: str, record: StageRecord):
        with self._lock_for(paper_id):
            self._append_line(self.records_path(paper_id), {"type": "stage", "record": record.model_dump(mode="json")})

    def _read_checkpoint(self, paper_id: str) -> Optional[Checkpoint]:
        path = self.records_path(paper_id)
        if not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().split("\n")

        header = None
        records: List[StageRecord] = []
        for number, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError:
                # 마지막 줄이 잘린 경우 (쓰기 중 중단)만 허용
                if any(rest.strip() for rest in lines[number + 1:]):
                    raise PipelineError(f"{path}: corrupt checkpoint line {number + 1}")
                review_logger.warning(f"⚠️ {path}: 잘린 마지막 줄 무시")
                break
            if entry.get("type") == "checkpoint":
                header = entry
            elif entry.get("type") == "stage" and header is not None:
                records.append(StageRecord.model_validate(entry["record"]))
        if header is None:
            return None
        return Checkpoint(paper_id=header["paper_id"], plan_digest=header["plan_digest"], records=records)

    def load_checkpoint(self, paper_id: str) -> Optional[Checkpoint]:
        with self._lock_for(paper_id):
            return self._read_checkpoint(paper_id)

    def reset_checkpoint(self, paper_id: str):
        with self._lock_for(paper_id):
            path = self.records_path(paper_id)
            if os.path.exists(path):
                os.remove(path)

    # ---------- artifacts ----------
    def write_review(self, paper_id: str, body: str) -> str:
        path = self.review_path(paper_id)
        _atomic_write(path, body)
        return path

    def read_review(self, paper_id: str) -> Optional[str]:
        path = self.review_path(paper_id)
        if not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8", newline="") as f:
            return f.read()

    def write_run_manifest(self, manifest: Dict[str, Any]):
        _atomic_write(os.path.join(self.run_dir, "run.json"), canonical_json(manifest) + "\n")

    def read_run_manifest(self) -> Dict[str, Any]:
        path = os.path.join(self.run_dir, "run.json")
        if not os.path.exists(path):
            raise PipelineError(f"no run manifest at {path}")
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    # ---------- batch state ----------
    def save_batch(self, report: BatchReport):
        with self._lock_for("__batch__"):
            _atomic_write(os.path.join(self.run_dir, "batch.json"), report.model_dump_json(indent=2))
            _atomic_write(os.path.join(self.run_dir, "status.txt"), format_status(report))

    def load_batch(self) -> Optional[BatchReport]:
        path = os.path.join(self.run_dir, "batch.json")
        if not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8") as f:
            return BatchReport.model_validate_json(f.read())


def format_status(report: BatchReport) -> str:
    summary = report.summary()
    lines = [
        f"run_id: {summary['run_id']}",
        f"state: {summary['state']}",
        f"total: {summary['total']}",
        f"initial_batch_size: {summary['initial_batch_size']}",
        f"processed: {summary['processed']}",
        f"failed: {summary['failed']}",
        f"pending: {summary['pending']}",
        f"in_flight: {summary['in_flight']}",
    ]
    for stage, count in sorted(summary["stage_progress"].items()):
        lines.append(f"stage[{stage}]: {count}")
    for paper in report.papers:
        if paper.status == "failed":
            lines.append(f"failed[{paper.paper_id}]: {paper.failed_stage or '-'}: {paper.failure_cause}")
    return "\n".join(lines) + "\n"
