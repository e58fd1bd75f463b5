import math
from enum import Enum
from fractions import Fraction
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from schemas.gateway import Effort, TokenUsage, ToolSet, ToolTrace
from schemas.digest import canonical_json, sha256_text


CORE_STAGES = ("story", "presentation", "evaluations", "correctness", "significance")
DEFAULT_STAGE_ORDER = CORE_STAGES + ("initial_review", "self_critique", "final_review")


class StageSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    prompt_id: str
    tools: ToolSet = Field(default_factory=ToolSet)
    backend_id: str = "reviewer"
    effort: Effort = Effort.MEDIUM


class StagePlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    plan_id: str = "default"
    stages: List[StageSpec]
    base_instruction_id: str = "base"

    @property
    def stage_names(self) -> List[str]:
        return [stage.name for stage in self.stages]

    def digest(self, prompt_digests: Optional[Dict[str, str]] = None) -> str:
        """단계 구성 + 프롬프트 템플릿 해시"""
        payload = {
            "base": self.base_instruction_id,
            "stages": [stage.model_dump(mode="json") for stage in self.stages],
            "prompts": dict(sorted((prompt_digests or {}).items())),
        }
        return sha256_text(canonical_json(payload))


class StageRecord(BaseModel):
    stage: str
    prompt_id: str
    prompt_text: str
    request_digest: str
    response_text: str
    tool_traces: List[ToolTrace] = Field(default_factory=list)
    token_usage: TokenUsage = Field(default_factory=TokenUsage)
    started_at: str
    finished_at: str
    attempts: int = 1
    backend_id: str = ""


class Checkpoint(BaseModel):
    paper_id: str
    plan_digest: str
    records: List[StageRecord] = Field(default_factory=list)

    @property
    def completed_stages(self) -> List[str]:
        return [record.stage for record in self.records]


class Gate(str, Enum):
    MANUAL = "manual_approval_required"
    AUTO = "auto"

    @classmethod
    def parse(cls, value: str) -> "Gate":
        aliases = {"manual": cls.MANUAL, "auto": cls.AUTO}
        return aliases.get(value) or cls(value)


class RolloutPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    initial_fraction: float = 0.30
    gate: Gate = Gate.MANUAL
    initial_stop_after: Optional[str] = None  # 초기 배치를 이 단계까지만 실행

    @field_validator("initial_fraction")
    @classmethod
    def _fraction_range(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("initial_fraction must be in [0, 1]")
        return value

    def initial_batch_size(self, total: int) -> int:
        """floor(fraction × N), 십진 표기 그대로 정확 계산"""
        return math.floor(Fraction(str(self.initial_fraction)) * total)


class BatchState(str, Enum):
    RUNNING = "RUNNING"
    AWAITING_APPROVAL = "AWAITING_APPROVAL"
    COMPLETED = "COMPLETED"
    CANCELLED = "CANCELLED"


class PaperStatus(BaseModel):
    paper_id: str
    status: str = "pending"  # pending, running, paused, completed, failed
    phase: str = "initial"  # initial, remainder
    completed_stages: List[str] = Field(default_factory=list)
    started_at: Optional[str] = None
    finished_at: Optional[str] = None
    duration_seconds: Optional[float] = None
    failure_cause: Optional[str] = None
    failed_stage: Optional[str] = None


class BatchReport(BaseModel):
    run_id: str
    state: BatchState = BatchState.RUNNING
    policy: RolloutPolicy = Field(default_factory=RolloutPolicy)
    plan_digest: str = ""
    config_digest: str = ""
    initial_batch_size: int = 0
    papers: List[PaperStatus] = Field(default_factory=list)
    updated_at: Optional[str] = None

    @property
    def total(self) -> int:
        return len(self.papers)

    def count(self, status: str) -> int:
        return sum(1 for paper in self.papers if paper.status == status)

    @property
    def processed(self) -> int:
        return self.count("completed")

    @property
    def failed(self) -> int:
        return self.count("failed")

    @property
    def pending(self) -> int:
        # 실행 중인 논문도 pending 으로 집계
        return self.count("pending") + self.count("running") + self.count("paused")

    @property
    def in_flight(self) -> int:
        return self.count("running")

    def stage_progress(self) -> Dict[str, int]:
        progress: Dict[str, int] = {}
        for paper in self.papers:
            for stage in paper.completed_stages:
                progress[stage] = progress.get(stage, 0) + 1
        return progress

    def summary(self) -> Dict[str, object]:
        return {
            "run_id": self.run_id,
            "state": self.state.value,
            "total": self.total,
            "initial_batch_size": self.initial_batch_size,
            "processed": self.processed,
            "failed": self.failed,
            "pending": self.pending,
            "in_flight": self.in_flight,
            "stage_progress": self.stage_progress(),
            "updated_at": self.updated_at,
        }


class ReviewArtifact(BaseModel):
    paper_id: str
    body: str
    plan_digest: str
    stage_count: int
