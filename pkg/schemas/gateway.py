import random
from enum import Enum
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Effort(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class PromptSegment(BaseModel):
    model_config = ConfigDict(frozen=True)

    role: Literal["system", "user", "assistant", "tool"]
    text: str
    label: str = ""  # 예: "base", "story:prompt", "story:result"


class DocumentRef(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["pdf", "markdown"]
    paper_id: str
    digest: str


class ToolSet(BaseModel):
    """code_execution / web_search 두 종류만 허용"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    code_execution: bool = False
    web_search: bool = False
    web_search_scope_note: str = ""


class ModelRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    segments: List[PromptSegment]
    attachments: List[DocumentRef] = Field(default_factory=list)
    tools: ToolSet = Field(default_factory=ToolSet)
    effort: Effort = Effort.MEDIUM
    max_output_tokens: int = 16000
    match_key: str = ""  # fixture 스크립트 조회 키 (보통 단계 이름)
    paper_id: str = ""

    @field_validator("segments")
    @classmethod
    def _segments_non_empty(cls, value):
        if not value:
            raise ValueError("segments must be non-empty")
        return value

    @field_validator("max_output_tokens")
    @classmethod
    def _positive_tokens(cls, value):
        if value <= 0:
            raise ValueError("max_output_tokens must be positive")
        return value


class ToolTrace(BaseModel):
    kind: Literal["code_execution", "web_search"]
    input: str = ""
    output: str = ""
    duration: float = 0.0


class TokenUsage(BaseModel):
    input: int = 0
    output: int = 0
    reasoning: int = 0


class ModelResponse(BaseModel):
    text: str
    tool_traces: List[ToolTrace] = Field(default_factory=list)
    token_usage: TokenUsage = Field(default_factory=TokenUsage)
    attempts: int = 1
    delays: List[float] = Field(default_factory=list)
    backend_id: str = ""


class RetryPolicy(BaseModel):
    """delay(k) = base_delay * factor**k (± jitter)"""

    model_config = ConfigDict(frozen=True)

    max_retries: int = 5
    base_delay: float = 1.0
    factor: float = 2.0
    jitter: float = 0.0
    max_delay: Optional[float] = None

    @model_validator(mode="after")
    def _check(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.base_delay < 0 or self.factor < 1.0:
            raise ValueError("base_delay must be >= 0 and factor >= 1")
        if not 0.0 <= self.jitter < 1.0:
            raise ValueError("jitter must be in [0, 1)")
        return self

    def planned_delay(self, k: int) -> float:
        delay = self.base_delay * (self.factor ** k)
        if self.max_delay is not None:
            delay = min(delay, self.max_delay)
        return delay

    def delay(self, k: int, rng: Optional[random.Random] = None) -> float:
        base = self.planned_delay(k)
        if self.jitter == 0.0:
            return base
        rng = rng or random.Random()
        return base * (1.0 + rng.uniform(-self.jitter, self.jitter))

    def schedule(self) -> List[float]:
        return [self.planned_delay(k) for k in range(self.max_retries)]


class FixtureEntry(BaseModel):
    """fixture 백엔드 스크립트 항목: 응답 또는 실패"""

    text: Optional[str] = None
    tool_traces: List[ToolTrace] = Field(default_factory=list)
    token_usage: TokenUsage = Field(default_factory=TokenUsage)
    error: Optional[Literal["rate_limit", "timeout", "server", "auth", "validation"]] = None
    repeat: bool = False

    @model_validator(mode="after")
    def _one_of(self):
        if (self.text is None) == (self.error is None):
            raise ValueError("fixture entry needs exactly one of text or error")
        return self


class BackendSettings(BaseModel):
    provider: Literal["openai", "anthropic", "fixture"] = "fixture"
    model: str = ""
    context_window: int = 400_000
    effort: Effort = Effort.MEDIUM
    max_output_tokens: int = 16000
    service_tier: Optional[str] = None
    script_path: Optional[str] = None
    extra: Dict[str, Any] = Field(default_factory=dict)
