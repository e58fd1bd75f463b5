from typing import Dict, List, Optional

from pydantic import BaseModel, Field, SecretStr, field_validator

from schemas.gateway import BackendSettings, RetryPolicy


class IngestSettings(BaseModel):
    target_dpi: int = 250
    ocr_backend: str = "text-layer"  # fixture | text-layer | http(s)://...
    ocr_timeout: float = 120.0
    ocr_script: Optional[str] = None

    @field_validator("target_dpi")
    @classmethod
    def _positive(cls, value):
        if value <= 0:
            raise ValueError("target_dpi must be positive")
        return value


class GatewaySettings(BaseModel):
    max_in_flight: int = 8
    retry: RetryPolicy = Field(default_factory=RetryPolicy)
    api_key: Optional[SecretStr] = None
    api_base: Optional[str] = None
    backends: Dict[str, BackendSettings] = Field(default_factory=dict)


class PipelineSettings(BaseModel):
    plan_id: str = "default"
    prompts_file: Optional[str] = None
    workers: int = 4
    rollout_fraction: float = 0.30
    gate: str = "manual"
    initial_stop_after: Optional[str] = None


class QualitySettings(BaseModel):
    critic_backend: str = "critic"
    citation_index: Optional[str] = None
    valid_threshold: float = 0.90
    fake_threshold: float = 0.60
    rating_scale: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])


class CurationSettings(BaseModel):
    compile_cmd: str = "latexmk -pdf -interaction=nonstopmode -halt-on-error -file-line-error {root}"
    compile_timeout: float = 120.0
    compile_workers: int = 4
    generator_backend: str = "generator"
    min_author_overlap: float = 0.8


class EvaluationSettings(BaseModel):
    judge_backend: str = "judge"
    workers: int = 4


class SurveySettings(BaseModel):
    alpha: float = 0.01
    exact_max_n: int = 14


class RunConfig(BaseModel):
    config_path: Optional[str] = None
    output_root: str = "."
    seed: int = 0
    mock: bool = False
    ingest: IngestSettings = Field(default_factory=IngestSettings)
    gateway: GatewaySettings = Field(default_factory=GatewaySettings)
    pipeline: PipelineSettings = Field(default_factory=PipelineSettings)
    quality: QualitySettings = Field(default_factory=QualitySettings)
    curation: CurationSettings = Field(default_factory=CurationSettings)
    evaluation: EvaluationSettings = Field(default_factory=EvaluationSettings)
    survey: SurveySettings = Field(default_factory=SurveySettings)
