from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from schemas.pipeline import CORE_STAGES


SPECS_CRITERIA = CORE_STAGES


def _check_criterion(value: str) -> str:
    if value not in SPECS_CRITERIA:
        raise ValueError(f"criterion must be one of {SPECS_CRITERIA}, got {value!r}")
    return value


# ============= [CURATION] ==============
class ProceedingsEntry(BaseModel):
    proceedings_id: str
    title: str
    authors: List[str]
    category: str


class QuotaPolicy(BaseModel):
    kind: Literal["uniform", "proportional", "explicit"] = "proportional"
    total: int = 0
    per_category: Dict[str, int] = Field(default_factory=dict)  # explicit 전용


class SourceRecord(BaseModel):
    source_id: str  # arXiv id
    title: str
    authors: List[str]
    source_path: Optional[str] = None


class SourceMatch(BaseModel):
    source_id: str
    normalized_title: str
    author_overlap: float
    source_path: Optional[str] = None


class NoMatch(BaseModel):
    reason: str


class CompileStatus(BaseModel):
    ok: bool
    reason: str = ""  # "", "error", "timeout", "no_pdf", "no_root"
    log_excerpt: str = ""
    pdf_path: Optional[str] = None


class SourcePaper(BaseModel):
    proceedings_id: str
    title: str
    category: str
    source_archive: Optional[str] = None
    source_match: Optional[SourceMatch] = None
    compile_status: Optional[CompileStatus] = None

    @property
    def included(self) -> bool:
        return self.source_match is not None and self.compile_status is not None and self.compile_status.ok


class PerturbationProposal(BaseModel):
    criterion: str
    subtype: str
    description: str
    target_file: str
    line_range: Tuple[int, int]
    original_span: str
    modified_span: str

    @field_validator("criterion")
    @classmethod
    def _criterion_closed(cls, value):
        return _check_criterion(value)

    @field_validator("line_range")
    @classmethod
    def _range_order(cls, value):
        start, end = value
        if start < 1 or end < start:
            raise ValueError("line_range must satisfy 1 <= start <= end")
        return value


class Perturbation(PerturbationProposal):
    perturbation_id: str
    paper_id: str
    perturbed_pdf: Optional[str] = None


class Rejected(BaseModel):
    reason: Literal["span_mismatch", "compile_failure"]
    detail: str = ""
    log_excerpt: str = ""


class OversightVerdict(BaseModel):
    perturbation_id: str
    reviewer_id: str
    valid: bool
    note: str = ""


class ConsensusRow(BaseModel):
    criterion: str
    n: int
    reviewer_valid: Dict[str, int]
    consensus: int
    agreed_invalid: int
    split: int


class ConsensusTable(BaseModel):
    reviewers: List[str]
    rows: List[ConsensusRow]
    overall: ConsensusRow
    consensus_by_perturbation: Dict[str, bool]


class ManifestProvenance(BaseModel):
    generator_backend_id: str = ""
    created_at: str = ""
    seed: Optional[int] = None


class DatasetManifest(BaseModel):
    venue_id: str
    papers: List[SourcePaper] = Field(default_factory=list)
    perturbations: List[Perturbation] = Field(default_factory=list)
    counts: Dict[str, int] = Field(default_factory=dict)
    total: int = 0
    provenance: ManifestProvenance = Field(default_factory=ManifestProvenance)


# ============= [EVALUATION] ==============
class VariantKind(str, Enum):
    BASELINE = "baseline"
    TARGETED = "targeted"
    FINAL = "final"


class ReviewVariant(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: VariantKind
    stage: Optional[str] = None

    @model_validator(mode="after")
    def _stage_rules(self):
        if self.kind is VariantKind.TARGETED:
            _check_criterion(self.stage or "")
        elif self.stage is not None:
            raise ValueError("only targeted variants carry a stage")
        return self

    @property
    def key(self) -> str:
        return f"targeted:{self.stage}" if self.kind is VariantKind.TARGETED else self.kind.value

    @classmethod
    def parse(cls, key: str) -> "ReviewVariant":
        if key.startswith("targeted:"):
            return cls(kind=VariantKind.TARGETED, stage=key.split(":", 1)[1])
        return cls(kind=VariantKind(key))

    @classmethod
    def all_variants(cls) -> List["ReviewVariant"]:
        return (
            [cls(kind=VariantKind.BASELINE)]
            + [cls(kind=VariantKind.TARGETED, stage=stage) for stage in SPECS_CRITERIA]
            + [cls(kind=VariantKind.FINAL)]
        )


class VariantReview(BaseModel):
    perturbation_id: str
    variant: str
    body: str


class VariantFailure(BaseModel):
    perturbation_id: str
    variant: str
    error: str


class Judgment(BaseModel):
    perturbation_id: str
    variant: str
    criterion: str
    caught: bool
    supporting_excerpt: str = ""
    justification: str = ""
    reason: str = ""  # "", "excerpt_unverified", "missing_excerpt"

    @model_validator(mode="after")
    def _excerpt_when_caught(self):
        if self.caught and not self.supporting_excerpt.strip():
            raise ValueError("caught judgment requires a supporting excerpt")
        return self


class RecallCell(BaseModel):
    caught: int
    n: int

    @property
    def rate(self) -> float:
        return self.caught / self.n if self.n else 0.0


class DetectionMatrix(BaseModel):
    criteria: List[str]
    stages: List[str]
    cells: Dict[str, Dict[str, RecallCell]]  # criterion -> stage -> cell
    row_n: Dict[str, int]
    margins: Dict[str, float]

    def rate(self, criterion: str, stage: str) -> float:
        return self.cells[criterion][stage].rate


class PairedOutcome(BaseModel):
    perturbation_id: str
    a_caught: bool
    b_caught: bool


class McNemarResult(BaseModel):
    b: int
    c: int
    p_value: float


class VariantComparison(BaseModel):
    criterion: str
    n: int
    recall_a: float
    recall_b: float
    delta: float
    caught_a: int
    caught_b: int
    mcnemar: McNemarResult
