from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator


REVIEW_ELEMENTS = ("title", "synopsis", "summary", "strengths", "weaknesses", "references")

REVIEW_ISSUES = ("identity_reveal", "offensive_content", "bias_concern", "missing_structure")
EDITORIAL_CONCERNS = ("ethical_concern", "author_identity_in_paper", "policy_violation")

TriState = Literal["yes", "no", "unsure"]


class ReviewSections(BaseModel):
    title: str = ""
    synopsis: str = ""
    summary: str = ""
    strengths: List[str] = Field(default_factory=list)
    weaknesses: List[str] = Field(default_factory=list)
    references: List[str] = Field(default_factory=list)


class Review(BaseModel):
    paper_id: str
    body: str
    sections: ReviewSections = Field(default_factory=ReviewSections)


class ElementVerdict(BaseModel):
    element: str
    present: bool
    heading: Optional[str] = None
    span: Optional[Tuple[int, int]] = None  # body 내 섹션 내용의 [start, end)


class StructureReport(BaseModel):
    verdicts: List[ElementVerdict]

    @property
    def missing(self) -> List[str]:
        return [verdict.element for verdict in self.verdicts if not verdict.present]

    @property
    def valid(self) -> bool:
        return not self.missing


class Finding(BaseModel):
    kind: str
    rationale: str

    @model_validator(mode="after")
    def _rationale_required(self):
        if not self.rationale.strip():
            raise ValueError(f"finding {self.kind} needs a rationale")
        return self


class CriticFindings(BaseModel):
    issues: List[Finding] = Field(default_factory=list)
    editorial_concerns: List[Finding] = Field(default_factory=list)
    appears_llm_written: TriState = "unsure"
    unqualified_reviewer: TriState = "unsure"
    apparent_effort: int = 0
    overall_quality: int = 0
    notes: str = ""

    @model_validator(mode="after")
    def _closed_taxonomy(self):
        for finding in self.issues:
            if finding.kind not in REVIEW_ISSUES:
                raise ValueError(f"unknown review issue: {finding.kind}")
        for finding in self.editorial_concerns:
            if finding.kind not in EDITORIAL_CONCERNS:
                raise ValueError(f"unknown editorial concern: {finding.kind}")
        return self

    @property
    def issue_kinds(self) -> List[str]:
        return [finding.kind for finding in self.issues]

    @property
    def concern_kinds(self) -> List[str]:
        return [finding.kind for finding in self.editorial_concerns]

    @property
    def flagged(self) -> bool:
        return bool(self.issues or self.editorial_concerns)


class CitationVerdict(str, Enum):
    VALID = "valid"
    UNSURE = "unsure"
    FAKE = "fake"


class ParsedCitation(BaseModel):
    authors: List[str] = Field(default_factory=list)
    year: Optional[str] = None
    title: str = ""
    venue: str = ""


class BibRecord(BaseModel):
    """오프라인 인덱스 한 줄"""

    authors: List[str]
    title: str
    venue: str = ""
    year: Optional[str] = None


class ResolverMatch(BaseModel):
    record: Optional[BibRecord] = None
    confidence: float = 0.0
    reason: str = ""


class CitationEntry(BaseModel):
    raw: str
    parsed: Optional[ParsedCitation] = None
    verdict: CitationVerdict
    evidence: str = ""
    matched: Optional[BibRecord] = None


class CitationAudit(BaseModel):
    paper_id: str
    citations: List[CitationEntry] = Field(default_factory=list)

    def counts(self) -> Dict[str, int]:
        tally = {verdict.value: 0 for verdict in CitationVerdict}
        for entry in self.citations:
            tally[entry.verdict.value] += 1
        return tally


class OversightReport(BaseModel):
    csv_path: str
    sidecar_path: str
    row_count: int
    flagged_count: int
    column_totals: Dict[str, int] = Field(default_factory=dict)
