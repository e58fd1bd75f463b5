"""
Review quality service
- validate_structure / parse_review: 6개 필수 요소(제목, 개요, 리뷰 요약, 강점, 약점, 참고문헌) 검사와 섹션 추출
- run_quality_critic: 리뷰 텍스트만 critic 백엔드에 전달해 품질 문제 표시
- compile_oversight_report: critic + 인용 검증 결과를 사람이 검토할 CSV 로 정리
"""

import json
import os
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd

from schemas.review import (
    EDITORIAL_CONCERNS,
    REVIEW_ELEMENTS,
    REVIEW_ISSUES,
    CitationAudit,
    CitationVerdict,
    CriticFindings,
    ElementVerdict,
    Finding,
    OversightReport,
    Review,
    ReviewSections,
    StructureReport,
)
from services.agents import CriticAgent
from services.agents.utils import normalize_whitespace, review_logger
from services.model_gateway import ModelGateway


# 요소별 제목 동의어 (정규화된 제목과 정확히 일치해야 함)
HEADING_SYNONYMS: Dict[str, Tuple[str, ...]] = {
    "title": ("title", "paper title", "title of the paper"),
    "synopsis": ("synopsis", "brief synopsis", "paper synopsis", "synopsis of the paper", "summary of the paper", "paper summary"),
    "summary": ("summary of the review", "review summary", "summary", "overall assessment"),
    "strengths": ("strengths", "strength", "pros", "strong points", "detailed strengths"),
    "weaknesses": ("weaknesses", "weakness", "concerns", "cons", "weak points", "limitations", "detailed weaknesses"),
    "references": ("references", "reference list", "citations", "bibliography", "works cited"),
}
_SYNONYM_TO_ELEMENT = {synonym: element for element, synonyms in HEADING_SYNONYMS.items() for synonym in synonyms}

MARKDOWN_HEADING = re.compile(r"^\s{0,3}(?P<hashes>#{1,6})\s+(?P<text>.+?)\s*#*\s*$")
BOLD_LINE = re.compile(r"^\s*(?:\*\*|__)(?P<text>[^*_]+?)(?:\*\*|__)\s*:?\s*(?P<rest>.*)$")
LABEL_LINE = re.compile(r"^\s*(?P<text>[A-Za-z][A-Za-z ()0-9.]*?)\s*:\s*(?P<rest>.*)$")
LIST_ITEM = re.compile(r"^\s*(?:[-*•+]|\d+[.)]|\[\d+\])\s+(?P<text>.*)$")
NUMBERING = re.compile(r"^\(?\d+[.)]?\s*")


def _heading_key(text: str) -> str:
    text = text.replace("*", "").replace("_", " ").strip().rstrip(":").strip()
    text = NUMBERING.sub("", text)
    return normalize_whitespace(text.lower())


@dataclass
class _Heading:
    element: Optional[str]
    heading: str
    line_start: int
    content_start: int
    level: int


def _scan_headings(body: str) -> List[_Heading]:
    headings: List[_Heading] = []
    offset = 0
    for line in body.splitlines(keepends=True):
        stripped = line.rstrip("\r\n")
        next_offset = offset + len(line)
        match = MARKDOWN_HEADING.match(stripped)
        if match:
            key = _heading_key(match.group("text"))
            headings.append(_Heading(_SYNONYM_TO_ELEMENT.get(key), match.group("text"), offset, next_offset, len(match.group("hashes"))))
        else:
            match = BOLD_LINE.match(stripped) or LABEL_LINE.match(stripped)
            if match and _heading_key(match.group("text")) in _SYNONYM_TO_ELEMENT:
                rest = match.group("rest")
                content_start = offset + stripped.rfind(rest) if rest else next_offset
                headings.append(_Heading(_SYNONYM_TO_ELEMENT[_heading_key(match.group("text"))], match.group("text"), offset, content_start, 0))
        offset = next_offset
    return headings


def validate_structure(body: str) -> StructureReport:
    """요소별 존재 여부 + 내용 구간. 빈 본문은 6개 모두 누락"""
    body = body or ""
    headings = _scan_headings(body)
    element_headings = [h for h in headings if h.element is not None]

    found: Dict[str, ElementVerdict] = {}
    for index, heading in enumerate(element_headings):
        if heading.element in found:
            continue
        end = element_headings[index + 1].line_start if index + 1 < len(element_headings) else len(body)
        content = body[heading.content_start:end]
        if not content.strip():
            continue
        start = heading.content_start + (len(content) - len(content.lstrip()))
        stop = heading.content_start + len(content.rstrip())
        found[heading.element] = ElementVerdict(element=heading.element, present=True, heading=heading.heading, span=(start, stop))

    # 제목 요소가 없으면 첫 줄의 최상위 제목을 논문 제목으로 간주
    if "title" not in found and headings and headings[0].level == 1 and headings[0].element is None:
        first = headings[0]
        if not body[:first.line_start].strip():
            line_end = first.content_start
            text = body[first.line_start:line_end].strip().lstrip("#").strip()
            start = body.index(text, first.line_start)
            found["title"] = ElementVerdict(element="title", present=True, heading=None, span=(start, start + len(text)))

    verdicts = [found.get(element) or ElementVerdict(element=element, present=False) for element in REVIEW_ELEMENTS]
    return StructureReport(verdicts=verdicts)


def _list_items(text: str) -> List[str]:
    items: List[str] = []
    in_list = False
    for line in text.splitlines():
        match = LIST_ITEM.match(line)
        if match:
            items.append(match.group("text").strip())
            in_list = True
        elif line.strip() and in_list and items:
            items[-1] = f"{items[-1]} {line.strip()}"
        elif not line.strip():
            in_list = bool(items) and in_list
    if items:
        return [item for item in items if item]
    # 목록 기호가 없으면 문단 단위
    return [normalize_whitespace(p) for p in re.split(r"\n\s*\n", text) if p.strip()]


def parse_review(paper_id: str, body: str) -> Review:
    report = validate_structure(body)
    values: Dict[str, object] = {}
    for verdict in report.verdicts:
        if not verdict.present:
            continue
        text = body[verdict.span[0]:verdict.span[1]]
        if verdict.element in ("strengths", "weaknesses", "references"):
            values[verdict.element] = _list_items(text)
        elif verdict.element == "title":
            values["title"] = text.strip().splitlines()[0].strip().strip("#*_ ").strip()
        else:
            values[verdict.element] = text.strip()
    return Review(paper_id=paper_id, body=body, sections=ReviewSections(**values))


# ============= [CRITIC] ==============
async def run_quality_critic(
    review: Review,
    gateway: ModelGateway,
    backend_id: str = "critic",
    rating_scale: Sequence[int] = (1, 2, 3, 4, 5),
) -> CriticFindings:
    """critic 은 리뷰 본문만 받음 (논문, 단계 프롬프트 없음)"""
    return await CriticAgent(rating_scale).critique(review, gateway, backend_id)


async def review_findings(
    review: Review,
    gateway: ModelGateway,
    backend_id: str = "critic",
    rating_scale: Sequence[int] = (1, 2, 3, 4, 5),
) -> CriticFindings:
    """critic 결과 + 구조 검사에서 빠진 요소는 missing_structure 로 추가"""
    findings = await run_quality_critic(review, gateway, backend_id, rating_scale)
    missing = validate_structure(review.body).missing
    if missing and "missing_structure" not in findings.issue_kinds:
        extra = Finding(kind="missing_structure", rationale=f"missing elements: {', '.join(missing)}")
        findings = findings.model_copy(update={"issues": findings.issues + [extra]})
    return findings


# ============= [OVERSIGHT REPORT] ==============
CITATION_COLUMNS = tuple(f"citations_{verdict.value}" for verdict in CitationVerdict)
AUXILIARY_COLUMNS = ("appears_llm_written", "unqualified_reviewer", "apparent_effort", "overall_quality")
OVERSIGHT_COLUMNS = ("paper_id", "flagged") + REVIEW_ISSUES + EDITORIAL_CONCERNS + AUXILIARY_COLUMNS + CITATION_COLUMNS + ("notes",)
COUNTED_COLUMNS = ("flagged",) + REVIEW_ISSUES + EDITORIAL_CONCERNS + CITATION_COLUMNS


def _oversight_row(paper_id: str, findings: CriticFindings, audit: Optional[CitationAudit]) -> Dict[str, object]:
    counts = audit.counts() if audit is not None else {verdict.value: 0 for verdict in CitationVerdict}
    row: Dict[str, object] = {"paper_id": paper_id}
    for kind in REVIEW_ISSUES:
        row[kind] = int(kind in findings.issue_kinds)
    for kind in EDITORIAL_CONCERNS:
        row[kind] = int(kind in findings.concern_kinds)
    for column in AUXILIARY_COLUMNS:
        row[column] = getattr(findings, column)
    for verdict, count in counts.items():
        row[f"citations_{verdict}"] = count
    row["flagged"] = int(findings.flagged or counts[CitationVerdict.FAKE.value] > 0)
    notes = [f"{f.kind}: {f.rationale}" for f in findings.issues + findings.editorial_concerns]
    if findings.notes:
        notes.append(findings.notes)
    if audit is not None:
        notes.extend(f"citation {entry.verdict.value}: {entry.evidence}" for entry in audit.citations if entry.verdict != CitationVerdict.VALID)
    row["notes"] = " | ".join(notes)
    return row


def compile_oversight_report(
    rows: Iterable[Tuple[str, CriticFindings, Optional[CitationAudit]]],
    output_dir: str,
    name: str = "oversight",
) -> OversightReport:
    """flagged 행 먼저, 같은 키는 paper_id 오름차순. CSV(UTF-8, CRLF) + JSON 요약"""
    records = [_oversight_row(paper_id, findings, audit) for paper_id, findings, audit in rows]
    frame = pd.DataFrame(records, columns=list(OVERSIGHT_COLUMNS))
    if not frame.empty:
        frame = frame.sort_values(by=["flagged", "paper_id"], ascending=[False, True], kind="mergesort").reset_index(drop=True)

    os.makedirs(output_dir, exist_ok=True)
    csv_path = os.path.join(output_dir, f"{name}.csv")
    sidecar_path = os.path.join(output_dir, f"{name}.json")
    frame.to_csv(csv_path, index=False, encoding="utf-8", lineterminator="\r\n")

    totals = {column: int(frame[column].sum()) if not frame.empty else 0 for column in COUNTED_COLUMNS}
    report = OversightReport(
        csv_path=csv_path,
        sidecar_path=sidecar_path,
        row_count=len(frame),
        flagged_count=totals["flagged"],
        column_totals=totals,
    )
    with open(sidecar_path, "w", encoding="utf-8") as f:
        json.dump(report.model_dump(mode="json"), f, ensure_ascii=False, indent=2, sort_keys=True)
    review_logger.info(f"🗂️ 감독 보고서: {report.row_count}행, flagged {report.flagged_count} -> {csv_path}")
    return report
