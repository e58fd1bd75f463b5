"""
Citation audit service
리뷰 References 항목을 APA 형식으로 파싱하고 서지 인덱스에서 찾아 valid / unsure / fake 판정

판정 규칙 (confidence = 제목 유사도 0.8 + 저자 성 일치율 0.2)
- confidence >= valid_threshold: valid (단, 발표처가 다르면 fake "venue mismatch")
- fake_threshold <= confidence < valid_threshold: unsure
- confidence < fake_threshold: fake (일치 기록 없음)
"""

import json
import re
from abc import ABC, abstractmethod
from typing import Dict, Iterable, List, Optional

import requests
from rapidfuzz import fuzz
from unidecode import unidecode

from schemas.gateway import RetryPolicy
from schemas.review import BibRecord, CitationAudit, CitationEntry, CitationVerdict, ParsedCitation, ResolverMatch, Review
from services.agents.utils import normalize_whitespace, review_logger
from services.exceptions import ExhaustedRetries, ResolverUnavailable, TransientBackendError
from services.model_gateway import call_with_retries


TITLE_WEIGHT = 0.8
AUTHOR_WEIGHT = 0.2
VENUE_MATCH_MIN = 60  # rapidfuzz partial_ratio

APA_PATTERN = re.compile(
    r"^(?P<authors>.+?)\s*\((?P<year>\d{4}[a-z]?|n\.d\.)\)\.?\s*(?P<title>.+?[.?!])\s+(?P<venue>.+)$"
)
AUTHOR_PATTERN = re.compile(r"([^,&]+?),\s*((?:[A-Z][a-z]?\.\s*-?\s*)+)")
LEADING_MARKER = re.compile(r"^\s*(?:[-*•]\s+|\[\d+\]\s*|\d+[.)]\s+)")


# ============= [NORMALIZATION] ==============
def normalize_title(title: str) -> str:
    text = unidecode(title or "").lower()
    text = re.sub(r"[^a-z0-9\s]", " ", text)
    return normalize_whitespace(text)


def normalize_surname(name: str) -> str:
    surname = (name or "").split(",")[0]
    return re.sub(r"[^a-z]", "", unidecode(surname).lower())


def title_similarity(a: str, b: str) -> float:
    return fuzz.ratio(normalize_title(a), normalize_title(b)) / 100.0


def author_overlap(cited: Iterable[str], record: Iterable[str]) -> float:
    """인용 측 저자 성 중 기록에 있는 비율"""
    cited_names = {normalize_surname(name) for name in cited} - {""}
    record_names = {normalize_surname(name) for name in record} - {""}
    if not cited_names or not record_names:
        return 0.0
    return len(cited_names & record_names) / len(cited_names)


def venue_matches(cited: str, record: str) -> bool:
    if not cited.strip() or not record.strip():
        return True
    return fuzz.partial_ratio(normalize_title(cited), normalize_title(record)) >= VENUE_MATCH_MIN


# ============= [APA PARSING] ==============
def parse_apa_citation(text: str) -> Optional[ParsedCitation]:
    """관대한 APA 파서: 저자 (연도). 제목. 발표처. 형식이 아니면 None"""
    raw = LEADING_MARKER.sub("", normalize_whitespace(text))
    match = APA_PATTERN.match(raw)
    if not match:
        return None

    author_text = re.sub(r"\bet al\.?", "", match.group("authors")).replace("&", ",")
    author_text = re.sub(r",\s*,", ",", author_text)
    authors = [f"{surname.strip()}, {initials.strip()}" for surname, initials in AUTHOR_PATTERN.findall(author_text + " ")]
    if not authors:
        authors = [part.strip() for part in author_text.split(",") if part.strip()]
    title = match.group("title").strip().rstrip(".").replace("*", "").strip()
    venue = re.split(r",\s*\d", match.group("venue"))[0].replace("*", "").strip(" .")
    if not authors or not title:
        return None
    return ParsedCitation(authors=authors, year=match.group("year"), title=title, venue=venue)


# ============= [RESOLVERS] ==============
class CitationResolver(ABC):
    """후보 서지 기록 조회. 여러 작업자가 동시에 사용"""

    name = "resolver"

    @abstractmethod
    def candidates(self, citation: ParsedCitation) -> List[BibRecord]:
        """조회 불가 시 ResolverUnavailable"""

    def resolve(self, citation: ParsedCitation) -> ResolverMatch:
        best: Optional[BibRecord] = None
        best_score = 0.0
        for record in self.candidates(citation):
            score = TITLE_WEIGHT * title_similarity(citation.title, record.title)
            score += AUTHOR_WEIGHT * author_overlap(citation.authors, record.authors)
            if score > best_score:
                best, best_score = record, score
        return ResolverMatch(record=best, confidence=round(best_score, 4), reason=self.name)


class OfflineIndexResolver(CitationResolver):
    """JSONL 인덱스 (한 줄에 {authors, title, venue, year})"""

    name = "offline-index"

    def __init__(self, records: Iterable[BibRecord]):
        self.records = list(records)

    @classmethod
    def from_file(cls, path: str) -> "OfflineIndexResolver":
        records = []
        try:
            with open(path, "r", encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        records.append(BibRecord.model_validate(json.loads(line)))
        except OSError as e:
            raise ResolverUnavailable(f"citation index not readable: {path}") from e
        review_logger.info(f"📚 인용 인덱스 로드: {len(records)}건 ({path})")
        return cls(records)

    def candidates(self, citation: ParsedCitation) -> List[BibRecord]:
        return self.records


class CrossrefResolver(CitationResolver):
    """Crossref works API 제목 검색"""

    name = "crossref"

    def __init__(
        self,
        base_url: str = "https://api.crossref.org",
        mailto: Optional[str] = None,
        rows: int = 5,
        timeout: float = 15.0,
        policy: Optional[RetryPolicy] = None,
        session: Optional[requests.Session] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.mailto = mailto
        self.rows = rows
        self.timeout = timeout
        self.policy = policy or RetryPolicy()
        self.session = session or requests.Session()

    @staticmethod
    def _to_record(item: Dict) -> BibRecord:
        authors = [f"{a.get('family', '')}, {a.get('given', '')}".strip(", ") for a in item.get("author", [])]
        date_parts = (item.get("issued") or {}).get("date-parts") or [[None]]
        year = date_parts[0][0] if date_parts and date_parts[0] else None
        return BibRecord(
            authors=authors,
            title=(item.get("title") or [""])[0],
            venue=(item.get("container-title") or [""])[0],
            year=str(year) if year else None,
        )

    def _query(self, citation: ParsedCitation) -> List[BibRecord]:
        params = {"query.bibliographic": f"{citation.title} {' '.join(citation.authors)}", "rows": self.rows}
        if self.mailto:
            params["mailto"] = self.mailto
        try:
            response = self.session.get(f"{self.base_url}/works", params=params, timeout=self.timeout)
        except (requests.Timeout, requests.ConnectionError) as e:
            raise TransientBackendError(str(e), kind="timeout") from e
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"crossref returned {response.status_code}", kind="server")
        if response.status_code != 200:
            raise ResolverUnavailable(f"crossref returned {response.status_code}")
        items = response.json().get("message", {}).get("items", [])
        return [self._to_record(item) for item in items]

    def candidates(self, citation: ParsedCitation) -> List[BibRecord]:
        try:
            return call_with_retries(lambda: self._query(citation), self.policy, "Crossref")
        except ExhaustedRetries as e:
            raise ResolverUnavailable("crossref unreachable after retries") from e


# ============= [AUDIT] ==============
def judge_citation(
    raw: str,
    resolver: CitationResolver,
    valid_threshold: float = 0.90,
    fake_threshold: float = 0.60,
) -> CitationEntry:
    parsed = parse_apa_citation(raw)
    if parsed is None:
        return CitationEntry(raw=raw, verdict=CitationVerdict.UNSURE, evidence="not parseable as an APA citation")

    match = resolver.resolve(parsed)
    if match.record is None or match.confidence < fake_threshold:
        return CitationEntry(raw=raw, parsed=parsed, verdict=CitationVerdict.FAKE,
                             evidence=f"no matching record (confidence {match.confidence:.2f})")
    if match.confidence < valid_threshold:
        return CitationEntry(raw=raw, parsed=parsed, verdict=CitationVerdict.UNSURE, matched=match.record,
                             evidence=f"partial match (confidence {match.confidence:.2f}): {match.record.title}")
    if not venue_matches(parsed.venue, match.record.venue):
        return CitationEntry(raw=raw, parsed=parsed, verdict=CitationVerdict.FAKE, matched=match.record,
                             evidence=f"venue mismatch: cited {parsed.venue!r}, record {match.record.venue!r}")
    return CitationEntry(raw=raw, parsed=parsed, verdict=CitationVerdict.VALID, matched=match.record,
                         evidence=f"matched {match.record.title} ({match.record.venue}, {match.record.year})")


def audit_citations(
    review: Review,
    resolver: CitationResolver,
    valid_threshold: float = 0.90,
    fake_threshold: float = 0.60,
) -> CitationAudit:
    """References 항목마다 정확히 하나의 판정"""
    entries = [judge_citation(raw, resolver, valid_threshold, fake_threshold) for raw in review.sections.references]
    audit = CitationAudit(paper_id=review.paper_id, citations=entries)
    review_logger.info(f"📑 [{review.paper_id}] 인용 검증: {audit.counts()}")
    return audit


def audit_summary(audits: Iterable[CitationAudit]) -> Dict[str, int]:
    totals = {verdict.value: 0 for verdict in CitationVerdict}
    for audit in audits:
        for verdict, count in audit.counts().items():
            totals[verdict] += count
    totals["total"] = sum(totals[verdict.value] for verdict in CitationVerdict)
    return totals
