"""
Source indexes for SPECS curation
- LocalSourceIndex: index.jsonl (한 줄에 SourceRecord) + 소스 디렉터리
- ArxivSourceIndex: arXiv export API 제목 검색 + e-print 소스 다운로드
"""

import gzip
import io
import json
import os
import shutil
import tarfile
from abc import ABC, abstractmethod
from typing import Dict, List, Optional

import requests
import xmltodict

from schemas.gateway import RetryPolicy
from schemas.specs import SourceRecord
from services.agents.utils import normalize_whitespace, review_logger
from services.citation_service import normalize_title
from services.exceptions import CurationError, ExhaustedRetries, TransientBackendError
from services.model_gateway import call_with_retries


class SourceIndex(ABC):
    @abstractmethod
    def search(self, title: str) -> List[SourceRecord]:
        """제목 후보 검색"""

    @abstractmethod
    def fetch_source(self, record: SourceRecord, destination: str) -> str:
        """소스 트리를 destination 에 준비하고 경로 반환"""


class LocalSourceIndex(SourceIndex):
    def __init__(self, index_path: str):
        self.index_path = index_path
        self.base_dir = os.path.dirname(os.path.abspath(index_path))
        self._by_title: Dict[str, List[SourceRecord]] = {}
        with open(index_path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    record = SourceRecord.model_validate(json.loads(line))
                    self._by_title.setdefault(normalize_title(record.title), []).append(record)

    def search(self, title: str) -> List[SourceRecord]:
        return list(self._by_title.get(normalize_title(title), []))

    def fetch_source(self, record: SourceRecord, destination: str) -> str:
        if not record.source_path:
            raise CurationError(f"{record.source_id}: no source directory in index")
        source = os.path.join(self.base_dir, record.source_path)
        if os.path.exists(destination):
            return destination
        shutil.copytree(source, destination)
        return destination


class ArxivSourceIndex(SourceIndex):
    """http://export.arxiv.org/api/query (Atom) + https://arxiv.org/e-print/<id>"""

    def __init__(
        self,
        api_url: str = "http://export.arxiv.org/api/query",
        eprint_url: str = "https://arxiv.org/e-print",
        max_results: int = 5,
        timeout: float = 30.0,
        policy: Optional[RetryPolicy] = None,
        session: Optional[requests.Session] = None,
    ):
        self.api_url = api_url
        self.eprint_url = eprint_url.rstrip("/")
        self.max_results = max_results
        self.timeout = timeout
        self.policy = policy or RetryPolicy()
        self.session = session or requests.Session()

    def _get(self, url: str, **kwargs) -> requests.Response:
        try:
            response = self.session.get(url, timeout=self.timeout, **kwargs)
        except (requests.Timeout, requests.ConnectionError) as e:
            raise TransientBackendError(str(e), kind="timeout") from e
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"arXiv returned {response.status_code}", kind="server")
        if response.status_code != 200:
            raise CurationError(f"arXiv returned {response.status_code} for {url}")
        return response

    @staticmethod
    def parse_feed(xml_text: str) -> List[SourceRecord]:
        feed = xmltodict.parse(xml_text).get("feed", {})
        entries = feed.get("entry") or []
        if isinstance(entries, dict):
            entries = [entries]
        records = []
        for entry in entries:
            authors = entry.get("author") or []
            if isinstance(authors, dict):
                authors = [authors]
            source_id = str(entry.get("id", "")).rsplit("/abs/", 1)[-1]
            records.append(SourceRecord(
                source_id=source_id,
                title=normalize_whitespace(str(entry.get("title", ""))),
                authors=[normalize_whitespace(str(author.get("name", ""))) for author in authors],
            ))
        return records

    def search(self, title: str) -> List[SourceRecord]:
        query = f'ti:"{normalize_whitespace(title)}"'
        params = {"search_query": query, "start": 0, "max_results": self.max_results}
        try:
            response = call_with_retries(lambda: self._get(self.api_url, params=params), self.policy, "arXiv")
        except ExhaustedRetries as e:
            raise CurationError("arXiv API unreachable after retries") from e
        return self.parse_feed(response.text)

    def fetch_source(self, record: SourceRecord, destination: str) -> str:
        url = f"{self.eprint_url}/{record.source_id}"
        try:
            response = call_with_retries(lambda: self._get(url), self.policy, "arXiv e-print")
        except ExhaustedRetries as e:
            raise CurationError(f"e-print download failed: {record.source_id}") from e
        os.makedirs(destination, exist_ok=True)
        try:
            with tarfile.open(fileobj=io.BytesIO(response.content), mode="r:*") as archive:
                archive.extractall(destination, filter="data")
        except tarfile.TarError:
            # 단일 .tex 파일 (gzip 또는 평문)로 제공되는 경우
            content = response.content
            if content[:2] == b"\x1f\x8b":
                content = gzip.decompress(content)
            with open(os.path.join(destination, "main.tex"), "wb") as f:
                f.write(content)
        review_logger.info(f"📥 e-print 소스 준비: {record.source_id} -> {destination}")
        return destination
