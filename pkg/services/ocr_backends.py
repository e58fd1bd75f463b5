"""
OCR backends for PDF -> markdown conversion
- FixtureOcrBackend: 페이지별 스크립트 출력 (테스트)
- TextLayerOcrBackend: PDF 텍스트 레이어 기반, 오프라인 결정적 (mock 모드)
- RemoteOcrBackend: 페이지 PNG 를 HTTP 엔드포인트로 전송해 markdown 수신
"""

import threading
from abc import ABC, abstractmethod
from typing import Mapping, Optional, Sequence, Union

import fitz
import requests
import yaml

from schemas.config import IngestSettings
from schemas.gateway import RetryPolicy
from schemas.paper import NormalizedPdf
from services.agents.utils import review_logger
from services.exceptions import ExhaustedRetries, OcrUnavailable, TransientBackendError
from services.model_gateway import call_with_retries


class OcrBackend(ABC):
    """동시 작업자 간 공유 가능해야 함"""

    engine_id: str = "ocr"

    @abstractmethod
    def convert_page(self, pdf: NormalizedPdf, page_index: int) -> str:
        """한 페이지를 markdown 으로. 백엔드 접근 불가 시 OcrUnavailable"""


class FixtureOcrBackend(OcrBackend):
    def __init__(
        self,
        pages: Union[Sequence[str], Mapping[int, str], None] = None,
        engine_id: str = "fixture-ocr",
        unavailable: bool = False,
    ):
        if isinstance(pages, Mapping):
            self._pages = dict(pages)
        else:
            self._pages = dict(enumerate(pages or []))
        self.engine_id = engine_id
        self.unavailable = unavailable
        self._lock = threading.Lock()
        self.calls = []

    def convert_page(self, pdf: NormalizedPdf, page_index: int) -> str:
        with self._lock:
            self.calls.append((pdf.paper_id, page_index))
        if self.unavailable:
            raise OcrUnavailable(f"{self.engine_id} is unavailable")
        return self._pages.get(page_index, "")


class TextLayerOcrBackend(OcrBackend):
    engine_id = "pymupdf-text-layer"

    def convert_page(self, pdf: NormalizedPdf, page_index: int) -> str:
        with fitz.open(stream=pdf.content, filetype="pdf") as doc:
            return doc[page_index].get_text("text").strip()


class RemoteOcrBackend(OcrBackend):
    """POST {endpoint} multipart(file=page.png, page=index) -> {"markdown": "..."}"""

    def __init__(
        self,
        endpoint: str,
        timeout: float = 120.0,
        policy: Optional[RetryPolicy] = None,
        engine_id: Optional[str] = None,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint
        self.timeout = timeout
        self.policy = policy or RetryPolicy()
        self.engine_id = engine_id or f"remote:{endpoint}"
        self.session = session or requests.Session()

    @staticmethod
    def _render_png(pdf: NormalizedPdf, page_index: int) -> bytes:
        with fitz.open(stream=pdf.content, filetype="pdf") as doc:
            pix = doc[page_index].get_pixmap(dpi=pdf.image_dpi)
            return pix.tobytes("png")

    def _post(self, png: bytes, page_index: int) -> str:
        try:
            response = self.session.post(
                self.endpoint,
                files={"file": ("page.png", png, "image/png")},
                data={"page": str(page_index)},
                timeout=self.timeout,
            )
        except (requests.Timeout, requests.ConnectionError) as e:
            raise TransientBackendError(str(e), kind="timeout") from e
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"OCR endpoint returned {response.status_code}", kind="server")
        if response.status_code >= 400:
            raise OcrUnavailable(f"OCR endpoint rejected page {page_index}: {response.status_code}")
        try:
            return str(response.json().get("markdown", ""))
        except ValueError as e:
            raise OcrUnavailable(f"OCR endpoint returned non-JSON for page {page_index}") from e

    def convert_page(self, pdf: NormalizedPdf, page_index: int) -> str:
        png = self._render_png(pdf, page_index)
        try:
            return call_with_retries(lambda: self._post(png, page_index), self.policy, f"OCR[{self.engine_id}]")
        except ExhaustedRetries as e:
            raise OcrUnavailable(f"OCR endpoint unreachable after retries: {self.endpoint}") from e


def build_ocr_backend(settings: IngestSettings, policy: Optional[RetryPolicy] = None) -> OcrBackend:
    backend = settings.ocr_backend
    if backend.startswith(("http://", "https://")):
        return RemoteOcrBackend(backend, timeout=settings.ocr_timeout, policy=policy)
    if backend == "fixture":
        pages = []
        if settings.ocr_script:
            with open(settings.ocr_script, "r", encoding="utf-8") as f:
                pages = yaml.safe_load(f) or []
        return FixtureOcrBackend(pages)
    if backend == "text-layer":
        return TextLayerOcrBackend()
    review_logger.warning(f"⚠️ 알 수 없는 OCR 백엔드 '{backend}' - text-layer 사용")
    return TextLayerOcrBackend()
