"""
Model Gateway
재시도 / 동시성 제한 / 백엔드 레지스트리를 갖춘 텍스트 생성 백엔드 공통 진입점

- 일시적 오류(rate limit, timeout, 5xx)는 RetryPolicy 에 따라 지수 백오프 재시도
- 인증/검증 오류는 NonRetryable 로 즉시 실패
- 프로세스 전역 ConcurrencyLimiter 가 모든 백엔드 호출을 감쌈
- 컨텍스트 창 초과 요청은 잘라내지 않고 거부 (잘라내기는 stage engine 담당)
"""

import asyncio
import random
import threading
import time
from abc import ABC, abstractmethod
from typing import Awaitable, Callable, Dict, List, Optional, Tuple, TypeVar, Union

from schemas.gateway import DocumentRef, ModelRequest, ModelResponse, RetryPolicy
from schemas.paper import PaperBundle
from services.agents.utils import review_logger, sha256_bytes, sha256_text
from services.exceptions import (
    DuplicateId,
    ExhaustedRetries,
    NonRetryable,
    TransientBackendError,
    UnknownBackend,
)


CHARS_PER_TOKEN = 4
PDF_PAGE_TOKEN_ESTIMATE = 1500

T = TypeVar("T")


class DocumentStore:
    """실행 중 등록된 첨부 문서 (pdf bytes / markdown text)"""

    def __init__(self):
        self._documents: Dict[Tuple[str, str], Tuple[str, Union[bytes, str], int]] = {}
        self._lock = threading.Lock()

    def register_bundle(self, bundle: PaperBundle) -> List[DocumentRef]:
        refs = []
        with self._lock:
            pdf_digest = sha256_bytes(bundle.pdf.content)
            self._documents[("pdf", bundle.paper_id)] = (pdf_digest, bundle.pdf.content, bundle.pdf.page_count)
            refs.append(DocumentRef(kind="pdf", paper_id=bundle.paper_id, digest=pdf_digest))
            if bundle.markdown is not None:
                md_digest = sha256_text(bundle.markdown.text)
                self._documents[("markdown", bundle.paper_id)] = (md_digest, bundle.markdown.text, 0)
                refs.append(DocumentRef(kind="markdown", paper_id=bundle.paper_id, digest=md_digest))
        return refs

    def is_registered(self, ref: DocumentRef) -> bool:
        with self._lock:
            entry = self._documents.get((ref.kind, ref.paper_id))
        return entry is not None and entry[0] == ref.digest

    def get(self, ref: DocumentRef) -> Union[bytes, str]:
        with self._lock:
            entry = self._documents.get((ref.kind, ref.paper_id))
        if entry is None or entry[0] != ref.digest:
            raise NonRetryable(f"attachment not registered in this run: {ref.kind}:{ref.paper_id}")
        return entry[1]

    def estimate_tokens(self, ref: DocumentRef) -> int:
        with self._lock:
            entry = self._documents.get((ref.kind, ref.paper_id))
        if entry is None:
            return 0
        if ref.kind == "pdf":
            return entry[2] * PDF_PAGE_TOKEN_ESTIMATE
        return len(entry[1]) // CHARS_PER_TOKEN


def estimate_tokens(request: ModelRequest, documents: Optional[DocumentStore] = None) -> int:
    """chars/4 근사 + 첨부 문서 추정치"""
    total = sum(len(segment.text) for segment in request.segments) // CHARS_PER_TOKEN
    if documents is not None:
        total += sum(documents.estimate_tokens(ref) for ref in request.attachments)
    return total


class ModelBackend(ABC):
    """텍스트 생성 백엔드 인터페이스"""

    backend_id: str = "backend"
    context_window: int = 400_000

    @abstractmethod
    async def generate(self, request: ModelRequest, documents: DocumentStore) -> ModelResponse:
        """한 번의 시도. 일시적 오류는 TransientBackendError, 그 외는 NonRetryable"""


class ConcurrencyLimiter:
    """프로세스 전역 in-flight 요청 상한 (이벤트 루프별 세마포어)"""

    def __init__(self, max_in_flight: int):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.max_in_flight = max_in_flight
        self._semaphores: Dict[int, asyncio.Semaphore] = {}
        self._lock = threading.Lock()
        self._in_flight = 0
        self.peak_in_flight = 0

    def _semaphore(self) -> asyncio.Semaphore:
        loop_id = id(asyncio.get_running_loop())
        with self._lock:
            if loop_id not in self._semaphores:
                self._semaphores[loop_id] = asyncio.Semaphore(self.max_in_flight)
            return self._semaphores[loop_id]

    async def __aenter__(self):
        await self._semaphore().acquire()
        with self._lock:
            self._in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self._in_flight)
        return self

    async def __aexit__(self, exc_type, exc, tb):
        with self._lock:
            self._in_flight -= 1
        self._semaphore().release()
        return False


class ModelGateway:
    """백엔드 레지스트리 + 재시도 호출"""

    def __init__(
        self,
        policy: Optional[RetryPolicy] = None,
        max_in_flight: int = 8,
        sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
        seed: int = 0,
        documents: Optional[DocumentStore] = None,
    ):
        self.policy = policy or RetryPolicy()
        self.limiter = ConcurrencyLimiter(max_in_flight)
        self.documents = documents or DocumentStore()
        self._backends: Dict[str, ModelBackend] = {}
        self._registry_lock = threading.Lock()
        self._sleep = sleep
        self._rng = random.Random(seed)

    # ---------- registry ----------
    def register_backend(self, backend_id: str, backend: ModelBackend) -> "ModelGateway":
        with self._registry_lock:
            if backend_id in self._backends:
                raise DuplicateId(f"backend id already registered: {backend_id}")
            self._backends[backend_id] = backend
        review_logger.info(f"🔌 백엔드 등록: {backend_id} ({type(backend).__name__})")
        return self

    def resolve(self, backend_id: str) -> ModelBackend:
        with self._registry_lock:
            backend = self._backends.get(backend_id)
        if backend is None:
            raise UnknownBackend(f"unknown backend id: {backend_id}")
        return backend

    @property
    def backend_ids(self) -> List[str]:
        with self._registry_lock:
            return sorted(self._backends)

    # ---------- invoke ----------
    def _validate(self, request: ModelRequest, backend: ModelBackend):
        for ref in request.attachments:
            if not self.documents.is_registered(ref):
                raise NonRetryable(f"attachment not registered in this run: {ref.kind}:{ref.paper_id}")
        estimated = estimate_tokens(request, self.documents)
        if estimated > backend.context_window:
            raise NonRetryable(
                f"request needs ~{estimated} tokens, backend window is {backend.context_window}",
                kind="context_overflow",
                estimated_tokens=estimated,
            )

    async def invoke(
        self,
        request: ModelRequest,
        backend: Union[str, ModelBackend],
        policy: Optional[RetryPolicy] = None,
    ) -> ModelResponse:
        backend_obj = self.resolve(backend) if isinstance(backend, str) else backend
        backend_id = backend if isinstance(backend, str) else backend_obj.backend_id
        policy = policy or self.policy
        self._validate(request, backend_obj)

        delays: List[float] = []
        last_error: Optional[TransientBackendError] = None
        for attempt in range(1, policy.max_retries + 2):
            try:
                async with self.limiter:
                    response = await backend_obj.generate(request, self.documents)
            except NonRetryable as e:
                review_logger.log_error("ModelGateway", e, {"backend": backend_id, "key": request.match_key, "attempt": attempt})
                raise
            except TransientBackendError as e:
                last_error = e
                if attempt > policy.max_retries:
                    break
                delay = policy.delay(attempt - 1, self._rng)
                delays.append(delay)
                review_logger.warning(
                    f"⏳ {backend_id} 일시 오류 ({e.kind}) - {delay:.2f}초 후 재시도 ({attempt}/{policy.max_retries})"
                )
                await self._sleep(delay)
                continue
            return response.model_copy(update={"attempts": attempt, "delays": delays, "backend_id": backend_id})

        raise ExhaustedRetries(
            f"{backend_id} failed after {policy.max_retries + 1} attempts: {last_error}",
            last_cause=last_error,
            attempts=policy.max_retries + 1,
        )


def call_with_retries(
    fn: Callable[[], T],
    policy: RetryPolicy,
    component: str,
    sleep: Callable[[float], None] = time.sleep,
    rng: Optional[random.Random] = None,
) -> T:
    """동기 버전 재시도 (OCR, 인용 검증, 원격 소스 조회)"""
    last_error: Optional[TransientBackendError] = None
    for attempt in range(1, policy.max_retries + 2):
        try:
            return fn()
        except TransientBackendError as e:
            last_error = e
            if attempt > policy.max_retries:
                break
            delay = policy.delay(attempt - 1, rng)
            review_logger.warning(f"⏳ {component} 일시 오류 - {delay:.2f}초 후 재시도 ({attempt}/{policy.max_retries})")
            sleep(delay)
    raise ExhaustedRetries(
        f"{component} failed after {policy.max_retries + 1} attempts: {last_error}",
        last_cause=last_error,
        attempts=policy.max_retries + 1,
    )
