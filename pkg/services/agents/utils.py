"""
Utility functions for the review harness
공통 유틸리티 함수들 (로깅, JSON 추출, 해시, 시계)
"""

import datetime
import json
import logging
import re
import threading
from typing import Any, Dict, Optional

from dateutil import parser as date_parser

from schemas.digest import canonical_json, sha256_bytes, sha256_text  # noqa: F401


SECRET_KEY_PATTERN = re.compile(r"(key|token|secret|authorization|password)", re.IGNORECASE)


def redact(context: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    """로그 컨텍스트에서 비밀 값 마스킹"""
    if not context:
        return {}
    cleaned = {}
    for key, value in context.items():
        if SECRET_KEY_PATTERN.search(str(key)):
            cleaned[key] = "***"
        elif isinstance(value, dict):
            cleaned[key] = redact(value)
        else:
            cleaned[key] = value
    return cleaned


# 파이프라인 모니터링용 로거
class ReviewLogger:
    def __init__(self, name: str = "ReviewHarness"):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(logging.INFO)

        if not self.logger.handlers:
            handler = logging.StreamHandler()
            formatter = logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
            )
            handler.setFormatter(formatter)
            self.logger.addHandler(handler)

    def set_level(self, level: int):
        self.logger.setLevel(level)

    def log_stage_start(self, paper_id: str, stage: str):
        """단계 시작 로깅"""
        self.logger.info(f"🚀 [{paper_id}] {stage} 시작")

    def log_stage_end(self, paper_id: str, stage: str, duration: float, success: bool, attempts: int = 1):
        """단계 완료 로깅"""
        status = "✅" if success else "❌"
        self.logger.info(f"{status} [{paper_id}] {stage} 완료 ({duration:.2f}초, 시도 {attempts}회)")

    def log_error(self, component: str, error: BaseException, context: Optional[Dict[str, Any]] = None):
        """에러 로깅 (비밀 값 제외)"""
        self.logger.error(f"💥 {component} 오류: {type(error).__name__}: {error} | 컨텍스트: {redact(context)}")

    def debug(self, message: str):
        self.logger.debug(message)

    def info(self, message: str):
        """일반 정보 로깅"""
        self.logger.info(message)

    def warning(self, message: str):
        """경고 로깅"""
        self.logger.warning(message)

    def error(self, message: str):
        """에러 로깅"""
        self.logger.error(message)


# 전역 로거 인스턴스
review_logger = ReviewLogger()


def extract_json_object(text: str) -> Optional[Dict[str, Any]]:
    """모델 출력에서 JSON 객체 추출 (코드 블록 제거 후 첫 {...} 블록까지 시도)"""
    candidate = (text or "").strip()
    if not candidate:
        return None

    # 코드 블록 제거
    if "```json" in candidate:
        candidate = candidate.split("```json", 1)[1].split("```", 1)[0]
    elif "```" in candidate:
        candidate = candidate.split("```", 1)[1].split("```", 1)[0]
    candidate = candidate.strip()

    try:
        parsed = json.loads(candidate)
        if isinstance(parsed, dict):
            return parsed
    except json.JSONDecodeError:
        pass

    start = candidate.find("{")
    end = candidate.rfind("}")
    if start != -1 and end > start:
        try:
            parsed = json.loads(candidate[start:end + 1])
            if isinstance(parsed, dict):
                return parsed
        except json.JSONDecodeError:
            return None
    return None


def normalize_whitespace(text: str) -> str:
    """연속 공백을 하나로"""
    return " ".join((text or "").split())


def safe_str(val: Any) -> str:
    """값을 안전하게 문자열로 변환"""
    if val is None:
        return ""
    try:
        return str(val).strip()
    except Exception:
        return ""


def utc_iso(moment: datetime.datetime) -> str:
    return moment.astimezone(datetime.timezone.utc).isoformat().replace("+00:00", "Z")


def parse_iso(value: str) -> datetime.datetime:
    return date_parser.isoparse(value)


class SystemClock:
    """실제 UTC 시계"""

    def now(self) -> datetime.datetime:
        return datetime.datetime.now(datetime.timezone.utc)


class StepClock:
    """호출마다 고정 간격으로 증가하는 결정적 시계 (mock 실행 재현용)"""

    def __init__(self, start: str = "2025-01-01T00:00:00Z", step_seconds: float = 1.0):
        self._current = parse_iso(start)
        self._step = datetime.timedelta(seconds=step_seconds)
        self._lock = threading.Lock()

    def now(self) -> datetime.datetime:
        with self._lock:
            value = self._current
            self._current = self._current + self._step
            return value
