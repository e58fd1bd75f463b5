"""
Exception hierarchy for the review harness
모듈별 예외 정의 (CLI 종료 코드, 라우터 HTTP 매핑에서 공통 사용)
"""

from typing import Any, Optional


class ReviewHarnessError(Exception):
    """모든 도메인 예외의 기반 클래스"""

    exit_code = 2

    def __init__(self, message: str = "", **context: Any):
        super().__init__(message or self.__class__.__name__)
        self.context = context

    def __getattr__(self, name: str) -> Any:
        context = self.__dict__.get("context", {})
        if name in context:
            return context[name]
        raise AttributeError(name)


class ConfigError(ReviewHarnessError):
    pass


# ============= [INGEST] ==============
class IngestError(ReviewHarnessError):
    pass


class MalformedPdf(IngestError):
    pass


class EncryptedPdf(IngestError):
    pass


class OcrUnavailable(IngestError):
    pass


class EmptyDocument(IngestError):
    pass


class IdMismatch(IngestError):
    pass


# ============= [GATEWAY] ==============
class GatewayError(ReviewHarnessError):
    exit_code = 3


class TransientBackendError(GatewayError):
    """재시도 대상 오류 (rate limit, timeout, 5xx)"""

    def __init__(self, message: str = "", kind: str = "transient", **context: Any):
        super().__init__(message, kind=kind, **context)


class NonRetryable(GatewayError):
    """인증/검증 오류 - 즉시 실패"""

    def __init__(self, message: str = "", kind: str = "validation", **context: Any):
        super().__init__(message, kind=kind, **context)


class ExhaustedRetries(GatewayError):
    def __init__(self, message: str, last_cause: Optional[BaseException] = None, attempts: int = 0):
        super().__init__(message, last_cause=last_cause, attempts=attempts)
        self.__cause__ = last_cause


class DuplicateId(GatewayError):
    exit_code = 2


class UnknownBackend(GatewayError):
    exit_code = 2


class ScriptExhausted(GatewayError):
    pass


# ============= [PIPELINE] ==============
class PipelineError(ReviewHarnessError):
    pass


class MissingPrompt(PipelineError):
    pass


class InvalidPlan(PipelineError):
    pass


class StageFailed(PipelineError):
    exit_code = 3

    def __init__(self, message: str, stage: str, paper_id: str, cause: Optional[BaseException] = None):
        super().__init__(message, stage=stage, paper_id=paper_id, cause=cause)
        self.__cause__ = cause


class PlanDigestMismatch(PipelineError):
    pass


class WrongState(PipelineError):
    pass


class Interrupted(PipelineError):
    """취소 요청으로 단계 사이에서 중단 (체크포인트 보존)"""

    exit_code = 4


# ============= [REVIEW QUALITY] ==============
class ReviewQualityError(ReviewHarnessError):
    pass


class ParseFailure(ReviewQualityError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message, raw=raw)


class ResolverUnavailable(ReviewQualityError):
    exit_code = 3


# ============= [CURATION] ==============
class CurationError(ReviewHarnessError):
    pass


class EmptyCategory(CurationError):
    pass


class MalformedProposal(CurationError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message, raw=raw)


class InsufficientVerdicts(CurationError):
    pass


class DuplicateVerdict(CurationError):
    pass


class CountMismatch(CurationError):
    pass


class ToolchainMissing(CurationError):
    exit_code = 5


# ============= [EVALUATION] ==============
class EvaluationError(ReviewHarnessError):
    pass


class MalformedJudgeOutput(EvaluationError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message, raw=raw)


class DuplicateJudgment(EvaluationError):
    pass


class IncompleteCoverage(EvaluationError):
    pass


class MismatchedSets(EvaluationError):
    pass


# ============= [SURVEY] ==============
class SurveyError(ReviewHarnessError):
    pass


class EmptyCollection(SurveyError):
    pass


class ItemMismatch(SurveyError):
    pass


class MalformedResponse(SurveyError):
    def __init__(self, message: str, row: int):
        super().__init__(message, row=row)
