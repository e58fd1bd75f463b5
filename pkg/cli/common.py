"""
CLI 공통: 전역 옵션, 설정/게이트웨이 준비, 오류 -> 종료 코드, 출력
종료 코드: 0 성공, 2 입력/설정 오류, 3 백엔드 재시도 소진, 4 중단(체크포인트 보존), 5 조판 도구 없음
"""

import argparse
import asyncio
import json
import logging
import signal
import sys
from typing import Any, Callable, Dict, Optional

from schemas.config import RunConfig
from services.agents.utils import StepClock, review_logger
from services.config_service import config_digest, load_config
from services.exceptions import ReviewHarnessError
from services.model_backends import build_gateway
from services.model_gateway import ModelGateway
from services.ocr_backends import OcrBackend, TextLayerOcrBackend, build_ocr_backend
from services.prompt_registry import PromptRegistry


EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BACKEND = 3
EXIT_INTERRUPTED = 4
EXIT_TOOLCHAIN = 5


def add_global_options(parser: argparse.ArgumentParser, nested: bool = False):
    """하위 명령에도 같은 옵션. 하위 파서 기본값은 SUPPRESS 로 상위 값을 덮지 않음"""

    def default(value):
        return argparse.SUPPRESS if nested else value

    parser.add_argument("--config", default=default(None), help="YAML 설정 파일")
    parser.add_argument("--output-root", dest="output_root", default=default(None), help="모든 산출물의 루트 디렉터리")
    parser.add_argument("--seed", type=int, default=default(None))
    parser.add_argument("--mock", action="store_true", default=default(False), help="fixture 백엔드만 사용 (네트워크 없음)")
    parser.add_argument("--json", dest="json_output", action="store_true", default=default(False), help="stdout 에 JSON 출력")
    parser.add_argument("--verbose", action="store_true", default=default(False))


class CliContext:
    """명령 하나 실행 동안의 설정과 공유 객체"""

    def __init__(self, args: argparse.Namespace, overrides: Optional[Dict[str, Any]] = None):
        self.args = args
        flags: Dict[str, Any] = {
            "output_root": args.output_root,
            "seed": args.seed,
            "mock": True if args.mock else None,
        }
        flags.update(overrides or {})
        self.config: RunConfig = load_config(args.config, flags)
        self.json_output = args.json_output
        self._gateway: Optional[ModelGateway] = None
        self._registry: Optional[PromptRegistry] = None
        if args.verbose:
            review_logger.set_level(logging.DEBUG)
        review_logger.info(f"⚙️ 설정 digest {self.digest[:12]}, seed {self.config.seed}, mock={self.config.mock}")

    @property
    def digest(self) -> str:
        return config_digest(self.config)

    @property
    def gateway(self) -> ModelGateway:
        if self._gateway is None:
            self._gateway = build_gateway(self.config)
        return self._gateway

    @property
    def registry(self) -> PromptRegistry:
        if self._registry is None:
            prompts_file = self.config.pipeline.prompts_file
            self._registry = PromptRegistry.from_file(prompts_file) if prompts_file else PromptRegistry()
        return self._registry

    def ocr(self) -> OcrBackend:
        if self.config.mock and self.config.ingest.ocr_backend.startswith(("http://", "https://")):
            return TextLayerOcrBackend()
        return build_ocr_backend(self.config.ingest, self.config.gateway.retry)

    def clock_factory(self) -> Optional[Callable[[str], StepClock]]:
        """mock 실행은 결정적 시계 (같은 입력 -> 같은 산출물)"""
        if self.config.mock:
            return lambda paper_id: StepClock()
        return None

    def emit(self, payload: Dict[str, Any], text: Optional[str] = None):
        if self.json_output:
            print(json.dumps(payload, ensure_ascii=False, sort_keys=True, default=str))
        else:
            print(text if text is not None else "\n".join(f"{key}: {value}" for key, value in payload.items()))


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, ReviewHarnessError):
        return error.exit_code
    if isinstance(error, (OSError, ValueError)):
        return EXIT_INPUT
    raise error


def report_error(error: BaseException) -> int:
    code = exit_code_for(error)
    print(f"error: {error}", file=sys.stderr)
    if code == EXIT_TOOLCHAIN:
        print("hint: install a LaTeX distribution with latexmk or set SPECS_COMPILE_CMD", file=sys.stderr)
    if code == EXIT_INTERRUPTED:
        print("checkpoints were kept; rerun the same command to resume", file=sys.stderr)
    return code


def install_cancel_handlers(cancel: Callable[[], None]):
    """SIGINT/SIGTERM -> cancel (단계 경계에서 멈춤)"""
    loop = asyncio.get_running_loop()
    for signum in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(signum, cancel)
        except (NotImplementedError, RuntimeError):
            signal.signal(signum, lambda *_: cancel())
