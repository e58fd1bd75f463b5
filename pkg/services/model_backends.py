"""
Model backends
- FixtureBackend: 스크립트 기반 오프라인 백엔드 (match-key 별 순서대로 응답)
- SourceEditFixtureBackend: mock 모드용 결정적 섭동 생성기
- OpenAIResponsesBackend / AnthropicBackend: 원격 백엔드 (SDK 재시도 비활성, 재시도는 gateway 담당)
"""

import base64
import json
import re
import threading
from collections import defaultdict
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import yaml

from schemas.config import RunConfig
from schemas.gateway import (
    BackendSettings,
    FixtureEntry,
    ModelRequest,
    ModelResponse,
    TokenUsage,
    ToolTrace,
)
from services.agents.utils import review_logger
from services.exceptions import ConfigError, NonRetryable, ScriptExhausted, TransientBackendError
from services.model_gateway import DocumentStore, ModelBackend, ModelGateway


ScriptSpec = Mapping[str, Sequence[Union[FixtureEntry, Mapping[str, Any]]]]


def _fixture_error(kind: str) -> Exception:
    if kind in ("auth", "validation"):
        return NonRetryable(f"scripted {kind} failure", kind=kind)
    return TransientBackendError(f"scripted {kind} failure", kind=kind)


class FixtureBackend(ModelBackend):
    """match-key 별 스크립트 순서대로 응답. 조회 순서: '<paper_id>/<key>' -> '<key>'"""

    def __init__(self, script: ScriptSpec, backend_id: str = "fixture", context_window: int = 10**9):
        if not script:
            raise ValueError("fixture script must be non-empty")
        self.backend_id = backend_id
        self.context_window = context_window
        self._script: Dict[str, List[FixtureEntry]] = {
            key: [FixtureEntry.model_validate(entry) for entry in entries] for key, entries in script.items()
        }
        self._cursor: Dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()
        self.calls: List[ModelRequest] = []

    def _key_for(self, request: ModelRequest) -> str:
        for key in (f"{request.paper_id}/{request.match_key}", request.match_key):
            if key in self._script:
                return key
        raise ScriptExhausted(f"no scripted responses for key {request.match_key!r}")

    def calls_for(self, match_key: str) -> List[ModelRequest]:
        with self._lock:
            return [call for call in self.calls if call.match_key == match_key]

    def _next_entry(self, request: ModelRequest) -> FixtureEntry:
        with self._lock:
            self.calls.append(request)
            key = self._key_for(request)
            entries = self._script[key]
            index = self._cursor[key]
            if index >= len(entries):
                raise ScriptExhausted(f"script for {key!r} exhausted after {len(entries)} responses")
            entry = entries[index]
            if not entry.repeat:
                self._cursor[key] = index + 1
            return entry

    async def generate(self, request: ModelRequest, documents: DocumentStore) -> ModelResponse:
        entry = self._next_entry(request)
        if entry.error is not None:
            raise _fixture_error(entry.error)
        return ModelResponse(
            text=entry.text.replace("{paper_id}", request.paper_id),
            tool_traces=list(entry.tool_traces),
            token_usage=entry.token_usage,
        )


def fixture_backend(script: ScriptSpec, backend_id: str = "fixture") -> FixtureBackend:
    return FixtureBackend(script, backend_id=backend_id)


def load_fixture_script(path: str) -> Dict[str, List[Dict[str, Any]]]:
    """YAML/JSON 스크립트 파일: {responses: {match-key: [entry, ...]}} 또는 바로 매핑"""
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    script = data.get("responses", data) if isinstance(data, dict) else None
    if not isinstance(script, dict) or not script:
        raise ConfigError(f"fixture script must map match-keys to response lists: {path}")
    return script


MOCK_REVIEW = """# Title
Review of submission {paper_id}

## Synopsis
The submission proposes a method and evaluates it on standard benchmarks.

## Summary of the Review
The paper is clearly motivated; the evaluation leaves several questions open.

## Strengths
- The problem statement is precise.
- The method is described in enough detail to reimplement.

## Weaknesses
- The evaluation omits a comparison against a strong baseline.
- Some derivations skip intermediate steps.

## References
- Vaswani, A., Shazeer, N., & Parmar, N. (2017). Attention is all you need. *Advances in Neural Information Processing Systems*.
"""


def default_mock_script() -> Dict[str, List[Dict[str, Any]]]:
    """mock 실행용 기본 스크립트 (모든 키 repeat)"""
    stage_notes = {
        "story": "Story analysis for {paper_id}: the central claim is stated in the introduction.",
        "presentation": "Presentation analysis for {paper_id}: notation is mostly consistent.",
        "evaluations": "Evaluation analysis for {paper_id}: results tables were re-checked.",
        "correctness": "Correctness analysis for {paper_id}: the main derivation was verified.",
        "significance": "Significance analysis for {paper_id}: related work is adequately covered.",
        "self_critique": "Self-critique for {paper_id}: no unsupported claims found in the draft.",
    }
    script: Dict[str, List[Dict[str, Any]]] = {
        key: [{"text": text, "repeat": True}] for key, text in stage_notes.items()
    }
    for key in ("initial_review", "final_review", "baseline"):
        script[key] = [{"text": MOCK_REVIEW, "repeat": True}]
    script["critic"] = [{
        "text": json.dumps({
            "issues": [],
            "editorial_concerns": [],
            "appears_llm_written": "unsure",
            "unqualified_reviewer": "no",
            "apparent_effort": 3,
            "overall_quality": 3,
            "notes": "",
        }),
        "repeat": True,
    }]
    script["judge"] = [{
        "text": json.dumps({
            "caught": False,
            "excerpt": "",
            "justification": "The review does not mention the modified content.",
        }),
        "repeat": True,
    }]
    return script


LISTING_HEADER = re.compile(r"^=== file: (?P<path>.+) ===$")
LISTING_LINE = re.compile(r"^\s*(?P<no>\d+)\| (?P<text>.*)$")


class SourceEditFixtureBackend(ModelBackend):
    """소스 목록에서 숫자가 있는 첫 줄을 골라 숫자를 바꾸는 결정적 섭동 제안 (mock 전용)"""

    def __init__(self, backend_id: str = "generator"):
        self.backend_id = backend_id
        self.context_window = 10**9

    @staticmethod
    def _pick_line(listing: str) -> Optional[Dict[str, Any]]:
        current_file = None
        for raw in listing.splitlines():
            header = LISTING_HEADER.match(raw)
            if header:
                current_file = header.group("path")
                continue
            line = LISTING_LINE.match(raw)
            if current_file and line and re.search(r"\d", line.group("text")) and not line.group("text").lstrip().startswith("\\"):
                return {"file": current_file, "no": int(line.group("no")), "text": line.group("text")}
        return None

    async def generate(self, request: ModelRequest, documents: DocumentStore) -> ModelResponse:
        listing = "\n".join(segment.text for segment in request.segments if segment.role == "user")
        picked = self._pick_line(listing)
        proposals = []
        if picked:
            modified = re.sub(r"\d", lambda m: str((int(m.group(0)) + 1) % 10), picked["text"], count=1)
            proposals.append({
                "description": "Alters a reported number so it no longer matches the rest of the paper.",
                "target_file": picked["file"],
                "line_start": picked["no"],
                "line_end": picked["no"],
                "original_span": picked["text"] + "\n",
                "modified_span": modified + "\n",
            })
        return ModelResponse(text=json.dumps({"perturbations": proposals}))


# ============= [REMOTE BACKENDS] ==============
WEB_SEARCH_LOCATION = {"type": "approximate", "country": "US"}


class OpenAIResponsesBackend(ModelBackend):
    """OpenAI Responses API (code_interpreter, web_search_preview, reasoning effort)"""

    def __init__(self, backend_id: str, settings: BackendSettings, api_key: str, api_base: Optional[str] = None):
        from openai import AsyncOpenAI

        self.backend_id = backend_id
        self.settings = settings
        self.context_window = settings.context_window
        self.client = AsyncOpenAI(api_key=api_key, base_url=api_base, max_retries=0)

    def _tools(self, request: ModelRequest) -> List[Dict[str, Any]]:
        tools: List[Dict[str, Any]] = []
        if request.tools.code_execution:
            tools.append({"type": "code_interpreter", "container": {"type": "auto"}})
        if request.tools.web_search:
            tools.append({
                "type": "web_search_preview",
                "user_location": WEB_SEARCH_LOCATION,
                "search_context_size": "medium",
            })
        return tools

    def _input(self, request: ModelRequest, documents: DocumentStore) -> List[Dict[str, Any]]:
        attachments: List[Dict[str, Any]] = []
        for ref in request.attachments:
            payload = documents.get(ref)
            if ref.kind == "pdf":
                encoded = base64.b64encode(payload).decode("ascii")
                attachments.append({
                    "type": "input_file",
                    "filename": f"{ref.paper_id}.pdf",
                    "file_data": f"data:application/pdf;base64,{encoded}",
                })
            else:
                attachments.append({"type": "input_text", "text": f"Markdown version of the paper:\n\n{payload}"})

        messages: List[Dict[str, Any]] = []
        for segment in request.segments:
            if segment.role == "system":
                continue
            role = "assistant" if segment.role == "assistant" else "user"
            messages.append({"role": role, "content": segment.text})
        if attachments:
            messages.insert(0, {"role": "user", "content": attachments})
        return messages

    @staticmethod
    def _traces(response: Any) -> List[ToolTrace]:
        traces = []
        for item in getattr(response, "output", None) or []:
            item_type = getattr(item, "type", "")
            if item_type == "code_interpreter_call":
                outputs = getattr(item, "outputs", None) or []
                logs = "\n".join(getattr(out, "logs", "") or "" for out in outputs)
                traces.append(ToolTrace(kind="code_execution", input=getattr(item, "code", "") or "", output=logs))
            elif item_type == "web_search_call":
                action = getattr(item, "action", None)
                traces.append(ToolTrace(kind="web_search", input=str(getattr(action, "query", "") or "")))
        return traces

    async def generate(self, request: ModelRequest, documents: DocumentStore) -> ModelResponse:
        import openai

        instructions = "\n\n".join(s.text for s in request.segments if s.role == "system")
        kwargs: Dict[str, Any] = {
            "model": self.settings.model,
            "instructions": instructions or None,
            "input": self._input(request, documents),
            "reasoning": {"effort": request.effort.value},
            "max_output_tokens": request.max_output_tokens,
        }
        tools = self._tools(request)
        if tools:
            kwargs["tools"] = tools
        if self.settings.service_tier:
            kwargs["service_tier"] = self.settings.service_tier

        try:
            response = await self.client.responses.create(**kwargs)
        except openai.RateLimitError as e:
            raise TransientBackendError(str(e), kind="rate_limit") from e
        except openai.APITimeoutError as e:
            raise TransientBackendError(str(e), kind="timeout") from e
        except (openai.InternalServerError, openai.APIConnectionError) as e:
            raise TransientBackendError(str(e), kind="server") from e
        except (openai.AuthenticationError, openai.PermissionDeniedError) as e:
            raise NonRetryable(str(e), kind="auth") from e
        except openai.APIStatusError as e:
            if e.status_code >= 500:
                raise TransientBackendError(str(e), kind="server") from e
            raise NonRetryable(str(e), kind="validation") from e

        usage = getattr(response, "usage", None)
        details = getattr(usage, "output_tokens_details", None)
        return ModelResponse(
            text=response.output_text or "",
            tool_traces=self._traces(response),
            token_usage=TokenUsage(
                input=getattr(usage, "input_tokens", 0) or 0,
                output=getattr(usage, "output_tokens", 0) or 0,
                reasoning=getattr(details, "reasoning_tokens", 0) or 0,
            ),
        )


class AnthropicBackend(ModelBackend):
    """Anthropic Messages API (PDF document 블록, web search / code execution 서버 도구)"""

    THINKING_BUDGET = {"low": 2048, "medium": 8192, "high": 16384}
    CODE_EXECUTION_BETA = "code-execution-2025-05-22"

    def __init__(self, backend_id: str, settings: BackendSettings, api_key: str, api_base: Optional[str] = None):
        from anthropic import AsyncAnthropic

        self.backend_id = backend_id
        self.settings = settings
        self.context_window = settings.context_window
        self.client = AsyncAnthropic(api_key=api_key, base_url=api_base, max_retries=0)

    def _messages(self, request: ModelRequest, documents: DocumentStore) -> List[Dict[str, Any]]:
        attachments: List[Dict[str, Any]] = []
        for ref in request.attachments:
            payload = documents.get(ref)
            if ref.kind == "pdf":
                attachments.append({
                    "type": "document",
                    "source": {
                        "type": "base64",
                        "media_type": "application/pdf",
                        "data": base64.b64encode(payload).decode("ascii"),
                    },
                })
            else:
                attachments.append({"type": "text", "text": f"Markdown version of the paper:\n\n{payload}"})

        # user/assistant 교대 규칙에 맞게 연속된 같은 역할 병합
        messages: List[Dict[str, Any]] = []
        for segment in request.segments:
            if segment.role == "system":
                continue
            role = "assistant" if segment.role == "assistant" else "user"
            block = {"type": "text", "text": segment.text}
            if messages and messages[-1]["role"] == role:
                messages[-1]["content"].append(block)
            else:
                messages.append({"role": role, "content": [block]})
        if messages and messages[0]["role"] == "user":
            messages[0]["content"] = attachments + messages[0]["content"]
        else:
            messages.insert(0, {"role": "user", "content": attachments or [{"type": "text", "text": "."}]})
        return messages

    def _tools(self, request: ModelRequest) -> List[Dict[str, Any]]:
        tools: List[Dict[str, Any]] = []
        if request.tools.web_search:
            tools.append({
                "type": "web_search_20250305",
                "name": "web_search",
                "max_uses": 8,
                "user_location": WEB_SEARCH_LOCATION,
            })
        if request.tools.code_execution:
            tools.append({"type": "code_execution_20250522", "name": "code_execution"})
        return tools

    @staticmethod
    def _collect(response: Any) -> tuple:
        texts, traces = [], []
        for block in getattr(response, "content", None) or []:
            block_type = getattr(block, "type", "")
            if block_type == "text":
                texts.append(block.text)
            elif block_type == "server_tool_use":
                kind = "web_search" if getattr(block, "name", "") == "web_search" else "code_execution"
                traces.append(ToolTrace(kind=kind, input=json.dumps(getattr(block, "input", {}), default=str)))
            elif block_type.endswith("_tool_result") and traces:
                traces[-1] = traces[-1].model_copy(update={"output": str(getattr(block, "content", ""))[:4000]})
        return "".join(texts), traces

    async def generate(self, request: ModelRequest, documents: DocumentStore) -> ModelResponse:
        import anthropic

        system = "\n\n".join(s.text for s in request.segments if s.role == "system")
        kwargs: Dict[str, Any] = {
            "model": self.settings.model,
            "max_tokens": request.max_output_tokens,
            "messages": self._messages(request, documents),
        }
        if system:
            kwargs["system"] = system
        budget = self.THINKING_BUDGET[request.effort.value]
        if request.max_output_tokens > budget + 1024:
            kwargs["thinking"] = {"type": "enabled", "budget_tokens": budget}
        tools = self._tools(request)
        if tools:
            kwargs["tools"] = tools

        try:
            if request.tools.code_execution:
                response = await self.client.beta.messages.create(betas=[self.CODE_EXECUTION_BETA], **kwargs)
            else:
                response = await self.client.messages.create(**kwargs)
        except anthropic.RateLimitError as e:
            raise TransientBackendError(str(e), kind="rate_limit") from e
        except anthropic.APITimeoutError as e:
            raise TransientBackendError(str(e), kind="timeout") from e
        except (anthropic.InternalServerError, anthropic.APIConnectionError) as e:
            raise TransientBackendError(str(e), kind="server") from e
        except (anthropic.AuthenticationError, anthropic.PermissionDeniedError) as e:
            raise NonRetryable(str(e), kind="auth") from e
        except anthropic.APIStatusError as e:
            if e.status_code >= 500:
                raise TransientBackendError(str(e), kind="server") from e
            raise NonRetryable(str(e), kind="validation") from e

        text, traces = self._collect(response)
        usage = getattr(response, "usage", None)
        return ModelResponse(
            text=text,
            tool_traces=traces,
            token_usage=TokenUsage(
                input=getattr(usage, "input_tokens", 0) or 0,
                output=getattr(usage, "output_tokens", 0) or 0,
            ),
        )


def build_backend(backend_id: str, settings: BackendSettings, config: RunConfig) -> ModelBackend:
    """설정 -> 백엔드 인스턴스"""
    if settings.provider == "fixture":
        if settings.script_path:
            return FixtureBackend(load_fixture_script(settings.script_path), backend_id=backend_id)
        if backend_id == config.curation.generator_backend:
            return SourceEditFixtureBackend(backend_id=backend_id)
        return FixtureBackend(default_mock_script(), backend_id=backend_id)

    api_key = config.gateway.api_key.get_secret_value() if config.gateway.api_key else None
    if not api_key:
        raise ConfigError("MODEL_API_KEY environment variable is required")
    if settings.provider == "anthropic":
        return AnthropicBackend(backend_id, settings, api_key, config.gateway.api_base)
    return OpenAIResponsesBackend(backend_id, settings, api_key, config.gateway.api_base)


def build_gateway(config: RunConfig, sleep=None) -> ModelGateway:
    kwargs = {"policy": config.gateway.retry, "max_in_flight": config.gateway.max_in_flight, "seed": config.seed}
    if sleep is not None:
        kwargs["sleep"] = sleep
    gateway = ModelGateway(**kwargs)
    for backend_id, settings in sorted(config.gateway.backends.items()):
        gateway.register_backend(backend_id, build_backend(backend_id, settings, config))
    review_logger.info(f"🧭 gateway 준비 완료: {gateway.backend_ids} (동시 요청 상한 {config.gateway.max_in_flight})")
    return gateway
