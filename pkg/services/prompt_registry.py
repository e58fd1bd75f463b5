"""
Prompt registry
프롬프트 템플릿을 id 로 보관 (langchain-core PromptTemplate, mustache 형식) + 템플릿별 해시
실제 프롬프트 문구는 운영자 설정 파일(YAML: id -> 텍스트)로 교체
"""

import threading
from typing import Dict, Iterable, Mapping, Optional

import yaml
from langchain_core.prompts import PromptTemplate

from services.agents.utils import review_logger, sha256_text
from services.exceptions import ConfigError, MissingPrompt


SIGNIFICANCE_SCOPE_NOTE = "Only consider work published before the submission deadline."

# 기본 템플릿 (mock 실행과 테스트용)
DEFAULT_PROMPTS: Dict[str, str] = {
    "base": (
        "You are an experienced reviewer for a peer-reviewed AI venue. "
        "The submission {{{paper_id}}} is attached as a PDF and as markdown. "
        "Stay anonymous, do not speculate about author identities, and do not assign scores "
        "or accept/reject recommendations. Ground every statement in the paper."
    ),
    "story": (
        "Assess the narrative of the paper: the problem, the stated contributions, "
        "and whether the claims in the abstract and introduction are supported later on."
    ),
    "presentation": (
        "Assess the presentation: clarity of writing, consistency of notation, "
        "and whether figures and tables are readable and referenced correctly."
    ),
    "evaluations": (
        "Assess the experimental evaluation: baselines, metrics, datasets, and whether "
        "the reported numbers support the conclusions. Use the code interpreter to re-check "
        "computations from the reported tables where useful."
    ),
    "correctness": (
        "Assess technical correctness: definitions, derivations, proofs, and algorithmic claims. "
        "Use the code interpreter to verify calculations where useful."
    ),
    "significance": (
        "Assess significance and novelty relative to prior work. Use web search to position the "
        "paper in the literature. " + SIGNIFICANCE_SCOPE_NOTE
    ),
    "initial_review": (
        "Using the analyses above, write a draft review with these sections: Title, Synopsis, "
        "Summary of the Review, Strengths (bulleted), Weaknesses (bulleted), and References "
        "(bulleted, APA format) listing every work cited in the review."
    ),
    "self_critique": (
        "Reread the draft review against the paper. List any statement that is unsupported, "
        "inaccurate, or unclear, and any important issue the draft misses."
    ),
    "final_review": (
        "Revise the draft review using the self-critique. Output only the final review with the "
        "sections Title, Synopsis, Summary of the Review, Strengths, Weaknesses, and References (APA)."
    ),
    "baseline": (
        "Write a complete review of the attached paper with the sections Title, Synopsis, "
        "Summary of the Review, Strengths, Weaknesses, and References (APA)."
    ),
}


class PromptRegistry:
    """prompt_id -> PromptTemplate"""

    def __init__(self, prompts: Optional[Mapping[str, str]] = None):
        self._templates: Dict[str, PromptTemplate] = {}
        self._digests: Dict[str, str] = {}
        self._lock = threading.Lock()
        for prompt_id, text in (prompts if prompts is not None else DEFAULT_PROMPTS).items():
            self.register(prompt_id, text)

    @classmethod
    def from_file(cls, path: str, include_defaults: bool = True) -> "PromptRegistry":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read prompts file {path}: {e}") from e
        prompts = data.get("prompts", data) if isinstance(data, dict) else None
        if not isinstance(prompts, dict):
            raise ConfigError(f"prompts file must map prompt ids to text: {path}")
        merged = dict(DEFAULT_PROMPTS) if include_defaults else {}
        merged.update({str(k): str(v) for k, v in prompts.items()})
        review_logger.info(f"📝 프롬프트 {len(prompts)}개 로드: {path}")
        return cls(merged)

    def register(self, prompt_id: str, text: str):
        template = PromptTemplate.from_template(text, template_format="mustache")
        with self._lock:
            self._templates[prompt_id] = template
            self._digests[prompt_id] = sha256_text(text)

    def has(self, prompt_id: str) -> bool:
        with self._lock:
            return prompt_id in self._templates

    def render(self, prompt_id: str, **variables: str) -> str:
        with self._lock:
            template = self._templates.get(prompt_id)
        if template is None:
            raise MissingPrompt(f"prompt id not in registry: {prompt_id}")
        return template.format(**variables)

    def digest(self, prompt_id: str) -> str:
        with self._lock:
            if prompt_id not in self._digests:
                raise MissingPrompt(f"prompt id not in registry: {prompt_id}")
            return self._digests[prompt_id]

    def digests(self, prompt_ids: Iterable[str]) -> Dict[str, str]:
        return {prompt_id: self.digest(prompt_id) for prompt_id in prompt_ids}
