"""
LLM agents for the review harness
리뷰 품질 검사, 섭동 판정, 섭동 생성 에이전트
"""

from . import utils
from .utils import review_logger, ReviewLogger, extract_json_object, redact
from .critic_agent import CriticAgent
from .judge_agent import JudgeAgent
from .perturbation_agent import PerturbationAgent

__all__ = [
    "utils",
    "CriticAgent",
    "JudgeAgent",
    "PerturbationAgent",
    "review_logger",
    "ReviewLogger",
    "extract_json_object",
    "redact",
]
