from typing import TYPE_CHECKING, Sequence

from pydantic import ValidationError

from schemas.gateway import Effort, ModelRequest, PromptSegment
from schemas.review import CriticFindings, Review
from services.agents import utils
from services.exceptions import ParseFailure

if TYPE_CHECKING:
    from services.model_gateway import ModelGateway


class CriticAgent:
    """완성된 리뷰 텍스트만 보고 품질 문제를 표시하는 에이전트 (논문, 생성 프롬프트는 전달하지 않음)"""

    def __init__(self, rating_scale: Sequence[int] = (1, 2, 3, 4, 5)):
        self.rating_scale = list(rating_scale)
        low, high = min(self.rating_scale), max(self.rating_scale)
        self.system_prompt = f"""
You check peer reviews written for an AI conference before they are released to authors.
You only see the review text.

Report review issues, using only these kinds:
- identity_reveal: the review reveals or speculates about author identities
- offensive_content: the review contains rude, demeaning or offensive language
- bias_concern: the review shows bias for or against a group, institution or region
- missing_structure: the review lacks a title, synopsis, summary, strengths, weaknesses or references section

Report editorial concerns, using only these kinds:
- ethical_concern: the review raises an ethics problem that program chairs should see
- author_identity_in_paper: the review indicates the paper itself reveals its authors
- policy_violation: the review suggests the submission breaks venue policy

Every reported item needs a short rationale quoting or pointing to the review text.
Also answer:
- appears_llm_written: yes / no / unsure
- unqualified_reviewer: yes / no / unsure, whether the review reads as written by someone lacking expertise
- apparent_effort: integer {low}-{high}
- overall_quality: integer {low}-{high}

Answer with one JSON object only:
{{"issues": [{{"kind": "...", "rationale": "..."}}], "editorial_concerns": [...],
"appears_llm_written": "...", "unqualified_reviewer": "...", "apparent_effort": 0, "overall_quality": 0, "notes": "..."}}
"""

    def build_request(self, review: Review) -> ModelRequest:
        return ModelRequest(
            segments=[
                PromptSegment(role="system", text=self.system_prompt.strip(), label="critic:instructions"),
                PromptSegment(role="user", text=review.body, label="critic:review"),
            ],
            effort=Effort.LOW,
            match_key="critic",
            paper_id=review.paper_id,
        )

    def parse(self, raw: str) -> CriticFindings:
        data = utils.extract_json_object(raw)
        if data is None:
            raise ParseFailure("critic output is not a JSON object", raw=raw)
        try:
            findings = CriticFindings.model_validate(data)
        except ValidationError as e:
            raise ParseFailure(f"critic output outside the taxonomy: {e.errors()[0]['msg']}", raw=raw) from e
        for name in ("apparent_effort", "overall_quality"):
            value = getattr(findings, name)
            if value not in self.rating_scale:
                raise ParseFailure(f"{name}={value} is outside the rating scale {self.rating_scale}", raw=raw)
        return findings

    async def critique(self, review: Review, gateway: "ModelGateway", backend_id: str = "critic") -> CriticFindings:
        if not review.body.strip():
            raise ParseFailure("cannot critique an empty review", raw="")
        response = await gateway.invoke(self.build_request(review), backend_id)
        findings = self.parse(response.text)
        utils.review_logger.info(
            f"🔎 [{review.paper_id}] critic: issues={findings.issue_kinds} concerns={findings.concern_kinds}"
        )
        return findings
