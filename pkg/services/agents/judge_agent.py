from typing import TYPE_CHECKING, Any, Dict

from schemas.gateway import Effort, ModelRequest, PromptSegment
from schemas.specs import Perturbation
from services.agents import utils
from services.exceptions import MalformedJudgeOutput

if TYPE_CHECKING:
    from services.model_gateway import ModelGateway


class JudgeAgent:
    """리뷰가 주입된 결함을 지적했는지 판정"""

    def __init__(self):
        self.system_prompt = """
You compare a peer review against one known flaw that was deliberately inserted into the reviewed paper.
Decide whether the review identifies that specific flaw. General criticism of the same section does not count;
the review must point at the changed content or its consequence.

If it does, quote the shortest passage of the review that shows it, copied exactly.
Answer with one JSON object only:
{"caught": true or false, "excerpt": "exact quote from the review, empty when not caught", "justification": "one or two sentences"}
"""

    def build_request(self, perturbation: Perturbation, review_body: str, variant: str) -> ModelRequest:
        flaw = (
            f"Criterion: {perturbation.criterion}\n"
            f"Flaw type: {perturbation.subtype}\n"
            f"Description: {perturbation.description}\n"
            f"Original text: {perturbation.original_span}\n"
            f"Modified text: {perturbation.modified_span}"
        )
        return ModelRequest(
            segments=[
                PromptSegment(role="system", text=self.system_prompt.strip(), label="judge:instructions"),
                PromptSegment(role="user", text=flaw, label="judge:flaw"),
                PromptSegment(role="user", text=f"Review:\n{review_body}", label="judge:review"),
            ],
            effort=Effort.LOW,
            match_key="judge",
            paper_id=perturbation.perturbation_id,
        )

    @staticmethod
    def parse(raw: str) -> Dict[str, Any]:
        data = utils.extract_json_object(raw)
        if data is None or not isinstance(data.get("caught"), bool):
            raise MalformedJudgeOutput("judge output needs a boolean 'caught' field", raw=raw)
        return {
            "caught": data["caught"],
            "excerpt": utils.safe_str(data.get("excerpt")),
            "justification": utils.safe_str(data.get("justification")),
        }

    async def judge(self, perturbation: Perturbation, review_body: str, variant: str, gateway: "ModelGateway", backend_id: str = "judge") -> Dict[str, Any]:
        response = await gateway.invoke(self.build_request(perturbation, review_body, variant), backend_id)
        return self.parse(response.text)
