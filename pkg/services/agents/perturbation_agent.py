from typing import TYPE_CHECKING, List

from pydantic import ValidationError

from schemas.gateway import Effort, ModelRequest, PromptSegment
from schemas.specs import PerturbationProposal
from services.agents import utils
from services.exceptions import MalformedProposal

if TYPE_CHECKING:
    from services.model_gateway import ModelGateway


class PerturbationAgent:
    """LaTeX 소스를 보고 특정 기준의 결함을 넣는 수정을 제안"""

    def __init__(self):
        self.system_prompt = """
You edit the LaTeX source of a research paper to insert exactly one realistic flaw of the requested type.
The flaw must be something a careful reviewer could detect from the compiled paper alone.
Keep the edit small and local, keep the source compilable, and do not add comments that reveal the edit.

The source is given as a listing: a header line "=== file: <path> ===" followed by numbered lines "  <n>| <text>".
Answer with one JSON object only:
{"perturbations": [{"description": "...", "target_file": "<path>", "line_start": <n>, "line_end": <n>,
"original_span": "exact text of lines line_start..line_end", "modified_span": "replacement text"}]}
Both spans end every line with "\\n", exactly as in the source file.
"""

    def build_request(self, paper_id: str, listing: str, criterion: str, subtype: str) -> ModelRequest:
        task = f"Criterion: {criterion}\nFlaw type: {subtype.replace('_', ' ')}\n\n{listing}"
        return ModelRequest(
            segments=[
                PromptSegment(role="system", text=self.system_prompt.strip(), label="generator:instructions"),
                PromptSegment(role="user", text=task, label="generator:source"),
            ],
            effort=Effort.HIGH,
            match_key=f"generate:{criterion}",
            paper_id=paper_id,
        )

    @staticmethod
    def parse(raw: str, criterion: str, subtype: str) -> List[PerturbationProposal]:
        data = utils.extract_json_object(raw)
        if data is None or not isinstance(data.get("perturbations"), list):
            raise MalformedProposal("generator output needs a 'perturbations' list", raw=raw)
        proposals = []
        for item in data["perturbations"]:
            if not isinstance(item, dict):
                raise MalformedProposal("perturbation entries must be objects", raw=raw)
            try:
                proposals.append(PerturbationProposal(
                    criterion=criterion,
                    subtype=subtype,
                    description=utils.safe_str(item.get("description")),
                    target_file=utils.safe_str(item.get("target_file")),
                    line_range=(int(item.get("line_start", 0)), int(item.get("line_end", 0))),
                    original_span=str(item.get("original_span", "")),
                    modified_span=str(item.get("modified_span", "")),
                ))
            except (ValidationError, TypeError, ValueError) as e:
                raise MalformedProposal(f"invalid perturbation entry: {e}", raw=raw) from e
        return proposals

    async def propose(self, paper_id: str, listing: str, criterion: str, subtype: str, gateway: "ModelGateway", backend_id: str = "generator") -> List[PerturbationProposal]:
        response = await gateway.invoke(self.build_request(paper_id, listing, criterion, subtype), backend_id)
        proposals = self.parse(response.text, criterion, subtype)
        utils.review_logger.info(f"🧪 [{paper_id}] {criterion}/{subtype}: 제안 {len(proposals)}개")
        return proposals
