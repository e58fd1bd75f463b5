from fractions import Fraction
from typing import List, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator


LIKERT_VALUES = (-2, -1, 0, 1, 2)
ROLES = ("author", "PC", "SPC", "AC")
REVIEWER_ROLES = ("PC", "SPC", "AC")


class ResponseSet(BaseModel):
    """한 문항에 대한 (역할, 리뷰 종류)별 5점 척도 응답 모음"""

    role: Literal["author", "PC", "SPC", "AC", "all", "reviewers"] = "all"
    review_type: Literal["AI", "human"]
    item_id: str
    values: List[int] = Field(default_factory=list)

    @field_validator("values")
    @classmethod
    def _likert_range(cls, values):
        for value in values:
            if value not in LIKERT_VALUES:
                raise ValueError(f"Likert value out of range: {value}")
        return values


class AgreementFractions(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    agree: Fraction
    disagree: Fraction
    neutral: Fraction


class MannWhitneyResult(BaseModel):
    u_statistic: float
    p_value: float
    method: Literal["exact", "normal"]


class ComparisonResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    item_id: str
    group: str = "overall"
    n_ai: int
    n_human: int
    mean_ai: Fraction
    mean_human: Fraction
    delta: Fraction
    u_statistic: float
    p_value: float
    method: str
    significant: bool = False
