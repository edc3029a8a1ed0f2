from typing import List, Union

from pydantic import BaseModel, Field


class RecommendRequest(BaseModel):
    items: List[Union[str, int]] = Field(..., description="interaction history, oldest first")
    k: int = Field(10, ge=1)


class RecommendResponse(BaseModel):
    items: List[str]
    scores: List[float]
    dropped_unknown: int
    clamped: bool = False


class ErrorResponse(BaseModel):
    error: str
    detail: str
