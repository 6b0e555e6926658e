from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator


class ReasoningType(str, Enum):
    INFORM = "inform"
    SELECTION = "selection"
    TRUE_FALSE = "true_false"
    EXTRACTION = "extraction"


class SmdDomain(str, Enum):
    SCHEDULE = "schedule"
    NAVIGATION = "navigation"
    WEATHER = "weather"


class DialogueExample(BaseModel):
    model_config = ConfigDict(extra="forbid")

    history: List[str] = Field(..., description="Utterances in speaking order, flattened for the encoder")
    response: str = Field(..., description="Target system response")
    initial_entities: List[str] = Field(..., description="Entity names the traversal starts from")
    gold_path: Optional[List[str]] = Field(None, description="Gold relation sequence, if annotated")
    reasoning_type: Optional[ReasoningType] = None
    domain: Optional[str] = None
    id: Optional[str] = None

    @field_validator("history")
    @classmethod
    def _nonempty_history(cls, value: List[str]) -> List[str]:
        if not value or not any(turn.strip() for turn in value):
            raise ValueError("history must contain at least one nonempty utterance")
        return value

    @field_validator("response")
    @classmethod
    def _nonempty_response(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("response must be nonempty")
        return value

    @field_validator("initial_entities")
    @classmethod
    def _nonempty_entities(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("initial_entities must list at least one entity")
        return value

    @property
    def history_text(self) -> str:
        return " ".join(self.history)


class SmdTableRecord(BaseModel):
    """One KB row of an SMD-style dialogue: a schedule event, a POI or a weather location."""

    model_config = ConfigDict(extra="forbid")

    domain: SmdDomain
    attributes: Dict[str, str] = Field(..., description="Attribute name -> value for this item")
