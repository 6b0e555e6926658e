from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field


class ModelDims(BaseModel):
    vocab_size: int = Field(..., ge=5)
    d: int = Field(..., ge=1)
    hops: int = Field(..., ge=1)
    n_entities: int = Field(..., ge=1)
    n_relations: int = Field(..., ge=1)
    m: int = Field(..., ge=1)


class BlockSpec(BaseModel):
    name: str
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        size = 1
        for dim in self.shape:
            size *= dim
        return size


class CheckpointManifest(BaseModel):
    """Everything needed to rebuild a model around the little-endian float64 parameter blob."""

    model_config = ConfigDict(extra="forbid")

    format_version: int = 1
    dims: ModelDims
    tokens: List[str] = Field(..., description="Token vocabulary in index order, reserved tokens first")
    token_vocab_hash: str
    entity_vocab_hash: str
    relation_vocab_hash: str
    config: Dict[str, Any]
    blocks: List[BlockSpec]
    epoch: int = 0
    metric_name: Optional[str] = None
    best_metric: Optional[float] = None

    @property
    def blob_size(self) -> int:
        return sum(block.size for block in self.blocks)
