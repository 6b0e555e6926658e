import logging
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from services import diffmath as dm
from services.diffmath import DiffValue
from services.errors import DataError, UsageError
from services.parameters import ParameterSet

logger = logging.getLogger(__name__)

Mode = Literal["full", "walk-only"]
WALK_GATE = np.array([1.0, 0.0])


@dataclass
class HeadOutputs:
    """Operation vector, per-hop relation distributions and walk-or-check gates."""

    a: Optional[DiffValue]
    rel_logits: DiffValue
    rels: DiffValue
    gates: DiffValue
    mode: str

    @property
    def hops(self) -> int:
        return self.rels.shape[0]

    def relation(self, hop: int) -> DiffValue:
        return dm.take(self.rels, hop)

    def relation_logits(self, hop: int) -> DiffValue:
        return dm.take(self.rel_logits, hop)

    def gate(self, hop: int) -> DiffValue:
        return dm.take(self.gates, hop)


def init_encoder_params(params: ParameterSet, vocab_size: int, d: int, n_relations: int, hops: int,
                        rng: np.random.Generator) -> None:
    params.uniform("embeddings", (vocab_size, d), rng)
    params.uniform("encoder.w", (d, d), rng)
    params.zeros("encoder.b", (d,))
    params.uniform("heads.w_o", (d, d), rng)
    params.uniform("heads.w_r", (d, n_relations * hops), rng)
    params.uniform("heads.w_c", (d, 2 * hops), rng)


def encode_history(tokens: Sequence[int], params: ParameterSet) -> DiffValue:
    """x̃ = tanh(W·meanpool(embeddings) + b)."""
    if len(tokens) == 0:
        raise DataError("Empty dialogue history")
    embedded = dm.gather_rows(params["embeddings"], np.asarray(tokens, dtype=np.int64))
    pooled = dm.mean(embedded, axis=0)
    return dm.tanh(dm.add(dm.matmul(pooled, params["encoder.w"]), params["encoder.b"]))


def predict_heads(x: DiffValue, params: ParameterSet, mode: Mode = "full",
                  with_operation: bool = False) -> HeadOutputs:
    w_r, w_c = params["heads.w_r"], params["heads.w_c"]
    d = w_r.shape[0]
    if x.shape != (d,):
        raise DataError(f"History encoding has shape {x.shape}, expected ({d},)")
    hops = w_c.shape[1] // 2
    n_relations = w_r.shape[1] // hops

    rel_logits = dm.reshape(dm.matmul(x, w_r), (hops, n_relations))
    rels = dm.softmax(rel_logits)

    if mode == "walk-only":
        if with_operation:
            raise UsageError("walk-only mode has no operation layer to supervise")
        gates = dm.const(np.tile(WALK_GATE, (hops, 1)))
        return HeadOutputs(a=None, rel_logits=rel_logits, rels=rels, gates=gates, mode=mode)

    a = dm.matmul(x, params["heads.w_o"])
    gates = dm.softmax(dm.reshape(dm.matmul(x, w_c), (hops, 2)))
    return HeadOutputs(a=a, rel_logits=rel_logits, rels=rels, gates=gates, mode=mode)
