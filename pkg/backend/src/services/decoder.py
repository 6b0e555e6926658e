"""Gated recurrent decoder with additive attention over history + retrieved entities."""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from services import diffmath as dm
from services.diffmath import DiffValue
from services.errors import DataError, UsageError
from services.parameters import ParameterSet
from services.reasoner import RetrievedEntity
from services.tokenizer import BOS_ID, EOS_ID

logger = logging.getLogger(__name__)


@dataclass
class DecoderContext:
    """History token embeddings followed by the weight-scaled entity blocks."""

    sequence: DiffValue
    history_len: int
    entity_ids: List[int]
    m: int

    def __len__(self) -> int:
        return self.sequence.shape[0]


def init_decoder_params(params: ParameterSet, vocab_size: int, d: int, rng: np.random.Generator) -> None:
    params.uniform("decoder.w_att_ctx", (d, d), rng)
    params.uniform("decoder.w_att_state", (d, d), rng)
    params.uniform("decoder.v_att", (d,), rng)
    params.uniform("decoder.kg_segment", (d,), rng)
    params.uniform("decoder.w_init", (d, d), rng)
    params.zeros("decoder.b_init", (d,))
    for gate in ("z", "r", "h"):
        params.uniform(f"decoder.w_{gate}", (2 * d, d), rng)
        params.uniform(f"decoder.u_{gate}", (d, d), rng)
        params.zeros(f"decoder.b_{gate}", (d,))
    params.uniform("decoder.w_out", (d, vocab_size), rng)
    params.zeros("decoder.b_out", (vocab_size,))


def build_context(history_tokens: Sequence[int], retrieved: Sequence[RetrievedEntity],
                  params: ParameterSet) -> DecoderContext:
    """M history positions, then m positions per retrieved entity in retrieval order.

    Every entity position also carries the knowledge segment vector scaled by the entity weight.
    """
    if len(history_tokens) == 0:
        raise DataError("Empty dialogue history")
    pieces = [dm.gather_rows(params["embeddings"], np.asarray(history_tokens, dtype=np.int64))]
    m = 0
    for entity in retrieved:
        m = entity.embedding.shape[1]
        gain = entity.gain if entity.gain is not None else dm.const(np.asarray(entity.weight, dtype=np.float64))
        marker = dm.scale_rows(dm.reshape(params["decoder.kg_segment"], (1, -1)), dm.reshape(gain, (1,)))
        pieces.append(dm.add(dm.transpose(entity.embedding, (1, 0)), marker))
    return DecoderContext(
        sequence=dm.concat(pieces, axis=0),
        history_len=len(history_tokens),
        entity_ids=[entity.entity_id for entity in retrieved],
        m=m,
    )


class _Recurrence:
    """Per-context cached projections and the single-step transition."""

    def __init__(self, context: DecoderContext, params: ParameterSet):
        self.params = params
        self.context = context.sequence
        self.keys = dm.matmul(self.context, params["decoder.w_att_ctx"])
        self.readout = dm.transpose(params["embeddings"], (1, 0))

    def initial_state(self) -> DiffValue:
        pooled = dm.mean(self.context, axis=0)
        return dm.tanh(dm.add(dm.matmul(pooled, self.params["decoder.w_init"]), self.params["decoder.b_init"]))

    def _gate_input(self, gate: str, inp: DiffValue, state: DiffValue) -> DiffValue:
        p = self.params
        return dm.add(dm.add(dm.matmul(inp, p[f"decoder.w_{gate}"]), dm.matmul(state, p[f"decoder.u_{gate}"])),
                      p[f"decoder.b_{gate}"])

    def step(self, state: DiffValue, previous_token: int) -> Tuple[DiffValue, DiffValue]:
        p = self.params
        energy = dm.tanh(dm.add(self.keys, dm.matmul(state, p["decoder.w_att_state"])))
        attention = dm.softmax(dm.matmul(energy, p["decoder.v_att"]))
        attended = dm.matmul(attention, self.context)
        inp = dm.concat([dm.take(p["embeddings"], previous_token), attended])

        update = dm.sigmoid(self._gate_input("z", inp, state))
        reset = dm.sigmoid(self._gate_input("r", inp, state))
        candidate = dm.tanh(dm.add(dm.add(dm.matmul(inp, p["decoder.w_h"]),
                                          dm.matmul(dm.hadamard(reset, state), p["decoder.u_h"])),
                                   p["decoder.b_h"]))
        state = dm.add(state, dm.hadamard(update, dm.sub(candidate, state)))
        # the attended context is also scored against the shared embedding table
        logits = dm.add(dm.add(dm.matmul(state, p["decoder.w_out"]), p["decoder.b_out"]),
                        dm.matmul(attended, self.readout))
        return state, logits


def _check_target(target: Sequence[int], vocab_size: int) -> None:
    if len(target) == 0 or target[-1] != EOS_ID:
        raise DataError("Decoder target must be nonempty and end with EOS")
    bad = [t for t in target if not 0 <= t < vocab_size]
    if bad:
        raise DataError(f"Decoder target tokens out of vocabulary: {bad}")


def decode_loss(context: DecoderContext, target: Sequence[int], params: ParameterSet) -> DiffValue:
    """Teacher-forced Σ_t −log P(y_t | y_<t, context)."""
    _check_target(target, params["decoder.b_out"].shape[0])
    recurrence = _Recurrence(context, params)
    state = recurrence.initial_state()
    previous = BOS_ID
    total = None
    for token in target:
        state, logits = recurrence.step(state, previous)
        term = dm.cross_entropy(logits, int(token))
        total = term if total is None else dm.add(total, term)
        previous = int(token)
    return total


def step_distributions(context: DecoderContext, target: Sequence[int], params: ParameterSet) -> np.ndarray:
    """Teacher-forced per-step output distributions, one row per target token."""
    recurrence = _Recurrence(context, params)
    state = recurrence.initial_state()
    previous = BOS_ID
    rows = []
    for token in target:
        state, logits = recurrence.step(state, previous)
        rows.append(dm.softmax(logits).value)
        previous = int(token)
    return np.array(rows)


def generate(context: DecoderContext, params: ParameterSet, max_len: int) -> List[int]:
    """Greedy decoding from BOS until EOS or max_len; ties go to the lowest token id."""
    if max_len < 1:
        raise UsageError(f"max_len must be >= 1, got {max_len}")
    recurrence = _Recurrence(context, params)
    state = recurrence.initial_state()
    previous = BOS_ID
    output: List[int] = []
    for _ in range(max_len):
        state, logits = recurrence.step(state, previous)
        token = int(np.argmax(logits.value))
        if token == EOS_ID:
            break
        output.append(token)
        previous = token
    return output
