"""Differentiable multi-hop traversal over a reified KG."""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from services import diffmath as dm
from services.config import ReasonerConfig
from services.diffmath import DiffValue
from services.encoder import HeadOutputs
from services.entity_tensor import EntityEmbeddingTensor
from services.errors import DataError
from services.kg_store import EntityVocab, ReifiedKG, RelationVocab, outgoing

logger = logging.getLogger(__name__)

GATE_TOLERANCE = 1e-9


@dataclass
class HopRecord:
    entities: np.ndarray
    relations: np.ndarray
    gate: Optional[np.ndarray]


@dataclass
class HopTrace:
    initial: np.ndarray
    hops: List[HopRecord] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.hops[-1].entities if self.hops else self.initial

    def __len__(self) -> int:
        return len(self.hops)


class RetrievedEntity(NamedTuple):
    entity_id: int
    weight: float
    embedding: DiffValue
    # weight as a tape value; None when built by hand
    gain: Optional[DiffValue] = None


class RankedPath(NamedTuple):
    relations: Tuple[int, ...]
    score: float


def _as_value(v: Union[DiffValue, np.ndarray]) -> DiffValue:
    return v if isinstance(v, DiffValue) else dm.const(v)


def _check_traversal_dims(e: DiffValue, r: DiffValue, kg: ReifiedKG) -> None:
    if e.shape != (kg.n_entities,):
        raise DataError(f"Entity vector has shape {e.shape}, KG has {kg.n_entities} entities")
    if r.shape != (kg.n_relations,):
        raise DataError(f"Relation vector has shape {r.shape}, KG has {kg.n_relations} relations")


def follow_unnormalized(e: DiffValue, r: DiffValue, kg: ReifiedKG) -> DiffValue:
    """M_tᵀ((M_h e) ⊙ (M_r r))."""
    e, r = _as_value(e), _as_value(r)
    _check_traversal_dims(e, r, kg)
    per_triple = dm.hadamard(dm.sp_apply(kg.m_h, e), dm.sp_apply(kg.m_r, r))
    return dm.sp_apply_transpose(kg.m_t, per_triple)


def next_hop(e: DiffValue, r: DiffValue, kg: ReifiedKG, eps: float) -> DiffValue:
    return dm.normalize_eps(follow_unnormalized(e, r, kg), eps)


def operate(e: DiffValue, a: DiffValue, E: EntityEmbeddingTensor) -> DiffValue:
    """softmax over entities of aᵀ·meanpool_m(E[i]·e[i])."""
    e, a = _as_value(e), _as_value(a)
    if e.shape != (E.n_entities,) or a.shape != (E.d,):
        raise DataError(f"operate: e {e.shape} / a {a.shape} do not match E ({E.n_entities}, {E.d}, {E.m})")
    scores = dm.hadamard(e, dm.matmul(E.token_mean, a))
    return dm.softmax(scores)


def combine(c: DiffValue, e_walk: DiffValue, e_check: DiffValue) -> DiffValue:
    c = _as_value(c)
    if c.shape != (2,) or (c.value < 0).any() or abs(float(c.value.sum()) - 1.0) > GATE_TOLERANCE:
        raise DataError(f"Walk-or-check gate is not a distribution: {c.value}")
    return dm.mix_gate(c, _as_value(e_walk), _as_value(e_check))


def traverse(e1: Union[DiffValue, np.ndarray], heads: HeadOutputs, kg: ReifiedKG,
             E: Optional[EntityEmbeddingTensor], cfg: ReasonerConfig) -> Tuple[DiffValue, HopTrace]:
    if heads.hops != cfg.hops:
        raise DataError(f"Heads predict {heads.hops} hops, config expects {cfg.hops}")
    walk_only = heads.mode == "walk-only"
    if not walk_only and (E is None or heads.a is None):
        raise DataError("Full-mode traversal needs the entity tensor and the operation vector")

    e = _as_value(e1)
    trace = HopTrace(initial=e.value.copy())
    for hop in range(cfg.hops):
        r = heads.relation(hop)
        e_walk = next_hop(e, r, kg, cfg.eps)
        if walk_only:
            e, gate = e_walk, None
        else:
            c = heads.gate(hop)
            e = combine(c, e_walk, operate(e, heads.a, E))
            gate = c.value.copy()
        trace.hops.append(HopRecord(entities=e.value.copy(), relations=r.value.copy(), gate=gate))
    return e, trace


def ranked_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values; ties go to the lower index."""
    return np.lexsort((np.arange(values.shape[0]), -values))[:k]


def top_k_entities(eH: DiffValue, E: EntityEmbeddingTensor, k: int) -> List[RetrievedEntity]:
    n = eH.shape[0]
    if not 1 <= k <= n:
        raise DataError(f"top_k must lie in [1, {n}], got {k}")
    ids = ranked_indices(eH.value, k)
    gains = dm.take(eH, ids)
    weighted = dm.scale_rows(E.blocks(ids), gains)
    return [
        RetrievedEntity(int(entity_id), float(eH.value[entity_id]), dm.take(weighted, j), dm.take(gains, j))
        for j, entity_id in enumerate(ids)
    ]


def strip_trailing(path: Sequence[int], to_self: Optional[int]) -> Tuple[int, ...]:
    path = list(path)
    while path and to_self is not None and path[-1] == to_self:
        path.pop()
    return tuple(path)


def extract_paths(trace: HopTrace, kg: ReifiedKG, beam_width: int,
                  to_self: Optional[int] = None) -> List[RankedPath]:
    """Beam search over hop-wise relation choices with a symbolic hard frontier."""
    if beam_width < 1:
        raise DataError(f"beam_width must be >= 1, got {beam_width}")
    frontier = np.flatnonzero(trace.initial)
    if frontier.size == 0:
        return []

    beam: List[Tuple[float, Tuple[int, ...], np.ndarray]] = [(1.0, (), frontier)]
    for record in trace.hops:
        candidates = []
        for score, path, nodes in beam:
            rels, tails = outgoing(kg, nodes)
            for relation in np.unique(rels):
                reached = np.unique(tails[rels == relation])
                candidates.append((score * float(record.relations[relation]), path + (int(relation),), reached))
        if not candidates:
            return []
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beam = candidates[:beam_width]

    ranked = [RankedPath(strip_trailing(path, to_self), score) for score, path, _ in beam]
    ranked.sort(key=lambda p: (-p.score, p.relations))
    return ranked


def _top_named(values: np.ndarray, vocab, k: int = 3) -> List[Tuple[str, float]]:
    ids = ranked_indices(values, min(k, values.shape[0]))
    return [(vocab.name(int(i)), float(values[i])) for i in ids]


def trace_to_dict(trace: HopTrace, entities: EntityVocab, relations: RelationVocab) -> Dict[str, Any]:
    return {
        "initial": _top_named(trace.initial, entities, k=int(np.count_nonzero(trace.initial)) or 1),
        "hops": [
            {
                "hop": hop,
                "relations": _top_named(record.relations, relations),
                "entities": _top_named(record.entities, entities),
                "gate": None if record.gate is None else [float(g) for g in record.gate],
            }
            for hop, record in enumerate(trace.hops, 1)
        ],
    }


def format_trace(trace: HopTrace, entities: EntityVocab, relations: RelationVocab) -> str:
    """One line per hop: index, top-3 relations, top-3 entities, gate (full mode only)."""
    lines = []
    for hop, record in enumerate(trace.hops, 1):
        rels = ", ".join(f"{name} {p:.3f}" for name, p in _top_named(record.relations, relations))
        ents = ", ".join(f"{name} {w:.3f}" for name, w in _top_named(record.entities, entities))
        columns = [f"hop {hop}", f"relations: {rels}", f"entities: {ents}"]
        if record.gate is not None:
            columns.append(f"gate: walk {record.gate[0]:.3f} / check {record.gate[1]:.3f}")
        lines.append("\t".join(columns))
    return "\n".join(lines)
