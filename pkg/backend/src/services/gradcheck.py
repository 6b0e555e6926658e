"""Finite-difference check of the full training loss on a tiny random model."""

import logging
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from models.dialogue import DialogueExample, ReasoningType
from services.config import GradcheckConfig, TrainConfig
from services.diffmath import grad_check_blocks
from services.errors import DataError
from services.kg_store import KnowledgeGraph, StringTriple, build_knowledge_graph
from services.model import DiffKGModel
from services.tokenizer import RESERVED, TokenVocab
from services.trainer import combined_loss

logger = logging.getLogger(__name__)

# larger than the training init so gates and attention leave their symmetric point
GRADCHECK_INIT_SCALE = 0.3


@dataclass
class GradcheckProblem:
    model: DiffKGModel
    example: DialogueExample
    graph: KnowledgeGraph


def _random_triples(cfg: GradcheckConfig, rng: np.random.Generator) -> List[StringTriple]:
    if cfg.n_relations > cfg.n_entities - 1:
        raise DataError("gradcheck needs n_relations < n_entities")
    entities = [f"e{i}" for i in range(cfg.n_entities)]
    relations = [f"r{i}" for i in range(cfg.n_relations)]
    # a chain first so every entity and relation is present
    triples = {(entities[i], relations[i % cfg.n_relations], entities[i + 1]) for i in range(cfg.n_entities - 1)}
    ordered = sorted(triples, key=lambda t: int(t[0][1:]))
    capacity = cfg.n_entities * cfg.n_entities * cfg.n_relations
    if cfg.n_triples > capacity:
        raise DataError("gradcheck n_triples exceeds the number of distinct triples")
    while len(ordered) < cfg.n_triples:
        h, t = rng.integers(cfg.n_entities, size=2)
        triple = (entities[int(h)], relations[int(rng.integers(cfg.n_relations))], entities[int(t)])
        if triple not in triples:
            triples.add(triple)
            ordered.append(triple)
    return ordered


def build_problem(cfg: GradcheckConfig) -> GradcheckProblem:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    graph = build_knowledge_graph(_random_triples(cfg, rng))

    names = graph.entities.names + graph.relations.names + ["inform"]
    base = sorted({token for name in names for token in name.lower().split()})
    n_filler = cfg.vocab_size - len(RESERVED) - len(base)
    if n_filler < 4:
        raise DataError(f"vocab_size={cfg.vocab_size} leaves no room for history tokens")
    fillers = [f"w{i}" for i in range(n_filler)]
    token_vocab = TokenVocab(base + fillers)

    history = " ".join(fillers[int(i)] for i in rng.integers(len(fillers), size=5))
    gold = [graph.relations.name(int(rng.integers(cfg.n_relations))) for _ in range(min(2, cfg.hops))]
    example = DialogueExample(
        history=[f"{history} e0"],
        response=f"inform e1 {fillers[0]} e2",
        initial_entities=["e0", "e3"],
        gold_path=gold,
        reasoning_type=ReasoningType.INFORM,
        id="gradcheck",
    )

    train_cfg = TrainConfig(d=cfg.d, hops=cfg.hops, top_k=cfg.top_k, mode=cfg.mode,
                            path_loss_weight=cfg.path_loss_weight, seed=cfg.seed)
    model = DiffKGModel.create(token_vocab, graph, train_cfg, rng)
    for _, param in model.params.items():
        param.value = rng.uniform(-GRADCHECK_INIT_SCALE, GRADCHECK_INIT_SCALE, size=param.shape)
    return GradcheckProblem(model=model, example=example, graph=graph)


def run_gradcheck(cfg: GradcheckConfig) -> Dict[str, float]:
    """Max relative error per parameter block for the combined training loss."""
    problem = build_problem(cfg)
    model = problem.model
    logger.info(f"🔬 Gradient check over {len(model.params)} blocks ({cfg.mode} mode, h={cfg.step})")
    blocks = dict(model.params.items())
    return grad_check_blocks(
        lambda: combined_loss(problem.example, model),
        blocks,
        h=cfg.step,
        max_coords=cfg.max_coords,
        rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])),
        min_grad=cfg.min_grad,
        along_gradient=cfg.along_gradient,
    )
