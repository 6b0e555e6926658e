"""End-to-end model: history encoder + heads, KG reasoner, entity-conditioned decoder."""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from models.dialogue import DialogueExample
from services import diffmath as dm
from services.config import TrainConfig
from services.decoder import DecoderContext, build_context, decode_loss, generate, init_decoder_params
from services.diffmath import DiffValue
from services.encoder import HeadOutputs, encode_history, init_encoder_params, predict_heads
from services.entity_tensor import EntityEmbeddingTensor, EntityTokenIndex, build_entity_tensor, entity_token_index
from services.errors import DataError
from services.kg_store import TO_SELF, KnowledgeGraph, ReifiedKG, initial_entity_vector
from services.parameters import ParameterSet
from services.reasoner import HopTrace, RankedPath, extract_paths, traverse, top_k_entities
from services.tokenizer import EOS_ID, TokenVocab

logger = logging.getLogger(__name__)


@dataclass
class ForwardResult:
    heads: HeadOutputs
    final: DiffValue
    trace: HopTrace
    context: DecoderContext
    entities: EntityEmbeddingTensor


@dataclass
class Prediction:
    tokens: List[int]
    text: str
    trace: HopTrace
    paths: List[RankedPath]
    retrieved: List[int]


class DiffKGModel:
    def __init__(self, params: ParameterSet, token_vocab: TokenVocab, graph: KnowledgeGraph, cfg: TrainConfig,
                 entity_index: Optional[EntityTokenIndex] = None):
        self.params = params
        self.token_vocab = token_vocab
        self.graph = graph
        self.cfg = cfg
        self.entity_index = entity_index or entity_token_index(graph.entities, token_vocab)

    @classmethod
    def create(cls, token_vocab: TokenVocab, graph: KnowledgeGraph, cfg: TrainConfig,
               rng: np.random.Generator) -> "DiffKGModel":
        params = ParameterSet()
        init_encoder_params(params, len(token_vocab), cfg.d, graph.kg.n_relations, cfg.hops, rng)
        init_decoder_params(params, len(token_vocab), cfg.d, rng)
        logger.info(f"🧠 Initialised model with {params.size} parameters in {len(params)} blocks")
        return cls(params, token_vocab, graph, cfg)

    @property
    def to_self(self) -> Optional[int]:
        return self.graph.relations.get(TO_SELF)

    def history_tokens(self, example: DialogueExample) -> List[int]:
        tokens = self.token_vocab.encode(example.history_text)
        if not tokens:
            raise DataError(f"{example.id or 'example'}: history has no tokens")
        return tokens

    def target_tokens(self, example: DialogueExample) -> List[int]:
        return self.token_vocab.encode(example.response, strict=True) + [EOS_ID]

    def gold_relations(self, example: DialogueExample) -> List[int]:
        """Gold relation ids padded with ToSelf to the hop count."""
        if not example.gold_path:
            raise DataError(f"{example.id or 'example'}: relation supervision needs a gold_path")
        if len(example.gold_path) > self.cfg.hops:
            raise DataError(f"{example.id or 'example'}: gold_path longer than {self.cfg.hops} hops")
        ids = [self.graph.relations.lookup(name) for name in example.gold_path]
        if len(ids) < self.cfg.hops:
            if self.to_self is None:
                raise DataError("Padding a short gold_path needs a ToSelf-augmented KG")
            ids.extend([self.to_self] * (self.cfg.hops - len(ids)))
        return ids

    def forward(self, example: DialogueExample, kg: Optional[ReifiedKG] = None,
                with_operation: bool = False) -> ForwardResult:
        kg = kg if kg is not None else self.graph.kg
        tokens = self.history_tokens(example)
        x = encode_history(tokens, self.params)
        heads = predict_heads(x, self.params, mode=self.cfg.mode, with_operation=with_operation)
        entities = build_entity_tensor(self.graph.entities, self.token_vocab, self.params["embeddings"],
                                       index=self.entity_index)
        e1 = initial_entity_vector(example.initial_entities, self.graph.entities)
        final, trace = traverse(e1, heads, kg, entities, self.cfg.reasoner)
        retrieved = top_k_entities(final, entities, min(self.cfg.top_k, kg.n_entities))
        context = build_context(tokens, retrieved, self.params)
        return ForwardResult(heads=heads, final=final, trace=trace, context=context, entities=entities)

    def response_loss(self, example: DialogueExample, result: ForwardResult) -> DiffValue:
        return decode_loss(result.context, self.target_tokens(example), self.params)

    def relation_loss(self, example: DialogueExample, heads: HeadOutputs) -> DiffValue:
        total = None
        for hop, relation in enumerate(self.gold_relations(example)):
            term = dm.cross_entropy(heads.relation_logits(hop), relation)
            total = term if total is None else dm.add(total, term)
        return total

    def infer(self, example: DialogueExample, kg: Optional[ReifiedKG] = None) -> Prediction:
        kg = kg if kg is not None else self.graph.kg
        result = self.forward(example, kg)
        tokens = generate(result.context, self.params, self.cfg.max_response_len)
        paths = extract_paths(result.trace, kg, self.cfg.beam_width, self.to_self)
        return Prediction(
            tokens=tokens,
            text=self.token_vocab.decode(tokens),
            trace=result.trace,
            paths=paths,
            retrieved=list(result.context.entity_ids),
        )

    def path_names(self, path: RankedPath) -> List[str]:
        return [self.graph.relations.name(r) for r in path.relations]
