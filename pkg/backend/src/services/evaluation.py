import logging
from collections import defaultdict
from dataclasses import dataclass
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.dialogue import DialogueExample
from models.report import PATH_KS, EvalReport, MetricSummary
from services.errors import DataError, UsageError
from services.kg_store import ReifiedKG, permute_triples
from services.metrics import EntityMatcher, corpus_bleu, entity_f1, exact_match, path_at_k, token_f1
from services.model import DiffKGModel, Prediction
from services.parallel import ExamplePool
from services.reasoner import strip_trailing
from services.tokenizer import tokenize

logger = logging.getLogger(__name__)


@dataclass
class ScoredExample:
    example: DialogueExample
    prediction: Prediction
    exact_match: int
    token_f1: float
    entity_f1: float
    path_hits: Optional[Dict[int, int]]


def shuffled_kg(kg: ReifiedKG, seed: int) -> ReifiedKG:
    permutation = np.random.default_rng(np.random.SeedSequence(seed)).permutation(kg.n_triples)
    return permute_triples(kg, permutation)


def _predict_chunk(model: DiffKGModel, examples: Sequence[DialogueExample],
                   kg: Optional[ReifiedKG] = None) -> List[Prediction]:
    return [model.infer(example, kg) for example in examples]


def predict_all(model: DiffKGModel, examples: Sequence[DialogueExample], kg: Optional[ReifiedKG] = None,
                workers: int = 1, pool: Optional[ExamplePool] = None) -> List[Prediction]:
    """Inference over every example; results keep input order regardless of workers."""
    if workers < 1:
        raise UsageError(f"workers must be >= 1, got {workers}")
    task = partial(_predict_chunk, kg=kg) if kg is not None else _predict_chunk
    if pool is not None:
        return pool.map(task, examples)
    with ExamplePool(model, workers) as own:
        return own.map(task, examples)


def _gold_relations(model: DiffKGModel, example: DialogueExample) -> Optional[Tuple[int, ...]]:
    if not example.gold_path:
        return None
    ids = [model.graph.relations.lookup(name) for name in example.gold_path]
    gold = strip_trailing(ids, model.to_self)
    return gold or None


def _summarise(scored: Sequence[ScoredExample]) -> MetricSummary:
    with_paths = [s for s in scored if s.path_hits is not None]
    n = len(scored)
    return MetricSummary(
        count=n,
        exact_match=sum(s.exact_match for s in scored) / n,
        token_f1=sum(s.token_f1 for s in scored) / n,
        entity_f1=sum(s.entity_f1 for s in scored) / n,
        path_count=len(with_paths),
        path_at_1=(sum(s.path_hits[1] for s in with_paths) / len(with_paths)) if with_paths else None,
    )


def _group(scored: Sequence[ScoredExample], key) -> Dict[str, MetricSummary]:
    groups: Dict[str, List[ScoredExample]] = defaultdict(list)
    for item in scored:
        label = key(item.example)
        if label is not None:
            groups[label].append(item)
    return {label: _summarise(items) for label, items in groups.items()}


def evaluate(model: DiffKGModel, examples: Sequence[DialogueExample], kg: Optional[ReifiedKG] = None,
             workers: int = 1, shuffle_seed: Optional[int] = None,
             pool: Optional[ExamplePool] = None) -> Tuple[EvalReport, List[ScoredExample]]:
    if not examples:
        raise DataError("Cannot evaluate an empty example set")
    if shuffle_seed is not None:
        kg = shuffled_kg(kg if kg is not None else model.graph.kg, shuffle_seed)
        logger.info(f"🔀 Evaluating on triples shuffled with seed {shuffle_seed}")

    predictions = predict_all(model, examples, kg, workers, pool)
    matcher = EntityMatcher(model.graph.entities)

    scored: List[ScoredExample] = []
    preds, golds = [], []
    for example, prediction in zip(examples, predictions):
        pred_tokens = tokenize(prediction.text)
        gold_tokens = tokenize(example.response)
        preds.append(pred_tokens)
        golds.append(gold_tokens)
        gold_path = _gold_relations(model, example)
        hits = None
        if gold_path is not None:
            hits = {k: path_at_k(prediction.paths, gold_path, k) for k in PATH_KS}
        scored.append(ScoredExample(
            example=example,
            prediction=prediction,
            exact_match=exact_match(pred_tokens, gold_tokens),
            token_f1=token_f1(pred_tokens, gold_tokens),
            entity_f1=entity_f1(pred_tokens, gold_tokens, matcher),
            path_hits=hits,
        ))

    overall = _summarise(scored)
    with_paths = [s for s in scored if s.path_hits is not None]
    report = EvalReport(
        n_examples=overall.count,
        exact_match=overall.exact_match,
        token_f1=overall.token_f1,
        entity_f1=overall.entity_f1,
        bleu1=corpus_bleu(preds, golds, max_n=1),
        bleu2=corpus_bleu(preds, golds, max_n=2),
        bleu4=corpus_bleu(preds, golds, max_n=4),
        n_path_examples=len(with_paths),
        path_at={k: sum(s.path_hits[k] for s in with_paths) / len(with_paths) for k in PATH_KS} if with_paths else {},
        by_reasoning_type=_group(scored, lambda ex: ex.reasoning_type.value if ex.reasoning_type else None),
        by_domain=_group(scored, lambda ex: ex.domain),
        shuffle_seed=shuffle_seed,
    )
    logger.info(f"📊 Evaluated {report.n_examples} examples: EM {report.exact_match:.4f}, F1 {report.token_f1:.4f}")
    return report, scored
