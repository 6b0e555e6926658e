"""Response and reasoning-path metrics: EM, token F1, entity F1, corpus BLEU, path@k."""

from collections import Counter
from typing import Dict, List, Sequence, Tuple, Union

from sacrebleu.metrics import BLEU

from services.errors import DataError
from services.kg_store import EntityVocab
from services.reasoner import RankedPath
from services.tokenizer import tokenize

Tokens = Sequence[str]


def exact_match(pred: Tokens, gold: Tokens) -> int:
    """Order-free: 1 iff the token multisets are equal."""
    return int(sorted(pred) == sorted(gold))


def _multiset_f1(pred: Sequence, gold: Sequence) -> float:
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: Tokens, gold: Tokens) -> float:
    return _multiset_f1(list(pred), list(gold))


class EntityMatcher:
    """Longest-match scan of token sequences against the tokenized entity names."""

    def __init__(self, entities: EntityVocab):
        self._by_first: Dict[str, List[Tuple[str, ...]]] = {}
        for name in entities.names:
            tokens = tuple(tokenize(name))
            if tokens:
                self._by_first.setdefault(tokens[0], []).append(tokens)
        for candidates in self._by_first.values():
            candidates.sort(key=len, reverse=True)

    def mentions(self, tokens: Tokens) -> List[Tuple[str, ...]]:
        found = []
        i = 0
        while i < len(tokens):
            match = next((c for c in self._by_first.get(tokens[i], ())
                          if tuple(tokens[i:i + len(c)]) == c), None)
            if match is None:
                i += 1
            else:
                found.append(match)
                i += len(match)
        return found


def entity_f1(pred: Tokens, gold: Tokens, entities: Union[EntityVocab, EntityMatcher]) -> float:
    matcher = entities if isinstance(entities, EntityMatcher) else EntityMatcher(entities)
    return _multiset_f1(matcher.mentions(pred), matcher.mentions(gold))


def corpus_bleu(preds: Sequence[Tokens], golds: Sequence[Tokens], max_n: int = 4) -> float:
    """Corpus BLEU in [0, 1] with brevity penalty, uniform weights and no smoothing."""
    if len(preds) != len(golds):
        raise DataError(f"corpus_bleu: {len(preds)} predictions for {len(golds)} references")
    if max_n < 1:
        raise DataError(f"corpus_bleu: max_n must be >= 1, got {max_n}")
    if not preds:
        return 0.0
    bleu = BLEU(max_ngram_order=max_n, smooth_method="none", tokenize="none", effective_order=False)
    hypotheses = [" ".join(p) for p in preds]
    references = [" ".join(g) for g in golds]
    score = bleu.corpus_score(hypotheses, [references]).score / 100.0
    return min(1.0, max(0.0, score))


def path_at_k(ranked_paths: Sequence[Union[RankedPath, Sequence[int]]], gold_path: Sequence[int], k: int) -> int:
    """1 iff the gold relation sequence is among the first k ranked paths."""
    if k < 1:
        raise DataError(f"path@k needs k >= 1, got {k}")
    if not gold_path:
        raise DataError("path@k needs a nonempty gold path")
    gold = tuple(gold_path)
    for path in ranked_paths[:k]:
        relations = path.relations if isinstance(path, RankedPath) else tuple(path)
        if tuple(relations) == gold:
            return 1
    return 0
