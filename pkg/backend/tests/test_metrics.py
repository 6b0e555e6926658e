import math

import pytest
from hypothesis import given, settings, strategies as st

from models.report import PATH_KS, EvalReport, MetricSummary
from services.errors import DataError, UsageError
from services.evaluation import evaluate, predict_all, shuffled_kg
from services.kg_store import build_vocabs
from services.metrics import EntityMatcher, corpus_bleu, entity_f1, exact_match, path_at_k, token_f1
from services.reasoner import RankedPath
from services.tokenizer import tokenize

words = st.lists(st.sampled_from(["inform", "7pm", "gas", "station", "the", "a", "sister"]), max_size=8)


def split(texts):
    return [text.split() for text in texts]


def test_exact_match_cases():
    assert exact_match(["inform", "7pm"], ["7pm", "inform"]) == 1
    assert exact_match(["inform", "7pm", "7pm"], ["inform", "7pm"]) == 0
    assert exact_match([], []) == 1


@settings(max_examples=60, deadline=None)
@given(words, st.randoms(use_true_random=False))
def test_exact_match_ignores_token_order(tokens, random):
    shuffled = list(tokens)
    random.shuffle(shuffled)
    assert exact_match(shuffled, tokens) == 1
    assert token_f1(shuffled, tokens) == 1.0


def test_token_f1_cases():
    assert token_f1(["a", "b"], ["a", "c"]) == 0.5
    assert token_f1([], []) == 1.0
    assert token_f1([], ["a"]) == 0.0
    assert token_f1(["x"], ["a"]) == 0.0
    assert token_f1(["a", "a", "b"], ["a", "b", "b"]) == pytest.approx(2 / 3)


@settings(max_examples=60, deadline=None)
@given(words, words)
def test_token_f1_symmetric_and_bounded(pred, gold):
    score = token_f1(pred, gold)
    assert score == token_f1(gold, pred)
    assert 0.0 <= score <= 1.0


def test_entity_f1_uses_longest_entity_match():
    entities, _ = build_vocabs([("gas", "r", "gas station"), ("tennis activity", "HasTime", "7pm")])
    matcher = EntityMatcher(entities)
    assert matcher.mentions(tokenize("the gas station at 7pm")) == [("gas", "station"), ("7pm",)]
    assert entity_f1(tokenize("7pm for the tennis activity"), tokenize("tennis activity at 7pm"), entities) == 1.0
    assert entity_f1(tokenize("gas"), tokenize("gas station"), matcher) == 0.0
    assert entity_f1(tokenize("hello"), tokenize("goodbye"), matcher) == 1.0


def test_bleu_brevity_penalty():
    preds = split(["the cat sat", "a dog"])
    golds = split(["the cat sat down", "a dog"])
    assert corpus_bleu(preds, golds, max_n=2) == pytest.approx(math.exp(-0.2), abs=1e-9)
    assert corpus_bleu(preds, golds, max_n=4) == 0.0


def test_bleu_partial_bigram_match():
    assert corpus_bleu(split(["a b c d"]), split(["a b x d"]), max_n=2) == pytest.approx(0.5, abs=1e-9)
    assert corpus_bleu(split(["a b c d"]), split(["a b c d"]), max_n=4) == pytest.approx(1.0, abs=1e-9)


def test_bleu_is_not_symmetric():
    preds = split(["the cat sat", "a dog"])
    golds = split(["the cat sat down", "a dog"])
    assert corpus_bleu(golds, preds, max_n=2) == pytest.approx(math.sqrt(5 / 6 * 3 / 4), abs=1e-9)
    assert corpus_bleu(golds, preds, max_n=2) != corpus_bleu(preds, golds, max_n=2)


def test_bleu_errors_and_empty():
    assert corpus_bleu([], []) == 0.0
    with pytest.raises(DataError):
        corpus_bleu(split(["a"]), split(["a", "b"]))
    with pytest.raises(DataError):
        corpus_bleu(split(["a"]), split(["a"]), max_n=0)


def test_path_at_k_cases():
    ranked = [RankedPath((2, 1), 0.5), RankedPath((1,), 0.3), RankedPath((0, 0), 0.1)]
    assert path_at_k(ranked, [2, 1], 1) == 1
    assert path_at_k(ranked, [1], 1) == 0
    assert path_at_k(ranked, [1], 3) == 1
    assert path_at_k([(4,), (5, 6)], (5, 6), 2) == 1
    assert path_at_k([], [1], 5) == 0
    with pytest.raises(DataError):
        path_at_k(ranked, [1], 0)
    with pytest.raises(DataError):
        path_at_k(ranked, [], 1)


relation_pairs = st.tuples(st.integers(0, 3), st.integers(0, 3))


@settings(max_examples=60, deadline=None)
@given(st.lists(relation_pairs, max_size=12), relation_pairs)
def test_path_at_k_is_monotone_in_k(ranked, gold):
    hits = [path_at_k(ranked, gold, k) for k in range(1, 15)]
    assert hits == sorted(hits)


# --- evaluation ---------------------------------------------------------------------

def test_evaluate_report_shape(tiny_model, tiny_examples):
    report, scored = evaluate(tiny_model, tiny_examples)
    assert report.n_examples == 4
    assert report.n_path_examples == 4
    assert set(report.path_at) == set(PATH_KS)
    assert set(report.by_domain) == {"schedule", "navigation"}
    assert report.by_domain["schedule"].count == 2
    assert set(report.by_reasoning_type) == {"inform"}
    assert len(scored) == 4
    for value in (report.exact_match, report.token_f1, report.entity_f1, report.bleu1, report.bleu4):
        assert 0.0 <= value <= 1.0
    assert all(report.path_at[a] <= report.path_at[b] for a, b in zip(PATH_KS, PATH_KS[1:]))


def test_evaluate_parallel_matches_sequential(tiny_model, tiny_examples):
    sequential = predict_all(tiny_model, tiny_examples)
    parallel = predict_all(tiny_model, tiny_examples, workers=3)
    assert [p.tokens for p in parallel] == [p.tokens for p in sequential]
    assert [p.paths for p in parallel] == [p.paths for p in sequential]
    with pytest.raises(UsageError):
        predict_all(tiny_model, tiny_examples, workers=0)


def test_evaluate_on_shuffled_triples(tiny_model, tiny_examples):
    report, scored = evaluate(tiny_model, tiny_examples)
    shuffled_report, shuffled_scored = evaluate(tiny_model, tiny_examples, shuffle_seed=11)
    assert shuffled_report.shuffle_seed == 11
    assert shuffled_report.exact_match == report.exact_match
    assert [s.prediction.text for s in shuffled_scored] == [s.prediction.text for s in scored]
    kg = tiny_model.graph.kg
    assert sorted(shuffled_kg(kg, 11).triples()) == sorted(kg.triples())


def test_evaluate_empty_rejected(tiny_model):
    with pytest.raises(DataError):
        evaluate(tiny_model, [])


def test_report_rendering():
    report = EvalReport(n_examples=2, exact_match=0.5, token_f1=0.75, entity_f1=1.0, bleu1=0.5, bleu2=0.25,
                        bleu4=0.0, n_path_examples=1, path_at={1: 0.0, 3: 1.0},
                        by_reasoning_type={"inform": MetricSummary(count=1, exact_match=1.0, path_count=1,
                                                                   path_at_1=0.0),
                                           "extraction": MetricSummary(count=1)})
    headline = report.headline()
    assert headline["bleu1"] == 50.0
    assert headline["path@3"] == 1.0
    lines = report.to_tsv().splitlines()
    assert lines[0] == "metric\tvalue"
    assert "bleu2\t25.0000" in lines
    assert "reasoning_type\tcount\tem\tf1\tentity_f1\tpath@1" in lines
    assert "extraction\t1\t0.0000\t0.0000\t0.0000\t-" in lines
    assert not any(line.startswith("domain") for line in lines)
    assert EvalReport.model_validate_json(report.model_dump_json()) == report
