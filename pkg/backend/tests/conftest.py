import numpy as np
import pytest

from models.dialogue import DialogueExample, ReasoningType
from services.config import ReasonerConfig, TrainConfig
from services.kg_store import build_knowledge_graph
from services.model import DiffKGModel
from services.trainer import build_token_vocab

TINY_TRIPLES = [
    ("tennis activity", "HasTime", "7pm"),
    ("tennis activity", "HasParty", "sister"),
    ("7pm", "IsTimeOf", "tennis activity"),
    ("Chevron", "HasType", "gas station"),
    ("gas station", "IsTypeOf", "Chevron"),
    ("Chevron", "HasDistance", "3 miles"),
]


def dense(matrix) -> np.ndarray:
    return np.asarray(matrix.todense())


def dense_next(e, r, kg, eps):
    """Reference built from full matrices, no sparse kernels."""
    m_h, m_r, m_t = dense(kg.m_h), dense(kg.m_r), dense(kg.m_t)
    raw = m_t.T @ ((m_h @ e) * (m_r @ r))
    norm = np.linalg.norm(raw)
    return raw / (norm + eps) if norm > 0 else raw


def dense_operate(e, a, E_values):
    n_entities, _, m = E_values.shape
    scores = np.zeros(n_entities)
    for i in range(n_entities):
        pooled = np.zeros(E_values.shape[1])
        for j in range(m):
            pooled += E_values[i, :, j] * e[i]
        scores[i] = a @ (pooled / m)
    exp = np.exp(scores - scores.max())
    return exp / exp.sum()


def dense_traverse(e1, rels, gates, a, kg, E_values, eps, walk_only=False):
    e = np.array(e1, dtype=float)
    for hop in range(rels.shape[0]):
        walked = dense_next(e, rels[hop], kg, eps)
        if walk_only:
            e = walked
        else:
            e = gates[hop, 0] * walked + gates[hop, 1] * dense_operate(e, a, E_values)
    return e


@pytest.fixture
def tiny_graph():
    return build_knowledge_graph(TINY_TRIPLES)


@pytest.fixture
def tiny_examples():
    return [
        DialogueExample(
            history=["when is my tennis activity ?"],
            response="inform 7pm",
            initial_entities=["tennis activity"],
            gold_path=["HasTime"],
            reasoning_type=ReasoningType.INFORM,
            domain="schedule",
            id="ex-0",
        ),
        DialogueExample(
            history=["what kind of place is chevron ?"],
            response="inform gas station",
            initial_entities=["Chevron"],
            gold_path=["HasType"],
            reasoning_type=ReasoningType.INFORM,
            domain="navigation",
            id="ex-1",
        ),
        DialogueExample(
            history=["who joins the tennis activity ?"],
            response="inform sister",
            initial_entities=["tennis activity"],
            gold_path=["HasParty"],
            reasoning_type=ReasoningType.INFORM,
            domain="schedule",
            id="ex-2",
        ),
        DialogueExample(
            history=["how far is chevron ?"],
            response="inform 3 miles",
            initial_entities=["Chevron"],
            gold_path=["HasDistance"],
            reasoning_type=ReasoningType.INFORM,
            domain="navigation",
            id="ex-3",
        ),
    ]


@pytest.fixture
def tiny_config():
    return TrainConfig(d=8, hops=2, top_k=2, batch_size=2, grad_accum_steps=1, max_epochs=1,
                       learning_rate=0.01, max_response_len=6, seed=3)


@pytest.fixture
def tiny_model(tiny_graph, tiny_examples, tiny_config):
    vocab = build_token_vocab(tiny_examples, tiny_graph)
    return DiffKGModel.create(vocab, tiny_graph, tiny_config, np.random.default_rng(0))


@pytest.fixture
def reasoner_config():
    return ReasonerConfig(hops=2, eps=1e-12, top_k=2)
