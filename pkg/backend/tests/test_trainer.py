import json

import numpy as np
import pytest

from conftest import TINY_TRIPLES
from models.dialogue import DialogueExample, ReasoningType
from services.checkpoint import MANIFEST_FILE, PARAMS_FILE, load_checkpoint, read_manifest, save_checkpoint
from services.config import GradcheckConfig
from services.errors import DataError, UsageError
from services.gradcheck import run_gradcheck
from services.kg_store import TO_SELF, build_knowledge_graph
from services.model import DiffKGModel
from services.parallel import ExamplePool, chunk_bounds
from services.parameters import ParameterSet
from services.trainer import (
    METRICS_FILE,
    AdamOptimizer,
    TrainState,
    build_token_vocab,
    clip_global_norm,
    combined_loss,
    selection_metric,
    train_loop,
    train_step,
)


def fresh_model(graph, examples, cfg, seed=0):
    return DiffKGModel.create(build_token_vocab(examples, graph), graph, cfg, np.random.default_rng(seed))


def assert_same_params(a, b):
    assert list(a.params) == list(b.params)
    for name, param in a.params.items():
        assert np.array_equal(param.value, b.params[name].value), name


def test_token_vocab_covers_kg_names(tiny_graph, tiny_examples):
    vocab = build_token_vocab(tiny_examples, tiny_graph)
    for token in ("chevron", "gas", "station", "miles", "hastime", "toself", "inform"):
        assert vocab.encode(token) != [1]


def test_gold_relations_padded_with_to_self(tiny_model, tiny_examples, tiny_graph):
    relations = tiny_graph.relations
    assert tiny_model.gold_relations(tiny_examples[0]) == [relations.lookup("HasTime"), relations.lookup(TO_SELF)]
    too_long = tiny_examples[0].model_copy(update={"gold_path": ["HasTime"] * 3})
    with pytest.raises(DataError):
        tiny_model.gold_relations(too_long)


def test_zero_path_weight_is_response_loss(tiny_graph, tiny_examples, tiny_config):
    model = fresh_model(tiny_graph, tiny_examples, tiny_config.model_copy(update={"path_loss_weight": 0.0}))
    example = tiny_examples[0]
    expected = model.response_loss(example, model.forward(example))
    assert float(combined_loss(example, model).value) == float(expected.value)


def test_path_weight_adds_relation_term(tiny_graph, tiny_examples, tiny_config):
    model = fresh_model(tiny_graph, tiny_examples, tiny_config.model_copy(update={"path_loss_weight": 0.5}))
    example = tiny_examples[1]
    result = model.forward(example)
    expected = float(model.response_loss(example, result).value) + 0.5 * float(
        model.relation_loss(example, result.heads).value)
    assert abs(float(combined_loss(example, model).value) - expected) < 1e-12


def test_walk_only_needs_gold_path(tiny_graph, tiny_examples, tiny_config):
    model = fresh_model(tiny_graph, tiny_examples, tiny_config.model_copy(update={"mode": "walk-only"}))
    unlabelled = tiny_examples[0].model_copy(update={"gold_path": None})
    with pytest.raises(DataError, match="gold_path"):
        combined_loss(unlabelled, model)
    model.cfg = model.cfg.model_copy(update={"path_loss_weight": 0.0})
    assert float(combined_loss(unlabelled, model).value) > 0


def test_operation_supervision_in_full_mode(tiny_model, tiny_examples):
    claim = DialogueExample(history=["is 7pm the time of the tennis activity ?"], response="inform 7pm",
                            initial_entities=["tennis activity"], gold_path=["HasTime"],
                            reasoning_type=ReasoningType.TRUE_FALSE)
    assert np.isfinite(float(combined_loss(claim, tiny_model).value))


def test_walk_only_refuses_operation_examples(tiny_graph, tiny_examples, tiny_config):
    model = fresh_model(tiny_graph, tiny_examples, tiny_config.model_copy(update={"mode": "walk-only"}))
    claim = DialogueExample(history=["is 7pm the time of the tennis activity ?"], response="true",
                            initial_entities=["tennis activity"], gold_path=["HasTime"],
                            reasoning_type=ReasoningType.TRUE_FALSE)
    with pytest.raises(UsageError, match="operation layer"):
        combined_loss(claim, model)
    assert np.isfinite(float(combined_loss(tiny_examples[0], model).value))


def test_clip_global_norm():
    clipped, norm = clip_global_norm({"a": np.array([2.0, 0.0])}, 1.0)
    assert norm == 2.0
    assert clipped["a"].tolist() == [1.0, 0.0]
    unchanged, norm = clip_global_norm({"a": np.array([0.3]), "b": np.array([[0.4]])}, 1.0)
    assert abs(norm - 0.5) < 1e-15
    assert unchanged["a"].tolist() == [0.3]


def test_adam_first_step_moves_by_learning_rate():
    params = ParameterSet()
    params.add("w", np.array([1.0, 1.0, 1.0]))
    AdamOptimizer(0.1).step(params, {"w": np.array([0.5, -2.0, 0.0])})
    assert np.allclose(params["w"].value, [0.9, 1.1, 1.0], atol=1e-6)


def test_accumulation_matches_large_batch(tiny_graph, tiny_examples, tiny_config):
    big = tiny_config.model_copy(update={"batch_size": 4, "grad_accum_steps": 1})
    small = tiny_config.model_copy(update={"batch_size": 2, "grad_accum_steps": 2})
    state_big = TrainState.create(fresh_model(tiny_graph, tiny_examples, big))
    state_small = TrainState.create(fresh_model(tiny_graph, tiny_examples, small))

    train_step(tiny_examples, state_big)
    train_step(tiny_examples[:2], state_small)
    assert state_small.updates == 0
    train_step(tiny_examples[2:], state_small)
    assert state_big.updates == state_small.updates == 1
    for name, param in state_big.model.params.items():
        assert np.allclose(param.value, state_small.model.params[name].value, atol=1e-12, rtol=0), name


def test_train_step_reduces_loss_on_repeated_batch(tiny_graph, tiny_examples, tiny_config):
    cfg = tiny_config.model_copy(update={"learning_rate": 0.05})
    state = TrainState.create(fresh_model(tiny_graph, tiny_examples, cfg))
    first, _ = train_step(tiny_examples, state)
    for _ in range(10):
        last, _ = train_step(tiny_examples, state)
    assert last < first
    assert state.last_grad_norm > 0


def test_training_is_deterministic(tiny_graph, tiny_examples, tiny_config):
    first = train_loop(tiny_config, tiny_examples, tiny_examples[:2], tiny_graph)
    second = train_loop(tiny_config, tiny_examples, tiny_examples[:2], tiny_graph)
    assert_same_params(first.model, second.model)
    assert first.history[0].train_loss == second.history[0].train_loss


def test_chunk_bounds_cover_in_order():
    assert chunk_bounds(7, 3) == [(0, 3), (3, 5), (5, 7)]
    assert chunk_bounds(2, 4) == [(0, 1), (1, 2)]
    assert chunk_bounds(0, 2) == []
    with pytest.raises(UsageError):
        chunk_bounds(3, 0)


def test_worker_pool_gives_identical_updates(tiny_graph, tiny_examples, tiny_config):
    serial = TrainState.create(fresh_model(tiny_graph, tiny_examples, tiny_config))
    pooled = TrainState.create(fresh_model(tiny_graph, tiny_examples, tiny_config))
    with ExamplePool(pooled.model, workers=2) as pool:
        for _ in range(2):
            serial_loss, _ = train_step(tiny_examples, serial)
            pooled_loss, _ = train_step(tiny_examples, pooled, pool=pool)
            assert serial_loss == pooled_loss
    assert serial.updates == pooled.updates == 2
    assert_same_params(serial.model, pooled.model)


def test_train_loop_ignores_worker_count(tiny_graph, tiny_examples, tiny_config):
    first = train_loop(tiny_config, tiny_examples, tiny_examples[:2], tiny_graph)
    second = train_loop(tiny_config.model_copy(update={"workers": 2}), tiny_examples, tiny_examples[:2], tiny_graph)
    assert_same_params(first.model, second.model)
    assert first.history[-1].metrics == second.history[-1].metrics


def test_train_loop_writes_metrics_and_best_checkpoint(tmp_path, tiny_graph, tiny_examples, tiny_config):
    cfg = tiny_config.model_copy(update={"max_epochs": 2})
    result = train_loop(cfg, tiny_examples, tiny_examples[:2], tiny_graph, out_dir=str(tmp_path))
    assert result.metric_name == "em"
    assert len(result.history) == 2
    lines = (tmp_path / METRICS_FILE).read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch\ttrain_loss\tem\tf1\tpath@1"
    assert [line.split("\t")[0] for line in lines[1:]] == ["1", "2"]
    manifest = read_manifest(tmp_path)
    assert manifest.epoch == result.best_epoch
    assert manifest.best_metric == result.best_metric
    assert_same_params(load_checkpoint(tmp_path, tiny_graph), result.model)


def test_patience_stops_without_gain(tiny_graph, tiny_examples, tiny_config):
    cfg = tiny_config.model_copy(update={"max_epochs": 6, "patience": 1, "learning_rate": 1e-12})
    result = train_loop(cfg, tiny_examples, tiny_examples[:2], tiny_graph)
    assert result.best_epoch == 1
    assert len(result.history) == 2


def test_zero_epochs_returns_initial_model(tmp_path, tiny_graph, tiny_examples, tiny_config):
    cfg = tiny_config.model_copy(update={"max_epochs": 0})
    result = train_loop(cfg, tiny_examples, [], tiny_graph, out_dir=str(tmp_path))
    assert result.history == []
    assert result.best_metric is None
    assert read_manifest(tmp_path).epoch == 0
    assert_same_params(load_checkpoint(tmp_path, tiny_graph), result.model)


def test_train_loop_input_errors(tiny_graph, tiny_examples, tiny_config, tiny_model):
    with pytest.raises(DataError):
        train_loop(tiny_config, [], tiny_examples, tiny_graph)
    with pytest.raises(DataError, match="validation"):
        train_loop(tiny_config, tiny_examples, [], tiny_graph)
    with pytest.raises(DataError, match="resume"):
        train_loop(tiny_config.model_copy(update={"d": 4}), tiny_examples, tiny_examples, tiny_graph,
                   model=tiny_model)


def test_selection_metric(tiny_config):
    assert selection_metric(tiny_config) == "em"
    assert selection_metric(tiny_config.model_copy(update={"mode": "walk-only"})) == "path@1"


def test_checkpoint_round_trip(tmp_path, tiny_model, tiny_graph, tiny_examples):
    manifest = save_checkpoint(tmp_path, tiny_model, epoch=3, metric_name="em", best_metric=0.25)
    assert (tmp_path / PARAMS_FILE).stat().st_size == manifest.blob_size * 8
    loaded = load_checkpoint(tmp_path, tiny_graph)
    assert_same_params(loaded, tiny_model)
    assert loaded.token_vocab.tokens == tiny_model.token_vocab.tokens
    assert loaded.cfg == tiny_model.cfg
    assert loaded.infer(tiny_examples[0]).tokens == tiny_model.infer(tiny_examples[0]).tokens


def test_truncated_blob_rejected(tmp_path, tiny_model, tiny_graph):
    save_checkpoint(tmp_path, tiny_model)
    blob = tmp_path / PARAMS_FILE
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(DataError, match="bytes"):
        load_checkpoint(tmp_path, tiny_graph)


def test_checkpoint_refuses_other_kg(tmp_path, tiny_model):
    save_checkpoint(tmp_path, tiny_model)
    other = build_knowledge_graph(TINY_TRIPLES + [("dentist appointment", "HasTime", "9am")])
    with pytest.raises(DataError, match="entity vocabulary"):
        load_checkpoint(tmp_path, other)


def test_checkpoint_token_hash_checked(tmp_path, tiny_model, tiny_graph):
    save_checkpoint(tmp_path, tiny_model)
    path = tmp_path / MANIFEST_FILE
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest["tokens"][-1] = "tampered"
    path.write_text(json.dumps(manifest), encoding="utf-8")
    with pytest.raises(DataError, match="hash"):
        load_checkpoint(tmp_path, tiny_graph)


def test_corrupt_or_missing_manifest(tmp_path, tiny_graph):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path, tiny_graph)
    (tmp_path / MANIFEST_FILE).write_text("{", encoding="utf-8")
    with pytest.raises(DataError, match="Corrupt"):
        read_manifest(tmp_path)


@pytest.mark.parametrize("mode", ["full", "walk-only"])
def test_full_loss_gradient_check(mode):
    errors = run_gradcheck(GradcheckConfig(mode=mode))
    assert errors
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.slow
def test_single_example_overfits(tiny_graph, tiny_examples, tiny_config):
    cfg = tiny_config.model_copy(update={"d": 16, "learning_rate": 0.01, "batch_size": 1})
    example = tiny_examples[3]
    state = TrainState.create(fresh_model(tiny_graph, [example], cfg))
    loss = None
    for _ in range(500):
        loss, _ = train_step([example], state)
        if loss < 0.01:
            break
    assert loss < 0.01
    assert state.model.infer(example).text == example.response
