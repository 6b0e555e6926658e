"""End-to-end optimisation: combined loss, accumulation, clipping, Adam, best-checkpoint loop."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from models.dialogue import DialogueExample, ReasoningType
from services import diffmath as dm
from services import storage
from services.checkpoint import save_checkpoint
from services.config import TrainConfig
from services.diffmath import DiffValue, Tape
from services.errors import DataError, NumericError
from services.evaluation import evaluate
from services.kg_store import KnowledgeGraph, ReifiedKG
from services.model import DiffKGModel
from services.parallel import ExamplePool
from services.parameters import ParameterSet
from services.tokenizer import TokenVocab

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
METRICS_FILE = "metrics.tsv"
OPERATION_TYPES = (ReasoningType.SELECTION, ReasoningType.TRUE_FALSE)


def build_token_vocab(examples: Iterable[DialogueExample], graph: KnowledgeGraph) -> TokenVocab:
    """Training texts plus every entity and relation name."""
    texts: List[str] = []
    for example in examples:
        texts.extend(example.history)
        texts.append(example.response)
    texts.extend(graph.entities.names)
    texts.extend(graph.relations.names)
    return TokenVocab.build(texts)


def combined_loss(example: DialogueExample, model: DiffKGModel, kg: Optional[ReifiedKG] = None) -> DiffValue:
    """Response cross-entropy + λ·Σ_h −log r_h[gold relation], gold padded with ToSelf."""
    cfg = model.cfg
    # walk-only mode refuses these in predict_heads
    needs_operation = example.reasoning_type in OPERATION_TYPES
    result = model.forward(example, kg, with_operation=needs_operation)
    loss = model.response_loss(example, result)
    if cfg.path_loss_weight > 0:
        if example.gold_path:
            relation_term = model.relation_loss(example, result.heads)
            loss = dm.add(loss, dm.scale(relation_term, cfg.path_loss_weight))
        elif cfg.mode == "walk-only":
            raise DataError(f"{example.id or 'example'}: walk-only training with path_loss_weight > 0 "
                            f"needs a gold_path")
    return loss


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return grads, norm


class AdamOptimizer:
    def __init__(self, learning_rate: float, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParameterSet, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, param in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            param.value = param.value - self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


@dataclass
class TrainState:
    model: DiffKGModel
    optimizer: AdamOptimizer
    grad_sum: Dict[str, np.ndarray] = field(default_factory=dict)
    pending: int = 0
    micro_steps: int = 0
    updates: int = 0
    last_grad_norm: float = 0.0

    @classmethod
    def create(cls, model: DiffKGModel) -> "TrainState":
        return cls(model=model, optimizer=AdamOptimizer(model.cfg.learning_rate))


def example_gradients(example: DialogueExample, model: DiffKGModel,
                      kg: Optional[ReifiedKG] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    model.params.zero_grad()
    with Tape() as tape:
        loss = combined_loss(example, model, kg)
    try:
        tape.backward(loss)
    except NumericError as e:
        raise NumericError(f"{example.id or 'example'}: {e}") from None
    return float(loss.value), model.params.grads()


def _gradient_chunk(model: DiffKGModel, examples: Sequence[DialogueExample]) -> List[Tuple[float, Dict[str, np.ndarray]]]:
    return [example_gradients(example, model) for example in examples]


def apply_update(state: TrainState) -> None:
    """Average the accumulated gradients, clip, and take one Adam step."""
    if state.pending == 0:
        return
    cfg = state.model.cfg
    averaged = {name: g / state.pending for name, g in state.grad_sum.items()}
    clipped, state.last_grad_norm = clip_global_norm(averaged, cfg.max_grad_norm)
    state.optimizer.step(state.model.params, clipped)
    state.grad_sum = {}
    state.pending = 0
    state.updates += 1


def train_step(batch: Sequence[DialogueExample], state: TrainState, kg: Optional[ReifiedKG] = None,
               pool: Optional[ExamplePool] = None) -> Tuple[float, TrainState]:
    """One micro-batch; an update fires every grad_accum_steps micro-batches.

    Per-example gradients are summed in batch order, so a pool of any size gives the same bits.
    """
    if not batch:
        raise DataError("train_step needs a nonempty batch")
    if pool is not None and kg is None:
        results = pool.map(_gradient_chunk, batch)
    else:
        results = [example_gradients(example, state.model, kg) for example in batch]
    total = 0.0
    for loss, grads in results:
        total += loss
        for name, g in grads.items():
            if name in state.grad_sum:
                state.grad_sum[name] += g
            else:
                state.grad_sum[name] = g
        state.pending += 1
    state.micro_steps += 1
    if state.micro_steps % state.model.cfg.grad_accum_steps == 0:
        apply_update(state)
    return total / len(batch), state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    metrics: Dict[str, float]


@dataclass
class TrainResult:
    model: DiffKGModel
    metric_name: str
    best_metric: Optional[float]
    best_epoch: int
    history: List[EpochRecord] = field(default_factory=list)


def selection_metric(cfg: TrainConfig) -> str:
    return "path@1" if cfg.mode == "walk-only" else "em"


def _batches(examples: Sequence[DialogueExample], order: np.ndarray, size: int) -> Iterable[List[DialogueExample]]:
    for start in range(0, len(order), size):
        yield [examples[int(i)] for i in order[start:start + size]]


def _log_epoch(path: Path, record: EpochRecord, header: bool) -> None:
    names = sorted(record.metrics)
    if header:
        storage.append_line(path, "\t".join(["epoch", "train_loss"] + names))
    storage.append_line(path, "\t".join([str(record.epoch), f"{record.train_loss:.6f}"]
                                        + [f"{record.metrics[n]:.6f}" for n in names]))


def train_loop(cfg: TrainConfig, train: Sequence[DialogueExample], valid: Sequence[DialogueExample],
               graph: KnowledgeGraph, out_dir: Optional[str] = None,
               token_vocab: Optional[TokenVocab] = None, model: Optional[DiffKGModel] = None) -> TrainResult:
    """Train up to max_epochs, keeping the parameters with the best validation metric.

    Passing a model resumes from its parameters; its dimensions must match cfg.
    """
    if not train:
        raise DataError("Empty training split")
    if cfg.max_epochs > 0 and not valid:
        raise DataError("Best-checkpoint selection needs a nonempty validation split")

    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    if model is None:
        token_vocab = token_vocab or build_token_vocab(train, graph)
        model = DiffKGModel.create(token_vocab, graph, cfg, np.random.default_rng(init_seq))
    else:
        if (model.cfg.d, model.cfg.hops) != (cfg.d, cfg.hops):
            raise DataError(f"Cannot resume: checkpoint has d={model.cfg.d}, hops={model.cfg.hops}")
        model.cfg = cfg
    shuffle_rng = np.random.default_rng(shuffle_seq)
    metric_name = selection_metric(cfg)
    out = Path(out_dir) if out_dir else None
    metrics_path = out / METRICS_FILE if out else None
    if metrics_path is not None and metrics_path.exists():
        metrics_path.unlink()

    result = TrainResult(model=model, metric_name=metric_name, best_metric=None, best_epoch=0)
    if out is not None:
        save_checkpoint(out, model, epoch=0, metric_name=metric_name)

    state = TrainState.create(model)
    logger.info(f"🚀 Training on {len(train)} examples for up to {cfg.max_epochs} epochs ({cfg.mode} mode)")
    with ExamplePool(model, cfg.workers) as pool:
        best_snapshot = _run_epochs(cfg, train, valid, state, pool, shuffle_rng, out, result)

    model.params.restore(best_snapshot)
    logger.info(f"✅ Best {metric_name} {result.best_metric} at epoch {result.best_epoch}")
    return result


def _run_epochs(cfg: TrainConfig, train: Sequence[DialogueExample], valid: Sequence[DialogueExample],
                state: TrainState, pool: ExamplePool, shuffle_rng: np.random.Generator, out: Optional[Path],
                result: TrainResult) -> Dict[str, np.ndarray]:
    """Epoch loop; returns the snapshot with the best validation metric."""
    model = state.model
    metric_name = result.metric_name
    metrics_path = out / METRICS_FILE if out is not None else None
    best_snapshot = model.params.snapshot()
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        losses = []
        for batch in _batches(train, order, cfg.batch_size):
            loss, state = train_step(batch, state, pool=pool)
            losses.append(loss)
        apply_update(state)
        state.micro_steps = 0

        report, _ = evaluate(model, valid, pool=pool)
        metrics = {"em": report.exact_match, "f1": report.token_f1, "path@1": report.path_at.get(1, 0.0)}
        record = EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)), metrics=metrics)
        result.history.append(record)
        if metrics_path is not None:
            _log_epoch(metrics_path, record, header=epoch == 1)

        value = metrics[metric_name]
        logger.info(f"📈 Epoch {epoch}: loss {record.train_loss:.4f}, {metric_name} {value:.4f}")
        if result.best_metric is None or value > result.best_metric:
            result.best_metric, result.best_epoch = value, epoch
            best_snapshot = model.params.snapshot()
            if out is not None:
                save_checkpoint(out, model, epoch=epoch, metric_name=metric_name, best_metric=value)
        if cfg.patience is not None and epoch - result.best_epoch >= cfg.patience:
            logger.info(f"⏹️ No {metric_name} gain for {cfg.patience} epochs, stopping at epoch {epoch}")
            break
    return best_snapshot
