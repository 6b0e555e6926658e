import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError

from models.checkpoint import BlockSpec, CheckpointManifest, ModelDims
from services import storage
from services.config import TrainConfig
from services.errors import DataError
from services.kg_store import KnowledgeGraph
from services.model import DiffKGModel
from services.parameters import ParameterSet
from services.tokenizer import RESERVED, TokenVocab

logger = logging.getLogger(__name__)

# execution knobs that do not change the trained parameters
RUNTIME_FIELDS = {"workers"}

MANIFEST_FILE = "manifest.json"
PARAMS_FILE = "params.bin"
BLOB_DTYPE = np.dtype("<f8")


def build_manifest(model: DiffKGModel, epoch: int = 0, metric_name: Optional[str] = None,
                   best_metric: Optional[float] = None) -> CheckpointManifest:
    graph = model.graph
    return CheckpointManifest(
        dims=ModelDims(
            vocab_size=len(model.token_vocab),
            d=model.cfg.d,
            hops=model.cfg.hops,
            n_entities=graph.kg.n_entities,
            n_relations=graph.kg.n_relations,
            m=model.entity_index.m,
        ),
        tokens=model.token_vocab.tokens,
        token_vocab_hash=model.token_vocab.content_hash(),
        entity_vocab_hash=graph.entities.content_hash(),
        relation_vocab_hash=graph.relations.content_hash(),
        config=model.cfg.model_dump(mode="json", exclude=RUNTIME_FIELDS),
        blocks=[BlockSpec(name=name, shape=shape) for name, shape in model.params.layout()],
        epoch=epoch,
        metric_name=metric_name,
        best_metric=best_metric,
    )


def save_checkpoint(path, model: DiffKGModel, epoch: int = 0, metric_name: Optional[str] = None,
                    best_metric: Optional[float] = None) -> CheckpointManifest:
    """Directory with manifest.json and one little-endian float64 blob in block order."""
    directory = Path(path)
    manifest = build_manifest(model, epoch, metric_name, best_metric)
    blob = np.concatenate([p.value.reshape(-1) for _, p in model.params.items()]).astype(BLOB_DTYPE)
    storage.write_bytes(directory / PARAMS_FILE, blob.tobytes())
    storage.write_json(directory / MANIFEST_FILE, manifest.model_dump(mode="json"))
    logger.info(f"💾 Saved checkpoint ({manifest.blob_size} values) to {directory}")
    return manifest


def read_manifest(path) -> CheckpointManifest:
    manifest_path = Path(path) / MANIFEST_FILE
    if not manifest_path.exists():
        raise DataError(f"No checkpoint manifest at {manifest_path}")
    try:
        return CheckpointManifest.model_validate(json.loads(storage.read_text(manifest_path)))
    except (json.JSONDecodeError, ValidationError) as e:
        raise DataError(f"Corrupt checkpoint manifest {manifest_path}: {e}") from None


def check_compatible(manifest: CheckpointManifest, graph: KnowledgeGraph) -> None:
    problems = []
    if manifest.entity_vocab_hash != graph.entities.content_hash():
        problems.append("entity vocabulary differs")
    if manifest.relation_vocab_hash != graph.relations.content_hash():
        problems.append("relation vocabulary differs")
    if manifest.dims.n_entities != graph.kg.n_entities or manifest.dims.n_relations != graph.kg.n_relations:
        problems.append("KG dimensions differ")
    if problems:
        raise DataError(f"Checkpoint does not match this KG: {', '.join(problems)}")


def load_checkpoint(path, graph: KnowledgeGraph) -> DiffKGModel:
    manifest = read_manifest(path)
    check_compatible(manifest, graph)

    token_vocab = TokenVocab(manifest.tokens[len(RESERVED):])
    if token_vocab.tokens != manifest.tokens or token_vocab.content_hash() != manifest.token_vocab_hash:
        raise DataError("Checkpoint token vocabulary does not match its recorded hash")

    raw = storage.read_bytes(Path(path) / PARAMS_FILE)
    expected = manifest.blob_size * BLOB_DTYPE.itemsize
    if len(raw) != expected:
        raise DataError(f"Parameter blob has {len(raw)} bytes, manifest declares {expected}")
    blob = np.frombuffer(raw, dtype=BLOB_DTYPE).astype(np.float64)

    params = ParameterSet()
    offset = 0
    for block in manifest.blocks:
        params.add(block.name, blob[offset: offset + block.size].reshape(block.shape))
        offset += block.size

    cfg = TrainConfig(**manifest.config)
    model = DiffKGModel(params, token_vocab, graph, cfg)
    if model.entity_index.m != manifest.dims.m:
        raise DataError(f"Entity token length {model.entity_index.m} differs from checkpoint m={manifest.dims.m}")
    logger.info(f"📦 Loaded checkpoint from {path} (epoch {manifest.epoch})")
    return model
