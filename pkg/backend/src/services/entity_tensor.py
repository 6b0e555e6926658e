from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from services import diffmath as dm
from services.diffmath import DiffValue
from services.errors import DataError
from services.kg_store import EntityVocab
from services.tokenizer import PAD_ID, TokenVocab


@dataclass(frozen=True)
class EntityTokenIndex:
    """Token ids of every entity name, zero-padded to a common length m."""

    token_ids: np.ndarray
    mask: np.ndarray

    @property
    def m(self) -> int:
        return self.token_ids.shape[1]

    @property
    def n_entities(self) -> int:
        return self.token_ids.shape[0]


def entity_token_index(entity_vocab: EntityVocab, token_vocab: TokenVocab,
                       m: Optional[int] = None) -> EntityTokenIndex:
    rows = []
    for name in entity_vocab.names:
        ids = token_vocab.encode(name)
        if not ids:
            raise DataError(f"Entity {name!r} tokenizes to zero tokens")
        rows.append(ids)
    longest = max(len(ids) for ids in rows)
    m = longest if m is None else m
    if m < longest:
        raise DataError(f"m={m} is shorter than the longest entity ({longest} tokens)")
    token_ids = np.full((len(rows), m), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), m), dtype=np.float64)
    for i, ids in enumerate(rows):
        token_ids[i, :len(ids)] = ids
        mask[i, :len(ids)] = 1.0
    return EntityTokenIndex(token_ids=token_ids, mask=mask)


@dataclass
class EntityEmbeddingTensor:
    """E ∈ R^{N_E × d × m}, derived from the shared token embedding table."""

    table: DiffValue
    index: EntityTokenIndex
    _values: Optional[DiffValue] = field(default=None, repr=False)
    _token_mean: Optional[DiffValue] = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.index.m

    @property
    def n_entities(self) -> int:
        return self.index.n_entities

    @property
    def d(self) -> int:
        return self.table.shape[1]

    @property
    def values(self) -> DiffValue:
        if self._values is None:
            gathered = dm.gather_rows(self.table, self.index.token_ids, self.index.mask)
            self._values = dm.transpose(gathered, (0, 2, 1))
        return self._values

    @property
    def token_mean(self) -> DiffValue:
        """Mean over the m token slots (padding included, fixed divisor m): N_E × d."""
        if self._token_mean is None:
            self._token_mean = dm.mean(self.values, axis=2)
        return self._token_mean

    def blocks(self, entity_ids: Sequence[int]) -> DiffValue:
        """E[ids] without materialising the whole tensor."""
        ids = np.asarray(entity_ids, dtype=np.int64)
        gathered = dm.gather_rows(self.table, self.index.token_ids[ids], self.index.mask[ids])
        return dm.transpose(gathered, (0, 2, 1))


def build_entity_tensor(entity_vocab: EntityVocab, token_vocab: TokenVocab, embedding_table: DiffValue,
                        m: Optional[int] = None,
                        index: Optional[EntityTokenIndex] = None) -> EntityEmbeddingTensor:
    if embedding_table.shape[0] != len(token_vocab):
        raise DataError(f"Embedding table has {embedding_table.shape[0]} rows for {len(token_vocab)} tokens")
    if index is None:
        index = entity_token_index(entity_vocab, token_vocab, m)
    return EntityEmbeddingTensor(table=embedding_table, index=index)
