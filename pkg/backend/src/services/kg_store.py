import hashlib
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import portalocker
import scipy.sparse as sp

from services.errors import DataError

logger = logging.getLogger(__name__)

TO_SELF = "ToSelf"

StringTriple = Tuple[str, str, str]
IndexTriple = Tuple[int, int, int]


def normalize_name(name: str) -> str:
    """Lowercase and collapse internal whitespace."""
    return re.sub(r"\s+", " ", name.strip()).lower()


class Vocab:
    """Bidirectional name <-> index map; indices follow first appearance."""

    def __init__(self, names: Iterable[str] = ()):
        self._index: Dict[str, int] = {}
        self._display: List[str] = []
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        key = normalize_name(name)
        if key not in self._index:
            self._index[key] = len(self._display)
            self._display.append(name.strip())
        return self._index[key]

    def lookup(self, name: str) -> int:
        try:
            return self._index[normalize_name(name)]
        except KeyError:
            raise DataError(f"Unknown name: {name!r}") from None

    def get(self, name: str) -> Optional[int]:
        return self._index.get(normalize_name(name))

    def __contains__(self, name: str) -> bool:
        return normalize_name(name) in self._index

    def name(self, index: int) -> str:
        return self._display[index]

    @property
    def names(self) -> List[str]:
        return list(self._display)

    def __len__(self) -> int:
        return len(self._display)

    def copy(self) -> "Vocab":
        return type(self)(self._display)

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self._display).encode("utf-8")).hexdigest()


class EntityVocab(Vocab):
    pass


class RelationVocab(Vocab):
    pass


@dataclass(frozen=True)
class ReifiedKG:
    """Three triple-indexed one-hot CSR matrices: head, relation, tail."""

    m_h: sp.csr_matrix
    m_r: sp.csr_matrix
    m_t: sp.csr_matrix

    @property
    def n_triples(self) -> int:
        return self.m_h.shape[0]

    @property
    def n_entities(self) -> int:
        return self.m_h.shape[1]

    @property
    def n_relations(self) -> int:
        return self.m_r.shape[1]

    @property
    def nnz(self) -> int:
        return self.m_h.nnz + self.m_r.nnz + self.m_t.nnz

    @property
    def nbytes(self) -> int:
        return sum(m.data.nbytes + m.indices.nbytes + m.indptr.nbytes for m in (self.m_h, self.m_r, self.m_t))

    # one nonzero per row, so the column indices are the dense decode
    @property
    def heads(self) -> np.ndarray:
        return self.m_h.indices

    @property
    def relations(self) -> np.ndarray:
        return self.m_r.indices

    @property
    def tails(self) -> np.ndarray:
        return self.m_t.indices

    def triples(self) -> List[IndexTriple]:
        return list(zip(self.heads.tolist(), self.relations.tolist(), self.tails.tolist()))


@dataclass(frozen=True)
class KnowledgeGraph:
    kg: ReifiedKG
    entities: EntityVocab
    relations: RelationVocab

    def stats(self) -> Dict[str, int]:
        return {
            "n_entities": self.kg.n_entities,
            "n_relations": self.kg.n_relations,
            "n_triples": self.kg.n_triples,
            "nnz": self.kg.nnz,
            "bytes": self.kg.nbytes,
        }


def _check_name(name: str, line: str) -> None:
    if "\t" in name or "\n" in name or "\r" in name:
        raise DataError(f"Illegal TAB/newline in name on line: {line!r}")
    if not name.strip():
        raise DataError(f"Empty name on line: {line!r}")


def dedup_triples(triples: Iterable[StringTriple]) -> List[StringTriple]:
    seen = set()
    unique: List[StringTriple] = []
    for head, relation, tail in triples:
        key = (normalize_name(head), normalize_name(relation), normalize_name(tail))
        if key in seen:
            continue
        seen.add(key)
        unique.append((head, relation, tail))
    return unique


def build_vocabs(triples: Sequence[StringTriple]) -> Tuple[EntityVocab, RelationVocab]:
    if not triples:
        raise DataError("empty KG")
    entities, relations = EntityVocab(), RelationVocab()
    for triple in triples:
        line = "\t".join(triple)
        for name in triple:
            _check_name(name, line)
        head, relation, tail = triple
        entities.add(head)
        relations.add(relation)
        entities.add(tail)
    return entities, relations


def index_triples(triples: Sequence[StringTriple], entities: EntityVocab,
                  relations: RelationVocab) -> List[IndexTriple]:
    return [(entities.lookup(h), relations.lookup(r), entities.lookup(t)) for h, r, t in triples]


def _one_hot_rows(columns: np.ndarray, width: int) -> sp.csr_matrix:
    n = columns.shape[0]
    index_dtype = np.int32 if max(n, width) < 2 ** 31 - 1 else np.int64
    return sp.csr_matrix(
        (np.ones(n, dtype=np.float64), columns.astype(index_dtype), np.arange(n + 1, dtype=index_dtype)),
        shape=(n, width),
    )


def reify_arrays(heads: np.ndarray, rels: np.ndarray, tails: np.ndarray,
                 n_entities: int, n_relations: int) -> ReifiedKG:
    heads, rels, tails = (np.asarray(a, dtype=np.int64) for a in (heads, rels, tails))
    if not (heads.shape == rels.shape == tails.shape):
        raise DataError("reify: head/relation/tail arrays differ in length")
    for name, arr, bound in (("head", heads, n_entities), ("relation", rels, n_relations), ("tail", tails, n_entities)):
        if arr.size and (arr.min() < 0 or arr.max() >= bound):
            raise DataError(f"reify: {name} index out of range [0, {bound})")
    return ReifiedKG(
        m_h=_one_hot_rows(heads, n_entities),
        m_r=_one_hot_rows(rels, n_relations),
        m_t=_one_hot_rows(tails, n_entities),
    )


def reify(triples: Sequence[IndexTriple], vocabs: Tuple[EntityVocab, RelationVocab]) -> ReifiedKG:
    entities, relations = vocabs
    arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    return reify_arrays(arr[:, 0], arr[:, 1], arr[:, 2], len(entities), len(relations))


def add_to_self(kg: ReifiedKG, entity_vocab: EntityVocab,
                relation_vocab: RelationVocab) -> Tuple[ReifiedKG, RelationVocab]:
    """Append one (e, ToSelf, e) row per entity after the original rows.

    Returns the augmented KG with a copy of the relation vocab that ends in ToSelf; the caller's vocab is
    left as it was.
    """
    if TO_SELF in relation_vocab:
        raise DataError("KG already augmented with ToSelf")
    if len(entity_vocab) != kg.n_entities:
        raise DataError("add_to_self: entity vocab does not match KG")
    relation_vocab = relation_vocab.copy()
    to_self = relation_vocab.add(TO_SELF)
    n_e = kg.n_entities
    loops = np.arange(n_e, dtype=np.int64)
    augmented = reify_arrays(
        np.concatenate([kg.heads, loops]),
        np.concatenate([kg.relations, np.full(n_e, to_self, dtype=np.int64)]),
        np.concatenate([kg.tails, loops]),
        n_e,
        len(relation_vocab),
    )
    return augmented, relation_vocab


def initial_entity_vector(names: Sequence[str], vocab: EntityVocab) -> np.ndarray:
    if not names:
        raise DataError("No initial entities given")
    missing = [name for name in names if name not in vocab]
    if missing:
        raise DataError(f"Unresolved initial entities: {', '.join(missing)}")
    vector = np.zeros(len(vocab), dtype=np.float64)
    for name in names:
        vector[vocab.lookup(name)] = 1.0
    return vector


def permute_triples(kg: ReifiedKG, permutation: Sequence[int]) -> ReifiedKG:
    perm = np.asarray(permutation, dtype=np.int64)
    if perm.shape != (kg.n_triples,) or not np.array_equal(np.sort(perm), np.arange(kg.n_triples)):
        raise DataError("permute_triples: permutation is not a bijection on the triple rows")
    return reify_arrays(kg.heads[perm], kg.relations[perm], kg.tails[perm], kg.n_entities, kg.n_relations)


def build_knowledge_graph(triples: Sequence[StringTriple], augment: bool = True) -> KnowledgeGraph:
    unique = dedup_triples(triples)
    if len(unique) < len(triples):
        logger.info(f"Collapsed {len(triples) - len(unique)} duplicate triples")
    entities, relations = build_vocabs(unique)
    kg = reify(index_triples(unique, entities, relations), (entities, relations))
    if augment:
        kg, relations = add_to_self(kg, entities, relations)
    return KnowledgeGraph(kg=kg, entities=entities, relations=relations)


def outgoing(kg: ReifiedKG, frontier: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Relations and tails of every triple whose head is in the frontier."""
    selected = np.isin(kg.heads, frontier)
    return kg.relations[selected], kg.tails[selected]


class TripleStore:
    """TSV triple file: head TAB relation TAB tail; '#' lines are comments."""

    def __init__(self, path: str):
        self.path = Path(path)

    def read(self) -> List[StringTriple]:
        if not self.path.exists():
            raise DataError(f"Triple file not found: {self.path}")
        triples: List[StringTriple] = []
        with open(self.path, "r", encoding="utf-8") as f:
            portalocker.lock(f, portalocker.LOCK_SH)
            for line_no, raw in enumerate(f, 1):
                line = raw.rstrip("\n").rstrip("\r")
                if not line.strip() or line.startswith("#"):
                    continue
                fields = line.split("\t")
                if len(fields) != 3 or not all(field.strip() for field in fields):
                    portalocker.unlock(f)
                    raise DataError(f"{self.path}:{line_no}: expected head<TAB>relation<TAB>tail")
                triples.append((fields[0].strip(), fields[1].strip(), fields[2].strip()))
            portalocker.unlock(f)
        return triples

    def write(self, triples: Iterable[StringTriple]) -> int:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        count = 0
        with open(self.path, "w", encoding="utf-8") as f:
            portalocker.lock(f, portalocker.LOCK_EX)
            for triple in triples:
                line = "\t".join(triple)
                for name in triple:
                    _check_name(name, line)
                f.write(line + "\n")
                count += 1
            portalocker.unlock(f)
        logger.info(f"Wrote {count} triples to {self.path}")
        return count


def load_knowledge_graph(path: str, augment: bool = True) -> KnowledgeGraph:
    return build_knowledge_graph(TripleStore(path).read(), augment=augment)
