"""Desk-scale synthetic KG + dialogue generator and its symbolic executor.

Item entities are linked by functional relations (at most one tail per head and
relation) so every multi-hop question has a single answer. Relations along an
inform chain appear in increasing inventory order, which keeps the hop order
recoverable from the bag of question tokens.
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from itertools import zip_longest
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.dialogue import DialogueExample, ReasoningType
from services.config import REASONING_TYPES, SyntheticConfig
from services.errors import DataError, UsageError
from services.kg_store import StringTriple, normalize_name

logger = logging.getLogger(__name__)

DISTANCE = "distance"
RELATION_WORDS = (
    "author", "director", "founder", "owner", "partner", "mentor", "sponsor", "rival",
    "neighbor", "manager", "editor", "producer", "advisor", "supplier", "landlord", "coach",
)
ABSENT_ATTRIBUTES = ("phone", "email", "website", "parking", "price", "rating", "hours", "menu")
MAX_ATTEMPTS_PER_EXAMPLE = 200

_TRUE_FALSE_RE = re.compile(r"^is (?P<tail>\w+) the (?P<relation>\w+) of (?P<head>\w+) \?$")
_EXTRACTION_RE = re.compile(r"^what is the (?P<attribute>\w+) of (?P<head>\w+) \?$")


@dataclass
class SyntheticDataset:
    triples: List[StringTriple]
    train: List[DialogueExample]
    valid: List[DialogueExample]
    test: List[DialogueExample]
    counts: Dict[str, int] = field(default_factory=dict)

    @property
    def splits(self) -> Dict[str, List[DialogueExample]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


class SyntheticKG:
    """Functional item graph plus a numeric distance attribute per item."""

    def __init__(self, items: List[str], relations: List[str], links: Dict[Tuple[str, str], str],
                 distances: Dict[str, int]):
        self.items = items
        self.relations = relations
        self.links = links
        self.distances = distances

    @property
    def item_relations(self) -> List[str]:
        return [r for r in self.relations if r != DISTANCE]

    def triples(self) -> List[StringTriple]:
        triples = [(head, relation, tail) for (head, relation), tail in self.links.items()]
        triples.extend((item, DISTANCE, distance_name(d)) for item, d in self.distances.items())
        return triples


def distance_name(miles: int) -> str:
    return f"{miles} miles"


def relation_names(n_relations: int) -> List[str]:
    words = list(RELATION_WORDS[: n_relations - 1])
    words.extend(f"relation{i}" for i in range(len(words), n_relations - 1))
    return words + [DISTANCE]


def build_synthetic_kg(cfg: SyntheticConfig, rng: np.random.Generator) -> SyntheticKG:
    n_items = cfg.n_entities - cfg.n_values
    if n_items < 4:
        raise DataError("Too few item entities: raise n_entities or lower n_values")
    relations = relation_names(cfg.n_relations)
    item_relations = relations[:-1]
    n_links = cfg.n_triples - n_items
    capacity = n_items * len(item_relations)
    if n_links < 1 or n_links > capacity:
        raise DataError(f"n_triples={cfg.n_triples} cannot be realised: need {n_items + 1}..{n_items + capacity}")

    items = [f"ent{i}" for i in range(n_items)]
    slots = rng.choice(capacity, size=n_links, replace=False)
    links: Dict[Tuple[str, str], str] = {}
    for slot in np.sort(slots):
        head, rel = divmod(int(slot), len(item_relations))
        tail = int(rng.integers(n_items - 1))
        tail = tail + 1 if tail >= head else tail
        links[(items[head], item_relations[rel])] = items[tail]
    distances = {item: int(rng.integers(1, cfg.n_values + 1)) for item in items}
    return SyntheticKG(items, relations, links, distances)


def _nested_question(start: str, path: Sequence[str]) -> str:
    phrase = start
    for relation in path:
        phrase = f"the {relation} of {phrase}"
    return f"what is {phrase} ?"


def _respond(semantic: str, natural: str, form: str) -> str:
    return semantic if form == "semantic" else natural


class _ExampleFactory:
    def __init__(self, kg: SyntheticKG, cfg: SyntheticConfig):
        self.kg = kg
        self.cfg = cfg
        self.form = cfg.response_form

    def inform(self, rng: np.random.Generator) -> Optional[DialogueExample]:
        start = self.kg.items[int(rng.integers(len(self.kg.items)))]
        length = int(rng.integers(1, self.cfg.hops_max + 1))
        path: List[str] = []
        current = start
        last = -1
        for _ in range(length):
            options = [i for i, r in enumerate(self.kg.item_relations) if i > last and (current, r) in self.kg.links]
            if not options:
                break
            last = options[int(rng.integers(len(options)))]
            relation = self.kg.item_relations[last]
            path.append(relation)
            current = self.kg.links[(current, relation)]
        if len(path) != length:
            return None
        return DialogueExample(
            history=[_nested_question(start, path)],
            response=_respond(f"inform {current}", f"the {path[-1]} is {current}", self.form),
            initial_entities=[start],
            gold_path=path,
            reasoning_type=ReasoningType.INFORM,
            domain="synthetic",
        )

    def selection(self, rng: np.random.Generator) -> Optional[DialogueExample]:
        n = int(rng.integers(2, 5))
        picks = rng.choice(len(self.kg.items), size=n, replace=False)
        candidates = [self.kg.items[int(i)] for i in picks]
        miles = [self.kg.distances[c] for c in candidates]
        if len(set(miles)) != len(miles):
            return None
        nearest = bool(rng.integers(2))
        winner = candidates[int(np.argmin(miles) if nearest else np.argmax(miles))]
        superlative = "nearest" if nearest else "farthest"
        return DialogueExample(
            history=[f"which of {' , '.join(candidates)} is the {superlative} ?"],
            response=_respond(f"inform {winner}", f"{winner} is the {superlative} one", self.form),
            initial_entities=candidates,
            reasoning_type=ReasoningType.SELECTION,
            domain="synthetic",
        )

    def true_false(self, rng: np.random.Generator, positive: bool) -> Optional[DialogueExample]:
        keys = list(self.kg.links)
        head, relation = keys[int(rng.integers(len(keys)))]
        tail = self.kg.links[(head, relation)]
        if not positive:
            others = [item for item in self.kg.items if item not in (tail, head)]
            tail = others[int(rng.integers(len(others)))]
        return DialogueExample(
            history=[f"is {tail} the {relation} of {head} ?"],
            response=_respond("true" if positive else "false",
                              "yes that is right" if positive else "no that is not right", self.form),
            initial_entities=[head],
            gold_path=[relation],
            reasoning_type=ReasoningType.TRUE_FALSE,
            domain="synthetic",
        )

    def extraction(self, rng: np.random.Generator) -> Optional[DialogueExample]:
        head = self.kg.items[int(rng.integers(len(self.kg.items)))]
        attribute = ABSENT_ATTRIBUTES[int(rng.integers(len(ABSENT_ATTRIBUTES)))]
        return DialogueExample(
            history=[f"what is the {attribute} of {head} ?"],
            response=_respond(f"include {attribute}", f"sorry i do not have the {attribute}", self.form),
            initial_entities=[head],
            reasoning_type=ReasoningType.EXTRACTION,
            domain="synthetic",
        )


def type_counts(mix: Dict[str, float], n_examples: int) -> Dict[str, int]:
    """Largest-remainder apportionment of n_examples over the mix."""
    exact = {name: mix.get(name, 0.0) * n_examples for name in REASONING_TYPES}
    counts = {name: int(np.floor(value)) for name, value in exact.items()}
    leftover = n_examples - sum(counts.values())
    order = sorted(REASONING_TYPES, key=lambda name: (-(exact[name] - counts[name]), REASONING_TYPES.index(name)))
    for name in order[:leftover]:
        counts[name] += 1
    return counts


def _child(parent: np.random.SeedSequence, index: int) -> np.random.SeedSequence:
    """The child spawn() would hand out at that position, without spawn's counter."""
    return np.random.SeedSequence(parent.entropy, spawn_key=parent.spawn_key + (index,))


def _attempt_rng(parent: np.random.SeedSequence, attempt: int) -> np.random.Generator:
    return np.random.default_rng(_child(parent, attempt))


def _collect(name: str, count: int, make: Callable[[int], Optional[DialogueExample]], seen: set,
             executor: Optional[ThreadPoolExecutor] = None) -> List[DialogueExample]:
    """Attempts are built independently, possibly in parallel, and accepted in attempt order."""
    examples: List[DialogueExample] = []
    limit = MAX_ATTEMPTS_PER_EXAMPLE * max(count, 1)
    attempt = 0
    while len(examples) < count:
        if attempt >= limit:
            raise DataError(f"Could not generate {count} distinct {name} examples; config is unsatisfiable")
        indices = range(attempt, min(attempt + 2 * (count - len(examples)), limit))
        attempt = indices.stop
        candidates = executor.map(make, indices) if executor is not None else map(make, indices)
        for example in candidates:
            if len(examples) == count:
                break
            if example is None:
                continue
            key = normalize_name(example.history_text)
            if key in seen:
                continue
            seen.add(key)
            examples.append(example)
    return examples


def gen_synthetic(cfg: SyntheticConfig, workers: int = 1) -> SyntheticDataset:
    """Generate the KG and the splits; the result does not depend on workers."""
    if workers < 1:
        raise UsageError(f"workers must be >= 1, got {workers}")
    kg_seq, split_seq, *type_seqs = np.random.SeedSequence(cfg.seed).spawn(2 + len(REASONING_TYPES))
    kg = build_synthetic_kg(cfg, np.random.default_rng(kg_seq))
    factory = _ExampleFactory(kg, cfg)
    counts = type_counts(cfg.mix, cfg.n_examples)

    seqs = dict(zip(REASONING_TYPES, type_seqs))
    makers: Dict[str, Callable[[int], Optional[DialogueExample]]] = {
        "inform": lambda i: factory.inform(_attempt_rng(seqs["inform"], i)),
        "selection": lambda i: factory.selection(_attempt_rng(seqs["selection"], i)),
        "true": lambda i: factory.true_false(_attempt_rng(_child(seqs["true_false"], 0), i), positive=True),
        "false": lambda i: factory.true_false(_attempt_rng(_child(seqs["true_false"], 1), i), positive=False),
        "extraction": lambda i: factory.extraction(_attempt_rng(seqs["extraction"], i)),
    }

    seen: set = set()
    examples: List[DialogueExample] = []
    with ThreadPoolExecutor(max_workers=workers) if workers > 1 else nullcontext() as executor:
        for name in REASONING_TYPES:
            if name == "true_false":
                # alternating true, false, true, ... claims
                n_true = (counts[name] + 1) // 2
                claims = zip_longest(_collect("true", n_true, makers["true"], seen, executor),
                                     _collect("false", counts[name] - n_true, makers["false"], seen, executor))
                examples.extend(example for pair in claims for example in pair if example is not None)
            else:
                examples.extend(_collect(name, counts[name], makers[name], seen, executor))
            logger.info(f"🧪 Generated {counts[name]} {name} examples")

    order = np.random.default_rng(split_seq).permutation(len(examples))
    examples = [examples[int(i)].model_copy(update={"id": f"syn-{rank}"}) for rank, i in enumerate(order)]

    executor = SymbolicExecutor(kg.triples())
    for example in examples:
        if executor.answer(example, cfg.response_form) != example.response:
            raise DataError(f"Generated example {example.id} is inconsistent with its KG")

    n_test, n_valid = cfg.test_size, cfg.valid_size
    test = examples[len(examples) - n_test:]
    valid = examples[len(examples) - n_test - n_valid: len(examples) - n_test]
    train = examples[: len(examples) - n_test - n_valid]
    return SyntheticDataset(triples=kg.triples(), train=train, valid=valid, test=test, counts=counts)


class SymbolicExecutor:
    """Hard symbolic re-derivation of a synthetic example's response from the triples."""

    def __init__(self, triples: Sequence[StringTriple]):
        self.links: Dict[Tuple[str, str], str] = {}
        self.relations = set()
        for head, relation, tail in triples:
            self.links[(normalize_name(head), normalize_name(relation))] = tail
            self.relations.add(normalize_name(relation))

    def follow(self, start: str, path: Sequence[str]) -> Optional[str]:
        current = start
        for relation in path:
            current = self.links.get((normalize_name(current), normalize_name(relation)))
            if current is None:
                return None
        return current

    def _miles(self, item: str) -> int:
        value = self.links.get((normalize_name(item), DISTANCE))
        if value is None:
            raise DataError(f"{item} has no {DISTANCE}")
        return int(value.split()[0])

    def answer(self, example: DialogueExample, form: str = "semantic") -> str:
        question = example.history[-1].strip().lower()
        kind = example.reasoning_type
        if kind == ReasoningType.INFORM:
            answer = self.follow(example.initial_entities[0], example.gold_path or [])
            if answer is None:
                raise DataError(f"{example.id}: gold path does not resolve")
            return _respond(f"inform {answer}", f"the {example.gold_path[-1]} is {answer}", form)
        if kind == ReasoningType.SELECTION:
            nearest = "nearest" in question.split()
            miles = [self._miles(c) for c in example.initial_entities]
            pick = int(np.argmin(miles) if nearest else np.argmax(miles))
            winner = example.initial_entities[pick]
            superlative = "nearest" if nearest else "farthest"
            return _respond(f"inform {winner}", f"{winner} is the {superlative} one", form)
        if kind == ReasoningType.TRUE_FALSE:
            match = _TRUE_FALSE_RE.match(question)
            if not match:
                raise DataError(f"{example.id}: not a true/false question")
            tail = self.follow(match.group("head"), [match.group("relation")])
            holds = tail is not None and normalize_name(tail) == match.group("tail")
            return _respond("true" if holds else "false",
                            "yes that is right" if holds else "no that is not right", form)
        if kind == ReasoningType.EXTRACTION:
            match = _EXTRACTION_RE.match(question)
            if not match or match.group("attribute") in self.relations:
                raise DataError(f"{example.id}: not an extraction question")
            attribute = match.group("attribute")
            return _respond(f"include {attribute}", f"sorry i do not have the {attribute}", form)
        raise DataError(f"{example.id}: no reasoning type")
