import json
import logging
from typing import List, Optional, Sequence

from pydantic import ValidationError

from models.dialogue import DialogueExample
from services import storage
from services.errors import DataError
from services.kg_store import RelationVocab

logger = logging.getLogger(__name__)


def load_dialogues(path, relations: Optional[RelationVocab] = None) -> List[DialogueExample]:
    """One DialogueExample per JSON line; errors name the offending line."""
    examples: List[DialogueExample] = []
    for line_no, line in storage.read_lines(path):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{line_no}: malformed JSON ({e.msg})") from None
        try:
            example = DialogueExample.model_validate(record)
        except ValidationError as e:
            problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
            raise DataError(f"{path}:{line_no}: {problems}") from None
        if relations is not None:
            check_gold_path(example, relations, where=f"{path}:{line_no}")
        examples.append(example)
    logger.info(f"📥 Loaded {len(examples)} dialogues from {path}")
    return examples


def check_gold_path(example: DialogueExample, relations: RelationVocab, where: str = "") -> None:
    if not example.gold_path:
        return
    unknown = [name for name in example.gold_path if name not in relations]
    if unknown:
        label = where or example.id or "example"
        raise DataError(f"{label}: gold_path relations not in KG: {', '.join(unknown)}")


def save_dialogues(path, examples: Sequence[DialogueExample]) -> int:
    return storage.write_jsonl(path, [ex.model_dump(mode="json", exclude_none=True) for ex in examples])
