import json
import logging
from pathlib import Path
from typing import Callable, IO, Iterator, List, Tuple

import portalocker

from services.errors import DataError

logger = logging.getLogger(__name__)


def _require(path: Path) -> None:
    if not path.exists():
        raise DataError(f"File not found: {path}")


def read_text(path) -> str:
    path = Path(path)
    _require(path)
    with open(path, "r", encoding="utf-8") as f:
        portalocker.lock(f, portalocker.LOCK_SH)
        content = f.read()
        portalocker.unlock(f)
    return content


def read_bytes(path) -> bytes:
    path = Path(path)
    _require(path)
    with open(path, "rb") as f:
        portalocker.lock(f, portalocker.LOCK_SH)
        content = f.read()
        portalocker.unlock(f)
    return content


def read_lines(path) -> Iterator[Tuple[int, str]]:
    """(line number, stripped line) for every nonblank line."""
    for line_no, line in enumerate(read_text(path).splitlines(), 1):
        line = line.strip()
        if line:
            yield line_no, line


def rewrite(path, write_fn: Callable[[IO], None], binary: bool = False) -> None:
    """Replace the whole file; the previous content is restored if the write fails."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    backup_file = path.with_suffix(path.suffix + ".backup")

    try:
        if path.exists():
            backup_file.write_bytes(path.read_bytes())

        with open(path, "wb" if binary else "w", **({} if binary else {"encoding": "utf-8"})) as f:
            portalocker.lock(f, portalocker.LOCK_EX)
            write_fn(f)
            portalocker.unlock(f)

        if backup_file.exists():
            backup_file.unlink()

    except Exception:
        if backup_file.exists():
            path.write_bytes(backup_file.read_bytes())
            backup_file.unlink()
        raise


def write_text(path, content: str) -> None:
    rewrite(path, lambda f: f.write(content))


def write_bytes(path, content: bytes) -> None:
    rewrite(path, lambda f: f.write(content), binary=True)


def write_json(path, payload) -> None:
    write_text(path, json.dumps(payload, indent=2, ensure_ascii=False) + "\n")


def append_line(path, line: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        portalocker.lock(f, portalocker.LOCK_EX)
        f.write(line.rstrip("\n") + "\n")
        portalocker.unlock(f)


def write_jsonl(path, records: List[dict]) -> int:
    def _write(f):
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")

    rewrite(path, _write)
    logger.info(f"Saved {len(records)} records to {path}")
    return len(records)
