"""Worker processes sharing one model; example chunks run against the caller's current parameters."""

import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

from models.dialogue import DialogueExample
from services.errors import UsageError
from services.model import DiffKGModel

logger = logging.getLogger(__name__)

T = TypeVar("T")
ChunkTask = Callable[[DiffKGModel, Sequence[DialogueExample]], List[T]]

_worker_model: Optional[DiffKGModel] = None


def _init_worker(model: DiffKGModel) -> None:
    global _worker_model
    _worker_model = model


def _run_chunk(task: ChunkTask, values, examples: Sequence[DialogueExample]) -> List[T]:
    _worker_model.params.restore(values)
    return task(_worker_model, examples)


def chunk_bounds(n: int, parts: int) -> List[Tuple[int, int]]:
    """Contiguous, nearly equal [start, stop) slices covering range(n) in order."""
    if parts < 1:
        raise UsageError(f"parts must be >= 1, got {parts}")
    base, extra = divmod(n, parts)
    bounds: List[Tuple[int, int]] = []
    start = 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        if size:
            bounds.append((start, start + size))
        start += size
    return bounds


class ExamplePool:
    """Maps a chunk task over examples, in-process for one worker and across spawned processes otherwise.

    Each call ships a snapshot of the model parameters, so workers always see the caller's current values.
    Results are concatenated in example order whatever the worker count. Tasks must be module-level
    functions so they pickle by reference.
    """

    def __init__(self, model: DiffKGModel, workers: int = 1):
        if workers < 1:
            raise UsageError(f"workers must be >= 1, got {workers}")
        self.model = model
        self.workers = workers
        self._executor: Optional[ProcessPoolExecutor] = None

    def __enter__(self) -> "ExamplePool":
        if self.workers > 1:
            self._executor = ProcessPoolExecutor(
                max_workers=self.workers,
                mp_context=multiprocessing.get_context("spawn"),
                initializer=_init_worker,
                initargs=(self.model,),
            )
            logger.info(f"🧵 Started {self.workers} worker processes")
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._executor is not None:
            self._executor.shutdown(cancel_futures=exc_type is not None)
            self._executor = None

    def map(self, task: ChunkTask, examples: Sequence[DialogueExample]) -> List[T]:
        examples = list(examples)
        if self._executor is None or len(examples) < 2:
            return task(self.model, examples)
        values = self.model.params.snapshot()
        futures = [self._executor.submit(_run_chunk, task, values, examples[start:stop])
                   for start, stop in chunk_bounds(len(examples), self.workers)]
        results: List[T] = []
        for future in futures:
            results.extend(future.result())
        return results
