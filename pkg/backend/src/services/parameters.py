from collections import OrderedDict
from typing import Dict, Iterator, List, Tuple

import numpy as np

from services.diffmath import DiffValue
from services.errors import DataError

INIT_SCALE = 0.08


class ParameterSet:
    """Named, ordered trainable blocks; the order is the checkpoint block order."""

    def __init__(self):
        self._blocks: "OrderedDict[str, DiffValue]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> DiffValue:
        if name in self._blocks:
            raise DataError(f"Duplicate parameter block: {name}")
        param = DiffValue(np.array(value, dtype=np.float64), name=name)
        self._blocks[name] = param
        return param

    def uniform(self, name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> DiffValue:
        return self.add(name, rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> DiffValue:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> DiffValue:
        return self._blocks[name]

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def __iter__(self) -> Iterator[str]:
        return iter(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    def items(self):
        return self._blocks.items()

    def zero_grad(self) -> None:
        for param in self._blocks.values():
            param.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        return {name: p.grad.copy() for name, p in self._blocks.items()}

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._blocks.items()}

    def restore(self, values: Dict[str, np.ndarray]) -> None:
        for name, param in self._blocks.items():
            param.value = np.array(values[name], dtype=np.float64)

    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(name, tuple(p.shape)) for name, p in self._blocks.items()]

    @property
    def size(self) -> int:
        return sum(p.value.size for p in self._blocks.values())
