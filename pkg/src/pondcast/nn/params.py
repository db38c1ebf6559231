"""Named parameter containers and seeded initialisers."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ParamSet:
    """Ordered, name-unique map of parameter tensors.

    Initialisers draw from a generator seeded with ``seed`` so that two sets
    built the same way are identical.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, name=name)
        self._params[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int, shape=None) -> Tensor:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        shape = (fan_in, fan_out) if shape is None else shape
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def uniform(self, name: str, shape, bound: float) -> Tensor:
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        """Total number of scalar entries."""
        return int(sum(t.data.size for t in self._params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} != {t.data.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values for {k}")
            t.data[...] = arr
