"""Ordered, named collections of float64 arrays."""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable

import numpy as np

from .tensor import ContractError


class ParameterSet(dict):
    """Insertion-ordered ``name -> ndarray`` mapping.

    Holds model weights, EMA teachers, gradients and landscape directions.
    Arrays are treated as values: helpers always return new arrays.
    """

    def copy(self) -> "ParameterSet":
        return ParameterSet((k, np.array(v, dtype=np.float64, copy=True)) for k, v in self.items())

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet((k, np.zeros_like(v)) for k, v in self.items())

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParameterSet":
        return ParameterSet((k, fn(k, v)) for k, v in self.items())

    def subset(self, names: Iterable[str]) -> "ParameterSet":
        return ParameterSet((k, self[k]) for k in names)

    def num_values(self) -> int:
        return int(sum(v.size for v in self.values()))

    def check_compatible(self, other: "ParameterSet", what: str = "parameter sets") -> None:
        """Raise :class:`ContractError` unless names and shapes agree."""
        missing = [k for k in self if k not in other]
        extra = [k for k in other if k not in self]
        if missing or extra:
            raise ContractError(f"{what} disagree: missing {missing}, unexpected {extra}")
        bad = [k for k in self if np.shape(self[k]) != np.shape(other[k])]
        if bad:
            detail = ", ".join(f"{k}: {np.shape(self[k])} vs {np.shape(other[k])}" for k in bad)
            raise ContractError(f"{what} disagree in shape: {detail}")

    def digest(self) -> str:
        """SHA-256 over names, shapes and little-endian value bytes."""
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(repr(tuple(v.shape)).encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def bitwise_equal(self, other: "ParameterSet") -> bool:
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape
            and np.ascontiguousarray(self[k], "<f8").tobytes() == np.ascontiguousarray(other[k], "<f8").tobytes()
            for k in self
        )
