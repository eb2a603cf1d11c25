"""Flat parameter vector with a named layout back to model tensors."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractViolation


class LayoutEntry(NamedTuple):
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class ParamVector:
    """Ordered vector of all trainable scalars plus a (name, offset, shape) map.

    Layout entries must tile the data contiguously and without overlap.
    """

    __slots__ = ("data", "layout")

    def __init__(self, data, layout):
        self.data = np.asarray(data, dtype=np.float64).ravel()
        self.layout = tuple(
            LayoutEntry(name, int(off), tuple(int(s) for s in shape))
            for name, off, shape in layout
        )
        expected = 0
        for entry in self.layout:
            if entry.offset != expected:
                raise ContractViolation(
                    f"layout entry {entry.name!r} at offset {entry.offset}, expected {expected}"
                )
            expected += entry.size
        if expected != self.data.size:
            raise ContractViolation(
                f"layout covers {expected} scalars but data has {self.data.size}"
            )

    @classmethod
    def dense(cls, values, name: str = "theta") -> "ParamVector":
        """Single-entry vector for raw test functions."""
        arr = np.asarray(values, dtype=np.float64).ravel()
        return cls(arr, [(name, 0, (arr.size,))])

    @classmethod
    def concat(cls, parts: list[tuple[str, np.ndarray]]) -> "ParamVector":
        """Build from named arrays in order."""
        layout = []
        chunks = []
        offset = 0
        for name, arr in parts:
            arr = np.asarray(arr, dtype=np.float64)
            layout.append((name, offset, arr.shape))
            chunks.append(arr.ravel())
            offset += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(data, layout)

    def view(self, name: str) -> np.ndarray:
        """Reshaped view of one layout entry (shares memory)."""
        for entry in self.layout:
            if entry.name == name:
                return self.data[entry.offset : entry.offset + entry.size].reshape(entry.shape)
        raise KeyError(name)

    def names(self) -> list[str]:
        return [e.name for e in self.layout]

    def like(self, data) -> "ParamVector":
        """New vector with this layout and the given data."""
        arr = np.asarray(data, dtype=np.float64).ravel()
        if arr.size != self.data.size:
            raise ContractViolation(f"expected {self.data.size} scalars, got {arr.size}")
        return ParamVector(arr, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def dot(self, other) -> float:
        return float(np.dot(self.data, _as_array(other)))

    def __len__(self) -> int:
        return int(self.data.size)

    def __add__(self, other):
        return self.like(self.data + _as_array(other))

    def __sub__(self, other):
        return self.like(self.data - _as_array(other))

    def __mul__(self, scalar: float):
        return self.like(self.data * float(scalar))

    __rmul__ = __mul__

    def __repr__(self):
        return f"ParamVector(n={len(self)}, entries={len(self.layout)})"


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, ParamVector) else np.asarray(x, dtype=np.float64).ravel()
