"""Flat parameter vectors with a named-slice layout."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class LayoutError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ParameterVector:
    """A float64 array plus an ordered ``name -> shape`` layout.

    ``view(name)`` returns a writable view shaped like the slice; all arithmetic
    keeps the layout, and in-place updates refuse NaN/Inf.
    """

    def __init__(self, layout, data=None, meta=None):
        self.layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in layout)
        self._offsets = {}
        pos = 0
        for name, shape in self.layout:
            size = int(np.prod(shape)) if shape else 1
            self._offsets[name] = (pos, pos + size, shape)
            pos += size
        if data is None:
            data = np.zeros(pos)
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (pos,):
            raise LayoutError(f"expected {pos} values, got {data.shape}")
        self.data = data
        self.meta = dict(meta or {})

    # -- structure ------------------------------------------------------------

    @property
    def names(self):
        return [n for n, _ in self.layout]

    @property
    def size(self):
        return self.data.size

    def view(self, name) -> np.ndarray:
        start, stop, shape = self._offsets[name]
        return self.data[start:stop].reshape(shape)

    def __getitem__(self, name):
        return self.view(name)

    def span(self, name):
        start, stop, _ = self._offsets[name]
        return start, stop

    def compatible(self, other: "ParameterVector") -> bool:
        return self.layout == other.layout

    def _check(self, other):
        if not self.compatible(other):
            raise LayoutError("parameter layouts differ")

    # -- arithmetic -------------------------------------------------------------

    def clone(self) -> "ParameterVector":
        return ParameterVector(self.layout, self.data.copy(), self.meta)

    def zeros_like(self) -> "ParameterVector":
        return ParameterVector(self.layout, None, self.meta)

    def scale(self, alpha) -> "ParameterVector":
        return ParameterVector(self.layout, self.data * alpha, self.meta)

    def __add__(self, other):
        self._check(other)
        return ParameterVector(self.layout, self.data + other.data, self.meta)

    def __sub__(self, other):
        self._check(other)
        return ParameterVector(self.layout, self.data - other.data, self.meta)

    def axpy(self, alpha, other: "ParameterVector") -> "ParameterVector":
        """In place ``self += alpha * other``; rejects non-finite results."""
        self._check(other)
        new = self.data + alpha * other.data
        if not np.all(np.isfinite(new)):
            raise NonFiniteError("non-finite parameter update")
        self.data[:] = new
        return self

    def masked(self, frozen) -> "ParameterVector":
        """Copy with the named slices zeroed."""
        out = self.clone()
        for name in frozen:
            out.view(name)[...] = 0.0
        return out

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def __eq__(self, other):
        return (isinstance(other, ParameterVector) and self.layout == other.layout
                and np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"ParameterVector({len(self.layout)} slices, {self.size} values)"

    # -- checkpoints ----------------------------------------------------------

    def to_json(self) -> dict:
        # float.hex keeps the round trip bit-exact
        return {
            "version": CHECKPOINT_VERSION,
            "layout": [[n, list(s)] for n, s in self.layout],
            "meta": self.meta,
            "data": [float(x).hex() for x in self.data],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ParameterVector":
        if obj.get("version") != CHECKPOINT_VERSION:
            raise LayoutError(f"unsupported checkpoint version {obj.get('version')}")
        data = np.array([float.fromhex(x) for x in obj["data"]])
        return cls([(n, tuple(s)) for n, s in obj["layout"]], data, obj.get("meta"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "ParameterVector":
        return cls.from_json(json.loads(Path(path).read_text()))
