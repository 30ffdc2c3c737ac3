"""Named parameter tensors and their on-disk form."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import container
from .autodiff import Tensor

FORMAT = "m3-params"
VERSION = 1


class ParameterStore:
    """Named trainable tensors, iterated in name order.

    Shapes are fixed at creation; :meth:`assign` only replaces values.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: p.shape for name, p in self.items()}

    def size(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.items()}

    def assign(self, values: dict[str, np.ndarray]) -> None:
        for name, v in values.items():
            p = self._params[name]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"parameter {name!r}: shape {v.shape} != {p.shape}")
            p.data = v.copy()

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, p in self.items():
            out.add(name, p.data)
        return out

    def sq_norm(self) -> float:
        return math.fsum(float(np.dot(p.data.ravel(), p.data.ravel())) for _, p in self.items())

    def save(self, path, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
        """Write parameters (plus optional named ``extra`` arrays) to ``path``."""
        extra = extra or {}
        entries = [{"name": n, "shape": list(p.shape), "group": "param"} for n, p in self.items()]
        entries += [{"name": n, "shape": list(np.shape(a)), "group": "extra"}
                    for n, a in sorted(extra.items())]
        header = {"format": FORMAT, "version": VERSION, "tensors": entries, "meta": meta or {}}
        arrays = [p.data for _, p in self.items()] + [extra[n] for n in sorted(extra)]
        container.write(path, header, arrays)

    @classmethod
    def load(cls, path) -> tuple["ParameterStore", dict, dict[str, np.ndarray]]:
        """Return ``(store, meta, extra)`` as written by :meth:`save`."""
        header, payload = container.read(path, FORMAT, versions=(VERSION,))
        try:
            entries = header["tensors"]
            shapes = [tuple(int(d) for d in e["shape"]) for e in entries]
        except (KeyError, TypeError, ValueError) as exc:
            raise container.MalformedHeaderError(f"{path}: malformed tensor table ({exc})") from None
        arrays = container.split(payload, shapes, path)
        store, extra = cls(), {}
        for e, a in zip(entries, arrays):
            if e.get("group", "param") == "param":
                store.add(e["name"], a)
            else:
                extra[e["name"]] = a
        return store, header.get("meta", {}), extra


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    s = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-s, s, size=(rows, cols))
