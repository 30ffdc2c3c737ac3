"""Shared external memory: content addressing, reads, and erase/add writes.

Four heads touch the memory each decoding step. Each head owns its own
projections from a controller vector; write heads additionally emit erase
and add vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore, glorot

EPS = 1e-6
INIT_VALUE = 1e-6


@dataclass
class HeadEmission:
    key: Tensor
    sharpen: Tensor  # shape (1,)
    erase: Tensor | None = None
    add: Tensor | None = None


def init_memory(rows: int, cols: int, seed: int) -> np.ndarray:
    """Near-zero starting memory: 1e-6 plus uniform noise in [-1e-6, 1e-6]."""
    if rows < 1 or cols < 1:
        raise ValueError(f"memory needs positive dimensions, got {rows}x{cols}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return INIT_VALUE + rng.uniform(-INIT_VALUE, INIT_VALUE, size=(rows, cols))


def add_head(store: ParameterStore, rng: np.random.Generator, prefix: str,
             ctrl_width: int, width: int, writes: bool) -> None:
    store.add(f"{prefix}.key.W", glorot(rng, width, ctrl_width))
    store.add(f"{prefix}.key.b", np.zeros(width))
    store.add(f"{prefix}.beta.W", glorot(rng, 1, ctrl_width))
    store.add(f"{prefix}.beta.b", np.zeros(1))
    if writes:
        for part in ("erase", "add"):
            store.add(f"{prefix}.{part}.W", glorot(rng, width, ctrl_width))
            store.add(f"{prefix}.{part}.b", np.zeros(width))


def _proj(store, prefix, part, ctrl):
    return store[f"{prefix}.{part}.W"] @ ctrl + store[f"{prefix}.{part}.b"]


def emit_head(controller, store: ParameterStore, prefix: str) -> HeadEmission:
    """Key, sharpening factor and (for write heads) erase/add vectors."""
    ctrl = ad.as_tensor(controller)
    key = ad.tanh(_proj(store, prefix, "key", ctrl))
    sharpen = ad.softplus(_proj(store, prefix, "beta", ctrl)) + 1.0
    if f"{prefix}.erase.W" not in store:
        return HeadEmission(key, sharpen)
    erase = ad.sigmoid(_proj(store, prefix, "erase", ctrl))
    add = ad.tanh(_proj(store, prefix, "add", ctrl))
    return HeadEmission(key, sharpen, erase, add)


def content_address(mem, key, sharpen) -> Tensor:
    """Softmax over locations of sharpen * cosine(key, row)."""
    mem, key, sharpen = ad.as_tensor(mem), ad.as_tensor(key), ad.as_tensor(sharpen)
    if mem.data.ndim != 2 or key.shape != (mem.shape[1],):
        raise ad.ShapeError(f"content_address: memory {mem.shape} and key {key.shape} do not conform")
    if np.any(sharpen.data <= 0):
        raise ValueError("content_address: sharpening factor must be positive")
    sim = (mem @ key) / (ad.row_norms(mem) * ad.norm(key) + EPS)
    return ad.softmax(sharpen * sim)


def read(mem, w) -> Tensor:
    return ad.matmul(w, mem)


def write(mem, w, erase, add) -> Tensor:
    """Per row i: M(i) * (1 - w(i) erase) + w(i) add."""
    return mem * (1.0 - ad.outer(w, erase)) + ad.outer(w, add)
