"""LSTM text decoder conditioned on a memory read, word embeddings, output layer."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore, glorot

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, width: int) -> "DecoderState":
        return cls(Tensor(np.zeros(width)), Tensor(np.zeros(width)))


class Vocabulary:
    """Token <-> id map. Ids 0-3 are PAD, BOS, EOS, UNK; real tokens follow."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(RESERVED) + list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out

    @classmethod
    def build(cls, captions: Iterable[list[str]], cap: int) -> "Vocabulary":
        """Keep the ``cap`` most frequent tokens, ties broken alphabetically."""
        if cap < 1:
            raise ValueError("vocabulary cap must be at least 1")
        counts: Counter[str] = Counter()
        seen = False
        for tokens in captions:
            seen = True
            counts.update(t for t in tokens if t not in RESERVED)
        if not seen:
            raise ValueError("cannot build a vocabulary from no captions")
        ranked = sorted(counts, key=lambda t: (-counts[t], t))[:cap]
        return cls(ranked)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens[len(RESERVED):]),
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(line for line in text.split("\n") if line)


def add_params(store: ParameterStore, rng: np.random.Generator, vocab_size: int,
               embed: int, hidden: int, read_width: int, feat_width: int) -> None:
    table = rng.uniform(-0.1, 0.1, size=(vocab_size, embed))
    table[PAD] = 0.0
    store.add("embed", table)
    store.add("lstm.W", glorot(rng, 4 * hidden, embed))
    store.add("lstm.U", glorot(rng, 4 * hidden, hidden))
    store.add("lstm.R", glorot(rng, 4 * hidden, read_width))
    store.add("lstm.b", np.zeros(4 * hidden))
    store.add("out.W_v", glorot(rng, hidden, feat_width))
    store.add("out.W_h", glorot(rng, hidden, hidden))
    store.add("out.W_e", glorot(rng, hidden, embed))
    store.add("out.b_h", np.zeros(hidden))
    store.add("out.U", glorot(rng, vocab_size, hidden))
    store.add("out.b", np.zeros(vocab_size))


def embed(token_id: int, store: ParameterStore) -> Tensor:
    table = store["embed"]
    if not 0 <= token_id < table.shape[0]:
        raise IndexError(f"token id {token_id} outside vocabulary of {table.shape[0]}")
    if token_id == PAD:
        return Tensor(np.zeros(table.shape[1]))
    return table[token_id]


def lstm_step(prev_embed, state: DecoderState, read_vec, store: ParameterStore) -> DecoderState:
    """One LSTM step; gate blocks in ``lstm.*`` are stacked as input, forget, output, candidate."""
    pre = (store["lstm.W"] @ prev_embed + store["lstm.U"] @ state.h
           + store["lstm.R"] @ read_vec + store["lstm.b"])
    n = len(state.h)
    i = ad.sigmoid(pre[0:n])
    f = ad.sigmoid(pre[n:2 * n])
    o = ad.sigmoid(pre[2 * n:3 * n])
    cand = ad.tanh(pre[3 * n:4 * n])
    c = i * cand + f * state.c
    return DecoderState(o * ad.tanh(c), c)


def output_mask(vocab_size: int) -> np.ndarray:
    """Ids the decoder may emit: everything but PAD and BOS."""
    mask = np.ones(vocab_size, dtype=bool)
    mask[[PAD, BOS]] = False
    return mask


def output_logits(context, h, prev_embed, store: ParameterStore,
                  h_mask: np.ndarray | None = None, z_mask: np.ndarray | None = None) -> Tensor:
    if h_mask is not None:
        h = ad.dropout(h, h_mask)
    z = ad.tanh(store["out.W_v"] @ context + store["out.W_h"] @ h
                + store["out.W_e"] @ prev_embed + store["out.b_h"])
    if z_mask is not None:
        z = ad.dropout(z, z_mask)
    return store["out.U"] @ z + store["out.b"]


def output_distribution(context, h, prev_embed, store: ParameterStore, **masks) -> Tensor:
    logits = output_logits(context, h, prev_embed, store, **masks)
    return ad.softmax(logits, mask=output_mask(len(logits)))
