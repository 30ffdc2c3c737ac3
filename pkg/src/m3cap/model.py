"""One captioning timestep around the shared memory, the training loss, and training.

Per step the memory is touched four times, in this order:

1. textual write head (controller h_{t-1}) writes into memory
2. visual read head (controller h_{t-1}) reads; the read keys temporal attention
3. visual write head (controller: attended context) writes
4. textual read head (controller: [h_{t-1}; context]) reads for the LSTM

then the LSTM advances and the output layer scores the next word.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attention, autodiff as ad, decoder, memory
from .attention import FeatureSequence
from .autodiff import Tape, Tensor
from .decoder import BOS, DecoderState, Vocabulary
from .optim import AdadeltaState, adadelta_update, clip_gradients
from .params import ParameterStore

log = logging.getLogger(__name__)

# per-component seeds are derived from the single run seed by these offsets
SEED_PARAMS, SEED_MEMORY, SEED_SHUFFLE, SEED_DROPOUT = 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


@dataclass
class ModelConfig:
    memory_rows: int = 128
    memory_cols: int = 512
    hidden: int = 512
    embed: int = 468
    attention: int = 256
    feature_width: int = 1024
    vocab_cap: int = 20000
    dropout: float = 0.5
    clip: float = 10.0
    l2: float = 1e-5
    beam: int = 5
    max_len: int = 30
    max_caption_len: int = 30
    batch_size: int = 16
    epochs: int = 50
    frames: int = 28
    seed: int = 0

    def __post_init__(self):
        for name in ("memory_rows", "memory_cols", "hidden", "embed", "attention",
                     "feature_width", "vocab_cap", "beam", "max_len", "max_caption_len",
                     "batch_size", "frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.clip <= 0:
            raise ConfigError("clip bound must be positive")
        if self.l2 < 0:
            raise ConfigError("l2 coefficient must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def micro(cls, **kw) -> "ModelConfig":
        """The gradient-check configuration."""
        base = dict(memory_rows=4, memory_cols=8, hidden=8, embed=8, attention=8,
                    feature_width=6, vocab_cap=8, dropout=0.0, max_len=3, frames=2,
                    batch_size=1, epochs=1)
        base.update(kw)
        return cls(**base)

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        """Scaled-down settings for the synthetic captioning task."""
        base = dict(memory_rows=8, memory_cols=16, hidden=32, embed=16, attention=16,
                    feature_width=32, vocab_cap=100, dropout=0.5, max_len=8,
                    max_caption_len=30, batch_size=4, epochs=60, frames=8)
        base.update(kw)
        return cls(**base)


@dataclass
class StepState:
    memory: Tensor
    decoder: DecoderState
    prev: int = BOS

    def advance(self, token: int) -> "StepState":
        return StepState(self.memory, self.decoder, token)


@dataclass
class Model:
    config: ModelConfig
    vocab: Vocabulary
    store: ParameterStore = field(default=None)

    def __post_init__(self):
        if self.store is None:
            self.store = build_params(self.config, len(self.vocab))

    def save(self, path, extra: dict | None = None, **meta) -> None:
        header = {"config": self.config.to_dict(), "vocab": self.vocab.tokens[4:], **meta}
        self.store.save(path, meta=header, extra=extra)

    @classmethod
    def load(cls, path) -> tuple["Model", dict, dict]:
        store, meta, extra = ParameterStore.load(path)
        cfg = ModelConfig.from_dict(meta["config"])
        vocab = Vocabulary(meta["vocab"])
        expected = build_params(cfg, len(vocab)).shapes()
        if store.shapes() != expected:
            raise ConfigError(shape_diff(expected, store.shapes()))
        return cls(cfg, vocab, store), meta, extra


def shape_diff(expected: dict, found: dict) -> str:
    lines = []
    for name in sorted(set(expected) | set(found)):
        a, b = expected.get(name), found.get(name)
        if a != b:
            lines.append(f"  {name}: config expects {a}, checkpoint has {b}")
    return "checkpoint does not match config:\n" + "\n".join(lines)


def build_params(cfg: ModelConfig, vocab_size: int) -> ParameterStore:
    rng = np.random.Generator(np.random.PCG64(cfg.seed + SEED_PARAMS))
    store = ParameterStore()
    M, H, d = cfg.memory_cols, cfg.hidden, cfg.feature_width
    memory.add_head(store, rng, "head.tw", H, M, writes=True)
    memory.add_head(store, rng, "head.vr", H, M, writes=False)
    memory.add_head(store, rng, "head.vw", d, M, writes=True)
    memory.add_head(store, rng, "head.tr", H + d, M, writes=False)
    attention.add_params(store, rng, cfg.attention, M, d)
    decoder.add_params(store, rng, vocab_size, cfg.embed, H, M, d)
    return store


def episode_start(cfg: ModelConfig, feats: FeatureSequence | None = None) -> StepState:
    mem = memory.init_memory(cfg.memory_rows, cfg.memory_cols, cfg.seed + SEED_MEMORY)
    return StepState(Tensor(mem), DecoderState.zeros(cfg.hidden), BOS)


def dropout_masks(cfg: ModelConfig, rng: np.random.Generator | None) -> dict:
    if rng is None or cfg.dropout == 0.0:
        return {}
    keep = 1.0 - cfg.dropout
    return {name: (rng.random(cfg.hidden) < keep) / keep for name in ("h_mask", "z_mask")}


def step_logits(state: StepState, feats: FeatureSequence, store: ParameterStore,
                masks: dict | None = None, trace: dict | None = None) -> tuple[StepState, Tensor]:
    """Advance one timestep; returns the new state and unnormalized word scores."""
    h_prev, mem = state.decoder.h, state.memory

    tw = memory.emit_head(h_prev, store, "head.tw")
    w_tw = memory.content_address(mem, tw.key, tw.sharpen)
    mem = memory.write(mem, w_tw, tw.erase, tw.add)

    vr = memory.emit_head(h_prev, store, "head.vr")
    w_vr = memory.content_address(mem, vr.key, vr.sharpen)
    r_vr = memory.read(mem, w_vr)

    att = attention.attend(feats, r_vr, store)

    vw = memory.emit_head(att.context, store, "head.vw")
    w_vw = memory.content_address(mem, vw.key, vw.sharpen)
    mem = memory.write(mem, w_vw, vw.erase, vw.add)

    tr = memory.emit_head(ad.concat([h_prev, att.context]), store, "head.tr")
    w_tr = memory.content_address(mem, tr.key, tr.sharpen)
    r_tr = memory.read(mem, w_tr)

    prev_embed = decoder.embed(state.prev, store)
    dec = decoder.lstm_step(prev_embed, state.decoder, r_tr, store)
    logits = decoder.output_logits(att.context, dec.h, prev_embed, store, **(masks or {}))
    if trace is not None:
        trace.update(w_tw=w_tw, w_vr=w_vr, r_vr=r_vr, alpha=att.alpha, context=att.context,
                     w_vw=w_vw, w_tr=w_tr, r_tr=r_tr)
    return StepState(mem, dec, state.prev), logits


def m3_step(state: StepState, feats: FeatureSequence, store: ParameterStore,
            masks: dict | None = None) -> tuple[StepState, Tensor]:
    """One timestep returning the next-word distribution."""
    new_state, logits = step_logits(state, feats, store, masks)
    return new_state, ad.softmax(logits, mask=decoder.output_mask(len(logits)))


def l2_term(store: ParameterStore) -> Tensor:
    total = None
    for _, p in store.items():
        sq = ad.sumsq(p)
        total = sq if total is None else total + sq
    return total


def caption_nll(feats: FeatureSequence, caption: Sequence[int], mask: Sequence[float] | None,
                store: ParameterStore, cfg: ModelConfig,
                rng: np.random.Generator | None = None) -> Tensor:
    """Mean negative log-likelihood of ``caption`` over its unmasked positions."""
    caption = [int(y) for y in caption]
    mask = np.ones(len(caption)) if mask is None else np.asarray(mask, dtype=np.float64)
    valid = np.flatnonzero(mask)
    if valid.size == 0:
        raise ValueError("caption has no valid tokens")
    state = episode_start(cfg, feats)
    out_mask = decoder.output_mask(len(store["embed"]))
    total = None
    for t in range(valid[-1] + 1):
        state, logits = step_logits(state, feats, store, dropout_masks(cfg, rng))
        if mask[t]:
            lp = ad.log_softmax(logits, mask=out_mask)[caption[t]]
            total = lp if total is None else total + lp
        state = state.advance(caption[t])
    return total * (-1.0 / valid.size)


def sequence_loss(feats: FeatureSequence, caption: Sequence[int], mask, store: ParameterStore,
                  cfg: ModelConfig, l2: float | None = None,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Per-token mean negative log-likelihood plus ``l2 * ||theta||^2``."""
    l2 = cfg.l2 if l2 is None else l2
    loss = caption_nll(feats, caption, mask, store, cfg, rng)
    return loss + l2 * l2_term(store) if l2 else loss


def batch_loss(pairs: Sequence[tuple[FeatureSequence, list[int]]], store: ParameterStore,
               cfg: ModelConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Mean of the per-pair losses (the L2 term is shared, so it is added once)."""
    total = None
    for feats, caption in pairs:
        nll = caption_nll(feats, caption, None, store, cfg, rng)
        total = nll if total is None else total + nll
    loss = total * (1.0 / len(pairs))
    return loss + cfg.l2 * l2_term(store) if cfg.l2 else loss


def loss_and_grads(pairs, store, cfg, rng=None) -> tuple[float, dict[str, np.ndarray]]:
    with Tape() as tape:
        loss = batch_loss(pairs, store, cfg, rng)
        grads = ad.backward(loss, store, tape)
    return loss.item(), grads


def evaluate(pairs, store: ParameterStore, cfg: ModelConfig) -> dict:
    """Dropout-free mean loss and next-token accuracy under teacher forcing."""
    if not pairs:
        return {"loss": float("nan"), "tokens": 0, "accuracy": float("nan")}
    losses, hits, tokens = [], 0, 0
    out_mask = decoder.output_mask(len(store["embed"]))
    for feats, caption in pairs:
        state = episode_start(cfg, feats)
        nll = 0.0
        for y in caption:
            state, logits = step_logits(state, feats, store)
            lp = ad._log_softmax_fwd(logits.data, out_mask)
            nll -= lp[y]
            hits += int(np.argmax(lp) == y)
            state = state.advance(y)
        losses.append(nll / len(caption))
        tokens += len(caption)
    reg = cfg.l2 * store.sq_norm()
    return {"loss": math.fsum(losses) / len(losses) + reg, "tokens": tokens,
            "accuracy": hits / tokens}


def encode_pairs(samples, vocab: Vocabulary, max_caption_len: int) -> list[tuple[FeatureSequence, list[int]]]:
    """Every (video, caption) pair, dropping captions longer than the cap."""
    from .dataio import preprocess_caption

    pairs = []
    for s in samples:
        for text in s.captions:
            tokens = preprocess_caption(text)
            if len(tokens) - 1 > max_caption_len:
                continue
            pairs.append((s.features, vocab.encode(tokens)))
    return pairs


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int
    best_loss: float


def train(model: Model, train_pairs, val_pairs, checkpoint_path, log_path=None,
          resume_from=None, grad_hook: Callable | None = None) -> TrainResult:
    """ADADELTA over shuffled minibatches, keeping the best-validation checkpoint.

    Writes ``checkpoint_path`` (best so far) and ``checkpoint_path + ".last"``
    (latest state, resumable), and appends JSON lines to ``log_path``.
    """
    cfg, store = model.config, model.store
    if not train_pairs:
        raise ValueError("training set is empty")
    checkpoint_path = Path(checkpoint_path)
    last_path = checkpoint_path.with_name(checkpoint_path.name + ".last")
    opt = AdadeltaState.fresh(store)
    start, best_loss, best_epoch, history = 1, math.inf, 0, []
    if resume_from is not None:
        loaded, meta, extra = Model.load(resume_from)
        store.assign(loaded.store.arrays())
        opt = AdadeltaState.from_arrays(extra)
        start = int(meta["epoch"]) + 1
        best_loss, best_epoch = float(meta["best_loss"]), int(meta["best_epoch"])
    logfh = open(log_path, "a" if resume_from else "w", encoding="utf-8") if log_path else None

    def record(epoch: int):
        nonlocal best_loss, best_epoch
        rows = []
        for split, pairs in (("train", train_pairs), ("val", val_pairs)):
            if pairs:
                ev = evaluate(pairs, store, cfg)
                rows.append({"epoch": epoch, "split": split, "loss": ev["loss"],
                             "tokens": ev["tokens"], "accuracy": ev["accuracy"]})
        for row in rows:
            history.append(row)
            log.info("epoch %d %s loss %.6f acc %.4f", epoch, row["split"], row["loss"], row["accuracy"])
            if logfh:
                logfh.write(json.dumps(row, sort_keys=True) + "\n")
                logfh.flush()
        watched = rows[-1]["loss"]
        if epoch == 0 or watched < best_loss:
            best_loss, best_epoch = watched, epoch
            model.save(checkpoint_path, epoch=epoch, best_loss=best_loss, best_epoch=best_epoch)
        model.save(last_path, extra=opt.to_arrays(), epoch=epoch, best_loss=best_loss,
                   best_epoch=best_epoch)

    try:
        if resume_from is None:
            record(0)
        for epoch in range(start, cfg.epochs + 1):
            order = np.random.Generator(np.random.PCG64([cfg.seed + SEED_SHUFFLE, epoch])) \
                .permutation(len(train_pairs))
            for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [train_pairs[i] for i in order[lo:lo + cfg.batch_size]]
                rng = np.random.Generator(np.random.PCG64([cfg.seed + SEED_DROPOUT, epoch, b]))
                loss, grads = loss_and_grads(batch, store, cfg, rng)
                if not math.isfinite(loss):
                    raise NonFiniteLossError(epoch, b, loss)
                if grad_hook is not None:
                    grads = grad_hook(grads)
                adadelta_update(store, clip_gradients(grads, cfg.clip), opt)
            record(epoch)
    finally:
        if logfh:
            logfh.close()
    return TrainResult(model, history, best_epoch, best_loss)
