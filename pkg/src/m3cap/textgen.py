"""Caption decoding (greedy and beam search) and corpus BLEU."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import FeatureSequence
from .decoder import EOS, output_mask
from .model import ModelConfig, StepState, episode_start, step_logits
from .params import ParameterStore


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    state: StepState | None = field(default=None, repr=False)
    finished: bool = False

    @property
    def score(self) -> float:
        """Length-normalized log-probability."""
        return self.logprob / len(self.tokens) if self.tokens else 0.0

    @property
    def caption(self) -> list[int]:
        """Tokens without the closing EOS."""
        return list(self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else self.tokens)


def next_logprobs(state: StepState, feats: FeatureSequence,
                  store: ParameterStore) -> tuple[StepState, np.ndarray]:
    new_state, logits = step_logits(state, feats, store)
    return new_state, ad._log_softmax_fwd(logits.data, output_mask(len(logits)))


def greedy_decode(store: ParameterStore, cfg: ModelConfig, feats: FeatureSequence,
                  max_len: int | None = None) -> Hypothesis:
    max_len = cfg.max_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    state, tokens, total = episode_start(cfg, feats), [], 0.0
    for _ in range(max_len):
        state, lp = next_logprobs(state, feats, store)
        tok = int(np.argmax(lp))
        tokens.append(tok)
        total += lp[tok]
        if tok == EOS:
            break
        state = state.advance(tok)
    return Hypothesis(tuple(tokens), total, state, True)


def _rank(h: Hypothesis):
    return (-h.score, h.tokens)


def beam_search(store: ParameterStore, cfg: ModelConfig, feats: FeatureSequence,
                beam: int | None = None, max_len: int | None = None) -> Hypothesis:
    """Keep the ``beam`` best extensions per step; EOS or ``max_len`` finishes a hypothesis.

    Finished hypotheses compete on length-normalized log-probability, ties
    going to the lexicographically smaller id sequence. The search runs until
    no live hypothesis remains, so a beam wide enough never to prune is exact.
    """
    beam = cfg.beam if beam is None else beam
    max_len = cfg.max_len if max_len is None else max_len
    if beam < 1:
        raise ValueError("beam must be at least 1")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    live = [Hypothesis((), 0.0, episode_start(cfg, feats))]
    finished: list[Hypothesis] = []
    allowed = np.flatnonzero(output_mask(len(store["embed"])))
    for _ in range(max_len):
        candidates = []
        for hyp in live:
            state, lp = next_logprobs(hyp.state, feats, store)
            for tok in allowed:
                candidates.append(Hypothesis(hyp.tokens + (int(tok),), hyp.logprob + lp[tok], state))
        candidates.sort(key=_rank)
        live = []
        for cand in candidates[:beam]:
            if cand.tokens[-1] == EOS or len(cand.tokens) == max_len:
                cand.finished = True
                finished.append(cand)
            else:
                cand.state = cand.state.advance(cand.tokens[-1])
                live.append(cand)
        if not live:
            break
    return min(finished, key=_rank)


# --- BLEU -----------------------------------------------------------------------

@dataclass
class BleuReport:
    precisions: list[float]
    brevity_penalty: float
    bleu: list[float]
    candidate_length: int
    reference_length: int

    def to_dict(self) -> dict:
        out = {f"BLEU@{n}": s for n, s in enumerate(self.bleu, 1)}
        out.update(precisions=self.precisions, brevity_penalty=self.brevity_penalty,
                   candidate_length=self.candidate_length, reference_length=self.reference_length)
        return out


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence], references: Sequence[Sequence[Sequence]],
         max_n: int = 4) -> BleuReport:
    """Corpus BLEU with clipped n-gram counts and no smoothing."""
    if not candidates:
        raise ValueError("bleu needs at least one candidate")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        cand = list(cand)
        c_len += len(cand)
        r_len += min((len(r) for r in refs), key=lambda L: (abs(L - len(cand)), L))
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            ceiling: Counter = Counter()
            for ref in refs:
                ceiling |= ngrams(list(ref), n)
            matched[n - 1] += sum(min(c, ceiling[g]) for g, c in counts.items())
            total[n - 1] += sum(counts.values())
    precisions = [m / t if t else 0.0 for m, t in zip(matched, total)]
    if c_len == 0:
        bp = 0.0
    elif c_len < r_len:
        bp = math.exp(1.0 - r_len / c_len)
    else:
        bp = 1.0
    scores = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if min(ps) == 0.0:
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(math.fsum(math.log(p) for p in ps) / n))
    return BleuReport(precisions, bp, scores, c_len, r_len)
