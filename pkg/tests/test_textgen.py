import math

import numpy as np
import pytest

from m3cap import textgen
from m3cap.cli import gradcheck_instance
from m3cap.decoder import EOS
from m3cap.model import ModelConfig, episode_start
from m3cap.textgen import bleu

import oracles

CFG = ModelConfig.micro(max_len=3)
N_IDS = 8            # four reserved ids plus four real tokens
EMITTABLE = list(range(2, N_IDS))


def sharpened(seed, scale=3.0):
    """A random micro model whose output layer is scaled up so choices matter."""
    store, feats, _ = gradcheck_instance(CFG, seed, vocab_size=N_IDS)
    store["out.U"].data = store["out.U"].data * scale
    return store, feats


def enumerate_best(store, feats, max_len):
    """Score every finished sequence with the straight-line oracle; return the best."""
    P = store.arrays()
    start = episode_start(CFG, feats)
    H = CFG.hidden
    best = None

    def visit(prefix, logp, mem, h, c, prev):
        nonlocal best
        mem2, h2, c2, rho = oracles.step(P, mem, h, c, prev, feats.features, feats.mask)
        for tok in EMITTABLE:
            seq, lp = prefix + (tok,), logp + math.log(rho[tok])
            if tok == EOS or len(seq) == max_len:
                key = (-lp / len(seq), seq)
                if best is None or key < best[0]:
                    best = (key, seq, lp)
            else:
                visit(seq, lp, mem2, h2, c2, tok)

    visit((), 0.0, start.memory.data.copy(), np.zeros(H), np.zeros(H), 1)
    return best[1], best[2]


@pytest.mark.parametrize("seed", range(8))
def test_full_width_beam_is_exhaustive(seed):
    store, feats = sharpened(seed)
    hyp = textgen.beam_search(store, CFG, feats, beam=len(EMITTABLE) ** 3, max_len=3)
    tokens, logprob = enumerate_best(store, feats, 3)
    assert hyp.tokens == tokens
    assert hyp.logprob == pytest.approx(logprob, abs=1e-10)


@pytest.mark.parametrize("seed", range(8))
def test_beam_one_is_greedy(seed):
    store, feats = sharpened(seed)
    g = textgen.greedy_decode(store, CFG, feats)
    b = textgen.beam_search(store, CFG, feats, beam=1)
    assert b.tokens == g.tokens
    assert b.logprob == pytest.approx(g.logprob, abs=1e-12)


def test_wider_beams_never_beat_the_exact_search():
    for seed in range(5):
        store, feats = sharpened(seed)
        exact = textgen.beam_search(store, CFG, feats, beam=216).score
        for k in (1, 2, 3, 5, 10):
            assert textgen.beam_search(store, CFG, feats, beam=k).score <= exact + 1e-12


def test_certain_eos_gives_empty_caption():
    store, feats = sharpened(0)
    store["out.b"].data[EOS] = 100.0
    for hyp in (textgen.greedy_decode(store, CFG, feats), textgen.beam_search(store, CFG, feats, beam=3)):
        assert hyp.tokens == (EOS,)
        assert hyp.caption == []


def test_beam_zero_rejected():
    store, feats = sharpened(0)
    with pytest.raises(ValueError):
        textgen.beam_search(store, CFG, feats, beam=0)


def test_hypotheses_respect_max_len():
    store, feats = sharpened(1)
    store["out.b"].data[EOS] = -100.0
    hyp = textgen.beam_search(store, CFG, feats, beam=4, max_len=2)
    assert len(hyp.tokens) == 2 and EOS not in hyp.tokens


# --- BLEU -----------------------------------------------------------------------

def test_identical_corpus_scores_one():
    cands = [["a", "man", "is", "running"], ["a", "dog", "is", "swimming", "fast"]]
    report = bleu(cands, [[c] for c in cands])
    assert report.bleu == [1.0, 1.0, 1.0, 1.0]


def test_clipping_example():
    report = bleu([["a", "a", "a"]], [[["a", "b"]]])
    assert abs(report.precisions[0] - 1 / 3) < 1e-12
    assert report.brevity_penalty == 1.0
    assert abs(report.bleu[0] - 1 / 3) < 1e-12


def test_zero_overlap_scores_zero():
    report = bleu([["x", "y", "z"]], [[["a", "b", "c"]]])
    assert report.bleu == [0.0, 0.0, 0.0, 0.0]


def test_brevity_penalty_uses_closest_reference():
    report = bleu([["a", "b"]], [[["a", "b", "c", "d"], ["a", "b", "c"]]], max_n=1)
    assert report.reference_length == 3
    assert report.bleu[0] == pytest.approx(math.exp(1 - 3 / 2), abs=1e-15)


def test_clipping_takes_max_over_references():
    report = bleu([["the", "the", "cat"]], [[["the", "cat"], ["the", "the", "dog"]]], max_n=2)
    assert report.precisions[0] == 1.0
    assert report.precisions[1] == 1.0  # "the the" from one reference, "the cat" from the other
    single = bleu([["the", "the", "cat"]], [[["the", "cat"]]], max_n=2)
    assert single.precisions == [pytest.approx(2 / 3), pytest.approx(1 / 2)]


def test_bleu_rejects_bad_input():
    with pytest.raises(ValueError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu([["a"]], [[]])


def test_empty_candidate_scores_zero():
    assert bleu([[]], [[["a"]]]).bleu == [0.0] * 4


def test_report_dict_keys():
    d = bleu([["a", "b"]], [[["a", "b"]]]).to_dict()
    assert {"BLEU@1", "BLEU@4", "brevity_penalty"} <= set(d)
