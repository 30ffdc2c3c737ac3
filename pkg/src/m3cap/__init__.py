"""Video captioning with a shared visual-textual memory, on a small numpy autodiff."""
from .attention import AttentionResult, FeatureSequence, attend, relevance_scores
from .autodiff import Tape, Tensor, backward, grad_check
from .decoder import BOS, EOS, PAD, UNK, DecoderState, Vocabulary
from .memory import content_address, emit_head, init_memory, read, write
from .model import Model, ModelConfig, StepState, episode_start, m3_step, sequence_loss, train
from .params import ParameterStore
from .textgen import BleuReport, Hypothesis, beam_search, bleu, greedy_decode

__version__ = "0.1.0"

__all__ = [
    "AttentionResult", "FeatureSequence", "attend", "relevance_scores",
    "Tape", "Tensor", "backward", "grad_check",
    "BOS", "EOS", "PAD", "UNK", "DecoderState", "Vocabulary",
    "content_address", "emit_head", "init_memory", "read", "write",
    "Model", "ModelConfig", "StepState", "episode_start", "m3_step", "sequence_loss", "train",
    "ParameterStore",
    "BleuReport", "Hypothesis", "beam_search", "bleu", "greedy_decode",
]
