"""Feature and caption ingestion, caption cleanup, and the synthetic task."""
from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import container
from .attention import FeatureSequence
from .decoder import RESERVED, Vocabulary

FEATURE_FORMAT = "m3-features"
FEATURE_VERSION = 1

_PUNCT = str.maketrans("", "", string.punctuation)


def preprocess_caption(text: str) -> list[str]:
    """Lowercase, drop ASCII punctuation, split on whitespace, append the EOS tag."""
    tokens = text.lower().translate(_PUNCT).split()
    if not tokens:
        raise ValueError(f"caption {text!r} is empty after preprocessing")
    return tokens + [RESERVED[2]]


def sample_frames(features: np.ndarray, k: int) -> FeatureSequence:
    """Pick ``k`` evenly spaced rows, or zero-pad (mask 0) when there are fewer."""
    features = np.asarray(features, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be at least 1")
    n = features.shape[0]
    if n == 0:
        raise ValueError("cannot sample frames from an empty video")
    if n >= k:
        idx = [0] if k == 1 else [round(i * (n - 1) / (k - 1)) for i in range(k)]
        return FeatureSequence(features[idx].copy(), np.ones(k))
    padded = np.zeros((k, features.shape[1]))
    padded[:n] = features
    mask = np.zeros(k)
    mask[:n] = 1.0
    return FeatureSequence(padded, mask)


def build_vocab(captions: Iterable[list[str]], cap: int) -> Vocabulary:
    return Vocabulary.build(captions, cap)


@dataclass
class Sample:
    video_id: str
    features: FeatureSequence
    captions: list[str] = field(default_factory=list)


@dataclass
class Dataset:
    samples: list[Sample]
    split: str = "train"

    def __post_init__(self):
        widths = {s.features.d for s in self.samples}
        if len(widths) > 1:
            raise ValueError(f"mixed feature widths in dataset: {sorted(widths)}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def width(self) -> int | None:
        return self.samples[0].features.d if self.samples else None

    def captions(self) -> list[list[str]]:
        return [preprocess_caption(c) for s in self.samples for c in s.captions]

    def check_captioned(self) -> None:
        missing = [s.video_id for s in self.samples if not s.captions]
        if missing:
            raise ValueError(f"{self.split} videos without captions: {', '.join(missing[:10])}")


# --- feature files -----------------------------------------------------------

def save_features(path, dataset: Dataset) -> None:
    videos = [{"id": s.video_id, "shape": list(s.features.features.shape),
               "mask": [int(m) for m in s.features.mask], "captions": list(s.captions)}
              for s in dataset]
    header = {"format": FEATURE_FORMAT, "version": FEATURE_VERSION, "split": dataset.split,
              "d": dataset.width or 0, "videos": videos}
    container.write(path, header, [s.features.features for s in dataset])


def load_features(path) -> Dataset:
    header, payload = container.read(path, FEATURE_FORMAT, versions=(FEATURE_VERSION,))
    try:
        d = int(header["d"])
        videos = header["videos"]
        shapes = [(int(v["shape"][0]), int(v["shape"][1])) for v in videos]
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise container.MalformedHeaderError(f"{path}: malformed video table ({exc})") from None
    for v, (n, width) in zip(videos, shapes):
        if width != d:
            raise container.WidthMismatchError(
                f"{path}: video {v.get('id')!r} has width {width}, file declares {d}")
    arrays = container.split(payload, shapes, path)
    samples = [Sample(v["id"], FeatureSequence(a, v.get("mask")), list(v.get("captions") or []))
               for v, a in zip(videos, arrays)]
    return Dataset(samples, header.get("split", "train"))


def load_captions(path) -> dict[str, list[str]]:
    """Line-delimited JSON ``{"video_id", "caption"}`` grouped by video."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.setdefault(str(rec["video_id"]), []).append(str(rec["caption"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad caption record ({exc})") from None
    return out


def attach_captions(dataset: Dataset, captions: dict[str, list[str]]) -> Dataset:
    samples = [Sample(s.video_id, s.features, list(captions.get(s.video_id) or s.captions))
               for s in dataset]
    return Dataset(samples, dataset.split)


# --- synthetic task ----------------------------------------------------------

class Lcg64:
    """64-bit linear congruential generator (Knuth's MMIX constants).

    Outputs use the top 53 bits of the state. Normal variates come from the
    Box-Muller transform, one pair per two uniforms, cached.
    """

    A = 6364136223846793005
    C = 1442695040888963407
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = (seed * 0x9E3779B97F4A7C15 + self.C) & self.MASK
        self._spare = None
        self.next_u64()

    def next_u64(self) -> int:
        self.state = (self.A * self.state + self.C) & self.MASK
        return self.state

    def uniform(self) -> float:
        """Uniform in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        return int(self.uniform() * n)

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normals(self, *shape: int) -> np.ndarray:
        n = int(np.prod(shape))
        return np.array([self.normal() for _ in range(n)]).reshape(shape)

    def shuffle(self, items: list) -> list:
        items = list(items)
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


OBJECTS = ("cat", "dog", "man", "woman", "bird", "horse", "child", "robot")
ACTIONS = ("run", "jump", "swim", "sing", "cook", "dance", "read", "walk")
_DOUBLED = {"run", "swim", "sit", "dig"}


def gerund(action: str) -> str:
    if action in _DOUBLED:
        return action + action[-1] + "ing"
    if action.endswith("e") and not action.endswith("ee"):
        return action[:-1] + "ing"
    return action + "ing"


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_samples: int = 72
    frames: int = 8
    width: int = 32
    noise: float = 0.05
    objects: tuple[str, ...] = OBJECTS
    actions: tuple[str, ...] = ACTIONS
    holdout_pairs: int = 0
    holdout_samples: int = 0
    split: tuple[float, float, float] = field(default=(0.9, 0.05, 0.05))


@dataclass
class SyntheticTask:
    datasets: dict[str, Dataset]
    object_codes: np.ndarray
    action_codes: np.ndarray
    labels: dict[str, tuple[int, int]]
    heldout: list[tuple[int, int]]

    def prototype(self, obj: int, act: int) -> np.ndarray:
        return self.object_codes[obj] + self.action_codes[act]


def gen_synthetic(spec: SyntheticSpec) -> SyntheticTask:
    """Videos whose frames are noisy copies of an (object, action) prototype.

    A prototype is the sum of an object code and an action code, each with
    i.i.d. N(0, 1/2) entries, so unseen combinations share parts with seen
    ones. Held-out pairs (one per object, on a shifted diagonal) only appear
    in the test split, after the regular index-based test slice.
    """
    n_obj, n_act = len(spec.objects), len(spec.actions)
    if spec.holdout_pairs > min(n_obj, n_act):
        raise ValueError("holdout_pairs cannot exceed the number of objects or actions")
    rng = Lcg64(spec.seed)
    scale = math.sqrt(0.5)
    object_codes = rng.normals(n_obj, spec.width) * scale
    action_codes = rng.normals(n_act, spec.width) * scale
    shift = 1 + rng.below(n_act - 1) if n_act > 1 else 0
    heldout = [(i, (i + shift) % n_act) for i in range(spec.holdout_pairs)]
    seen = [(o, a) for o in range(n_obj) for a in range(n_act) if (o, a) not in heldout]

    def make(video_id: str, obj: int, act: int) -> Sample:
        proto = object_codes[obj] + action_codes[act]
        feats = proto + spec.noise * rng.normals(spec.frames, spec.width)
        caption = f"a {spec.objects[obj]} is {gerund(spec.actions[act])}"
        return Sample(video_id, FeatureSequence(feats), [caption])

    labels: dict[str, tuple[int, int]] = {}
    samples, order = [], []
    for i in range(spec.n_samples):
        if i % len(seen) == 0:
            order = rng.shuffle(seen)
        obj, act = order[i % len(seen)]
        vid = f"syn{i:05d}"
        labels[vid] = (obj, act)
        samples.append(make(vid, obj, act))
    n_train = int(spec.split[0] * spec.n_samples)
    n_val = int(spec.split[1] * spec.n_samples)
    test = samples[n_train + n_val:]
    for j in range(spec.holdout_samples):
        obj, act = heldout[j % len(heldout)]
        vid = f"novel{j:05d}"
        labels[vid] = (obj, act)
        test.append(make(vid, obj, act))
    datasets = {"train": Dataset(samples[:n_train], "train"),
                "val": Dataset(samples[n_train:n_train + n_val], "val"),
                "test": Dataset(test, "test")}
    return SyntheticTask(datasets, object_codes, action_codes, labels, heldout)
