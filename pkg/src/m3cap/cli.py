"""Command-line entry point: synth, train, generate, eval, gradcheck.

Every command takes ``--config FILE`` (JSON) plus ``--set key=value``
overrides; dedicated flags such as ``--seed`` win over both.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import FeatureSequence
from .container import FormatError
from .dataio import (Dataset, Sample, SyntheticSpec, attach_captions, build_vocab, gen_synthetic,
                     load_captions, load_features, preprocess_caption, sample_frames, save_features)
from .model import (ConfigError, Model, ModelConfig, NonFiniteLossError, build_params, encode_pairs,
                    sequence_loss, shape_diff, train)
from .textgen import beam_search, bleu, greedy_decode

log = logging.getLogger("m3cap")

GRADCHECK_TOLERANCE = 1e-4


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train_features: str | None = None
    val_features: str | None = None
    test_features: str | None = None
    captions: str | None = None
    checkpoint: str = "m3.ckpt"
    output_dir: str = "run"
    greedy: bool = False
    generate_split: str = "test"
    synth_samples: int = 72
    synth_holdout_pairs: int = 8
    synth_holdout_samples: int = 16
    synth_noise: float = 0.05
    gradcheck_step: float = 1e-5
    gradcheck_extra_steps: list = field(default_factory=list)
    gradcheck_float64: bool = False
    gradcheck_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        run_keys = {f.name for f in dataclasses.fields(cls)} - {"model"}
        model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
        d = dict(d)
        nested = d.pop("model", {}) or {}
        unknown = sorted((set(d) - run_keys - model_keys) | (set(nested) - model_keys))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        model = {**nested, **{k: v for k, v in d.items() if k in model_keys}}
        run = {k: v for k, v in d.items() if k in run_keys}
        return cls(model=ModelConfig.from_dict(model), **run)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["model"] = self.model.to_dict()
        return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args, defaults: dict | None = None) -> RunConfig:
    raw: dict = dict(defaults or {})
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        loaded = json.loads(path.read_text(encoding="utf-8"))
        model = {**raw.pop("model", {}), **loaded.pop("model", {})}
        raw.update(loaded)
        if model:
            raw["model"] = model
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = _parse_value(value)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for key in ("output_dir", "checkpoint"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if getattr(args, "greedy", False):
        overrides["greedy"] = True
    if getattr(args, "beam", None) is not None:
        overrides["beam"] = args.beam
    model = dict(raw.pop("model", {}))
    for k, v in overrides.items():
        if k in {f.name for f in dataclasses.fields(ModelConfig)}:
            model[k] = v
            raw.pop(k, None)
        else:
            raw[k] = v
    raw["model"] = model
    return RunConfig.from_dict(raw)


def echo_config(run: RunConfig, command: str) -> None:
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config.{command}.json").write_text(
        json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _load_split(path: str | None, run: RunConfig, what: str, required: bool) -> Dataset | None:
    if path is None:
        if required:
            raise FileNotFoundError(f"no {what} features path configured")
        return None
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} features not found: {path}")
    ds = load_features(path)
    if run.captions:
        ds = attach_captions(ds, load_captions(run.captions))
    cfg = run.model
    if ds.width is not None and ds.width != cfg.feature_width:
        raise ConfigError(f"{path}: feature width {ds.width}, config feature_width {cfg.feature_width}")
    samples = []
    for s in ds:
        feats = s.features
        if feats.n != cfg.frames:
            feats = sample_frames(feats.features[feats.mask > 0], cfg.frames)
        samples.append(Sample(s.video_id, feats, s.captions))
    return Dataset(samples, ds.split)


# --- commands -------------------------------------------------------------------

def cmd_synth(run: RunConfig) -> int:
    cfg = run.model
    spec = SyntheticSpec(seed=cfg.seed, n_samples=run.synth_samples, frames=cfg.frames,
                         width=cfg.feature_width, noise=run.synth_noise,
                         holdout_pairs=run.synth_holdout_pairs,
                         holdout_samples=run.synth_holdout_samples)
    task = gen_synthetic(spec)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, ds in task.datasets.items():
        save_features(out / f"{split}.feat", ds)
        write_jsonl(out / f"{split}.refs.jsonl",
                    [{"video_id": s.video_id, "captions": s.captions} for s in ds])
    resolved = dataclasses.replace(run, train_features=str(out / "train.feat"),
                                   val_features=str(out / "val.feat"),
                                   test_features=str(out / "test.feat"),
                                   checkpoint=str(out / "model.ckpt"))
    (out / "config.json").write_text(json.dumps(resolved.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    print(json.dumps({split: len(ds) for split, ds in task.datasets.items()}, sort_keys=True))
    return 0


def cmd_train(run: RunConfig) -> int:
    cfg = run.model
    train_ds = _load_split(run.train_features, run, "train", required=True)
    val_ds = _load_split(run.val_features, run, "val", required=False)
    train_ds.check_captioned()
    vocab = build_vocab(train_ds.captions(), cfg.vocab_cap)
    echo_config(run, "train")
    out = Path(run.output_dir)
    vocab.save(out / "vocab.txt")
    model = Model(cfg, vocab)
    train_pairs = encode_pairs(train_ds, vocab, cfg.max_caption_len)
    val_pairs = encode_pairs(val_ds, vocab, cfg.max_caption_len) if val_ds else []
    Path(run.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    result = train(model, train_pairs, val_pairs, run.checkpoint, out / "train_log.jsonl")
    first = next(r for r in result.history if r["split"] == "train")
    last = [r for r in result.history if r["split"] == "train"][-1]
    print(json.dumps({"checkpoint": run.checkpoint, "best_epoch": result.best_epoch,
                      "initial_train_loss": first["loss"], "final_train_loss": last["loss"],
                      "final_train_accuracy": last["accuracy"]}, sort_keys=True))
    return 0


def cmd_generate(run: RunConfig) -> int:
    if not Path(run.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {run.checkpoint}")
    model, _, _ = Model.load(run.checkpoint)
    expected = build_params(run.model, len(model.vocab)).shapes()
    if expected != model.store.shapes():
        raise ConfigError(shape_diff(expected, model.store.shapes()))
    cfg = run.model
    path = {"train": run.train_features, "val": run.val_features,
            "test": run.test_features}.get(run.generate_split)
    ds = _load_split(path, run, run.generate_split, required=True)
    echo_config(run, "generate")
    records = []
    for s in sorted(ds, key=lambda s: s.video_id):
        if run.greedy:
            hyp = greedy_decode(model.store, cfg, s.features, cfg.max_len)
        else:
            hyp = beam_search(model.store, cfg, s.features, cfg.beam, cfg.max_len)
        records.append({"video_id": s.video_id, "caption": " ".join(model.vocab.decode(hyp.tokens)),
                        "logprob": float(hyp.logprob)})
    out = Path(run.output_dir) / "captions.jsonl"
    write_jsonl(out, records)
    log.info("wrote %d captions to %s", len(records), out)
    return 0


def evaluate_files(candidates_path, references_path) -> dict:
    cands = {str(r["video_id"]): r["caption"] for r in read_jsonl(candidates_path)}
    refs = {str(r["video_id"]): r["captions"] for r in read_jsonl(references_path)}
    missing_refs = sorted(set(cands) - set(refs))
    missing_cands = sorted(set(refs) - set(cands))
    if missing_refs or missing_cands:
        raise KeyError("video ids do not align; "
                       f"without references: {missing_refs}; without candidates: {missing_cands}")
    ids = sorted(cands)

    def tok(text):
        return preprocess_caption(text)[:-1] if text.strip() else []

    report = bleu([tok(cands[i]) for i in ids], [[tok(r) for r in refs[i]] for i in ids])
    return report.to_dict()


def cmd_eval(candidates: str, references: str) -> int:
    print(json.dumps(evaluate_files(candidates, references), sort_keys=True))
    return 0


def gradcheck_instance(cfg: ModelConfig, seed: int = 0, vocab_size: int = 12):
    """Random micro instance: parameters at a generic point, 2 frames, 3 tokens."""
    rng = np.random.Generator(np.random.PCG64(seed))
    store = build_params(dataclasses.replace(cfg, seed=seed), vocab_size)
    for name, p in store.items():
        if name.endswith(".b") or name.endswith(".b_h"):
            p.data = rng.uniform(-0.5, 0.5, p.shape)
    feats = FeatureSequence(rng.uniform(-1.0, 1.0, (cfg.frames, cfg.feature_width)))
    caption = [int(t) for t in rng.integers(4, vocab_size, size=2)] + [2]
    return store, feats, caption


def run_gradcheck(run: RunConfig, corrupt: float = 0.0) -> dict:
    cfg = dataclasses.replace(run.model, dropout=0.0)
    store, feats, caption = gradcheck_instance(cfg, run.gradcheck_seed)

    def fn():
        return sequence_loss(feats, caption, None, store, cfg)

    with ad.Tape() as tape:
        analytic = ad.backward(fn(), store, tape)
    if corrupt:
        name = store.names()[0]
        analytic[name] = analytic[name] + corrupt
    report = {"parameters": store.size(), "tolerance": GRADCHECK_TOLERANCE, "checks": []}
    steps = [run.gradcheck_step] + [float(s) for s in run.gradcheck_extra_steps]
    for i, step in enumerate(steps):
        modes = [True] + ([False] if run.gradcheck_float64 and i == 0 else [])
        for extended in modes:
            t0 = time.perf_counter()
            numeric = ad.numeric_gradient(fn, store, step, extended)
            errs = ad.relative_error(analytic, numeric)
            worst = max(errs, key=errs.get)
            report["checks"].append({"step": step, "precision": "extended" if extended else "float64",
                                     "max_rel_error": errs[worst], "worst_parameter": worst,
                                     "seconds": round(time.perf_counter() - t0, 3)})
    report["max_rel_error"] = report["checks"][0]["max_rel_error"]
    report["passed"] = report["max_rel_error"] < GRADCHECK_TOLERANCE
    return report


def cmd_gradcheck(run: RunConfig, corrupt: float = 0.0) -> int:
    report = run_gradcheck(run, corrupt)
    for check in report["checks"]:
        print(f"step {check['step']:g} ({check['precision']}): max relative error "
              f"{check['max_rel_error']:.3e} [{check['worst_parameter']}]")
    print(json.dumps(report, sort_keys=True))
    return 0 if report["passed"] else 1


# --- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m3cap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (value parsed as JSON when possible)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir", dest="output_dir")
        return sp

    common(sub.add_parser("synth", help="write the synthetic captioning task"))
    common(sub.add_parser("train", help="train and write a checkpoint"))
    common(sub.add_parser("generate", help="caption a split from a checkpoint"))
    g = sub.choices["generate"]
    g.add_argument("--checkpoint")
    g.add_argument("--beam", type=int)
    g.add_argument("--greedy", action="store_true")
    sub.choices["train"].add_argument("--checkpoint")

    e = sub.add_parser("eval", help="corpus BLEU of a captions file against references")
    e.add_argument("candidates")
    e.add_argument("references")

    gc = common(sub.add_parser("gradcheck", help="compare tape gradients with finite differences"))
    gc.add_argument("--step", type=float, help="finite-difference step (default 1e-5)")
    gc.add_argument("--also-step", type=float, action="append", default=[],
                    help="extra steps reported for information")
    gc.add_argument("--float64", action="store_true",
                    help="also report plain float64 finite differences")
    gc.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    return p


def _setup_logging() -> None:
    level = os.environ.get("M3_LOG_LEVEL", "info").lower()
    if level not in ("error", "info", "debug"):
        level = "info"
    logging.basicConfig(level=getattr(logging, level.upper()), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval":
            return cmd_eval(args.candidates, args.references)
        if args.command == "gradcheck":
            defaults = {"model": ModelConfig.micro().to_dict()}
            run = resolve_config(args, defaults)
            if args.step is not None:
                run.gradcheck_step = args.step
            run.gradcheck_extra_steps = list(run.gradcheck_extra_steps) + args.also_step
            run.gradcheck_float64 = run.gradcheck_float64 or args.float64
            return cmd_gradcheck(run, args.corrupt)
        defaults = {"model": ModelConfig.toy().to_dict()} if args.command == "synth" else None
        run = resolve_config(args, defaults)
        return {"synth": cmd_synth, "train": cmd_train, "generate": cmd_generate}[args.command](run)
    except (ConfigError, FormatError, FileNotFoundError, KeyError, ValueError,
            NonFiniteLossError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"m3cap {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
