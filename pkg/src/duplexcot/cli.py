"""Command-line pipelines: gen, align, targets, train, run, eval, ablate.

Exit codes: 0 ok, 2 validation or format error, 3 infeasible alignment,
4 model contract violation. Set ``DUPLEXCOT_LOG`` (e.g. ``DEBUG``) for logs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .align import EmissionMatrix, forced_align, load_emissions, word_timestamps
from .core import (
    DEFAULT_DELTA,
    FrameStream,
    load_conversations,
    overlap_blocks,
    partition_blocks,
    save_conversations,
    seconds_to_frames,
)
from .engine import EngineConfig, StageTrace, run_conversation, run_turn_based
from .errors import FormatError, InfeasibleAlignment, InvalidArgument, ModelContractError
from .evaluation import ablate_block_size, evaluate, fit_text_judge, reports_to_csv
from .models import DecodeParams, NGramModel, ScriptedModel, SequenceModel, ToyCodec, UniformModel, ngram_train
from .synth import SyntheticSpec, generate_corpus
from .targets import Variant, Vocabulary, block_sequence_corpus, build_block_instances, build_turn_instances, save_instances

log = logging.getLogger("duplexcot")

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_CONTRACT = 0, 2, 3, 4
LOG_ENV = "DUPLEXCOT_LOG"
PATH_KEYS = ("corpus", "codec", "model", "outputs", "traces")


# ---------------------------------------------------------------------------
# Configuration


def _default_params(stage: str) -> DecodeParams:
    return getattr(EngineConfig(), stage)


@dataclass
class Config:
    fps: float = 25
    n_block_s: float = 2.0
    variant: str = "full"
    delta: int = DEFAULT_DELTA
    silence_k: int = 10
    max_words: int = 25
    window_s: float = 60.0
    clock: str = "simulated"
    seed: int = 0
    order: int = 3
    alpha: float = 0.1
    asr: DecodeParams = field(default_factory=lambda: _default_params("asr"))
    res: DecodeParams = field(default_factory=lambda: _default_params("res"))
    spe: DecodeParams = field(default_factory=lambda: _default_params("spe"))
    paths: dict[str, str] = field(default_factory=dict)
    synthetic: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        Variant.parse(self.variant)
        if self.fps <= 0 or self.n_block_s <= 0 or self.window_s <= 0:
            raise InvalidArgument("fps, n_block_s and window_s must be positive")
        if self.delta < 1:
            raise InvalidArgument("delta must be >= 1")
        unknown = set(self.paths) - set(PATH_KEYS)
        if unknown:
            raise InvalidArgument(f"unknown [paths] keys: {sorted(unknown)}")
        unknown = set(self.synthetic) - {f.name for f in fields(SyntheticSpec)}
        if unknown:
            raise InvalidArgument(f"unknown [synthetic] keys: {sorted(unknown)}")
        self.engine(0)  # validates the engine fields

    @property
    def n_block(self) -> int:
        return seconds_to_frames(self.n_block_s, self.fps)

    def sub_seed(self, name: str) -> int:
        """Seed for one sub-component, derived from the top-level seed."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        return int(ss.generate_state(1)[0])

    def engine(self, seed: int | None = None, **changes) -> EngineConfig:
        return EngineConfig(
            n_block=self.n_block,
            variant=Variant.parse(self.variant),
            asr=self.asr,
            res=self.res,
            spe=self.spe,
            max_words=self.max_words,
            silence_k=self.silence_k,
            clock=self.clock,
            window_s=self.window_s,
            seed=self.sub_seed("run") if seed is None else seed,
        ).replace(**changes)

    def synthetic_spec(self, **overrides) -> SyntheticSpec:
        values = {"fps": self.fps, "block_s": self.n_block_s, "seed": self.sub_seed("gen"), **self.synthetic}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return SyntheticSpec(**values)


def config_from_mapping(data: dict) -> Config:
    known = {f.name for f in fields(Config)}
    unknown = set(data) - known
    if unknown:
        raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
    values = dict(data)
    for stage in ("asr", "res", "spe"):
        if stage in values:
            table = values[stage]
            if not isinstance(table, dict):
                raise InvalidArgument(f"[{stage}] must be a table")
            bad = set(table) - {f.name for f in fields(DecodeParams)}
            if bad:
                raise InvalidArgument(f"unknown [{stage}] keys: {sorted(bad)}")
            values[stage] = _default_params(stage).replace(**table)
    for table in ("paths", "synthetic"):
        if table in values and not isinstance(values[table], dict):
            raise InvalidArgument(f"[{table}] must be a table")
    try:
        return Config(**values)
    except TypeError as exc:
        raise InvalidArgument(str(exc)) from exc


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return config_from_mapping(data)


def apply_overrides(cfg: Config, args: argparse.Namespace) -> Config:
    changes = {}
    for name in ("fps", "n_block_s", "variant", "delta", "silence_k", "seed", "clock", "order", "alpha"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    paths = dict(cfg.paths)
    for key in PATH_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            paths[key] = value
    return Config(**{**{f.name: getattr(cfg, f.name) for f in fields(Config)}, **changes, "paths": paths})


def _path(cfg: Config, key: str) -> str:
    value = cfg.paths.get(key)
    if not value:
        raise InvalidArgument(f"missing --{key} (or [paths].{key} in the config)")
    return value


# ---------------------------------------------------------------------------
# File helpers


def _dump(obj, fh, compact: bool = True) -> None:
    fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":") if compact else None) + "\n")


def save_outputs(ids: Sequence[str], outputs: Sequence[FrameStream], path: str | Path) -> None:
    with open(path, "w") as fh:
        for cid, out in zip(ids, outputs):
            fps = int(out.fps) if float(out.fps).is_integer() else out.fps
            _dump({"id": cid, "fps": fps, "frames": list(out.labels)}, fh)


def load_outputs(path: str | Path) -> dict[str, FrameStream]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["id"])] = FrameStream([int(x) for x in rec["frames"]], rec["fps"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed output record ({exc})") from exc
    return out


def save_traces(ids: Sequence[str], traces: Sequence[StageTrace], path: str | Path) -> None:
    with open(path, "w") as fh:
        for cid, trace in zip(ids, traces):
            _dump({"id": cid, **trace.to_json()}, fh)


def load_traces(path: str | Path) -> dict[str, StageTrace]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["id"])] = StageTrace.from_json(rec)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed trace record ({exc})") from exc
    return out


def load_model(spec: str, vocab: Vocabulary) -> tuple[SequenceModel | None, dict]:
    """``uniform``, ``silence`` (no model, silent output), or an n-gram or scripted-model JSON file."""
    if spec == "uniform":
        return UniformModel(vocab.size), {}
    if spec == "silence":
        return None, {}
    with open(spec) as fh:
        obj = json.load(fh)
    model = ScriptedModel.from_json(obj) if "rules" in obj else NGramModel.from_json(obj)
    if model.vocab_size != vocab.size:
        raise FormatError(f"model vocabulary {model.vocab_size} does not match codec vocabulary {vocab.size}")
    return model, obj.get("meta", {})


def vocabulary_for(codec: ToyCodec) -> Vocabulary:
    return Vocabulary(codec.n_speech, tuple(codec.words))


def _emit(args, report: dict, text: str | None = None) -> None:
    if args.json or text is None:
        print(json.dumps(report, sort_keys=True))
    else:
        print(text)


# ---------------------------------------------------------------------------
# Sub-commands


def cmd_gen(cfg: Config, args) -> int:
    spec = cfg.synthetic_spec(
        n_conversations=args.n,
        duration_s=args.duration,
        overlap_rate=args.overlap_rate,
        backchannel_prob=args.backchannel_prob,
        vocab_size=args.vocab_size,
        seed=args.gen_seed,
    )
    convs, codec = generate_corpus(spec)
    save_conversations(convs, _path(cfg, "corpus"))
    codec.save(_path(cfg, "codec"))
    n_blocks = n_both = 0
    for conv in convs:
        plan = partition_blocks(conv.n_frames, spec.n_block)
        n_blocks += len(plan)
        n_both += len(overlap_blocks(conv.user.labels, conv.system_reference.labels, plan))
    report = {"n_conversations": len(convs), "n_blocks": n_blocks, "overlap_rate": n_both / n_blocks, "spec": asdict(spec)}
    _emit(args, report, f"wrote {len(convs)} conversations ({n_blocks} blocks, overlap rate {n_both / n_blocks:.3f})")
    return EXIT_OK


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise InvalidArgument(f"expected comma-separated integers, got {text!r}") from exc


def cmd_align(cfg: Config, args) -> int:
    em: EmissionMatrix = load_emissions(args.emissions)
    target = _parse_ints(args.target)
    al = forced_align(em, target)
    report = al.to_json()
    if args.words:
        words = args.words.split(",")
        report["words"] = [
            {"w": w.word, "start": w.start, "end": w.end}
            for w in word_timestamps(al, list(enumerate(words)) if len(words) == len(target) else dict(zip(target, words)))
        ]
    if args.out:
        with open(args.out, "w") as fh:
            _dump(report, fh)
    _emit(args, report, f"score {al.score:.6f}; labels {' '.join(map(str, al.labels))}")
    return EXIT_OK


def cmd_targets(cfg: Config, args) -> int:
    convs = load_conversations(_path(cfg, "corpus"))
    vocab = vocabulary_for(ToyCodec.load(_path(cfg, "codec")))
    instances = []
    for conv in convs:
        if args.mode == "block":
            plan = partition_blocks(conv.n_frames, cfg.n_block)
            instances += build_block_instances(conv, cfg.variant, plan, vocab, cfg.window_s)
        else:
            instances += build_turn_instances(conv, vocab, max_gap=cfg.delta)
    save_instances(instances, args.out)
    _emit(args, {"n_instances": len(instances), "mode": args.mode, "variant": cfg.variant}, f"wrote {len(instances)} instances")
    return EXIT_OK


def cmd_train(cfg: Config, args) -> int:
    convs = load_conversations(_path(cfg, "corpus"))
    vocab = vocabulary_for(ToyCodec.load(_path(cfg, "codec")))
    corpus = block_sequence_corpus(convs, cfg.variant, cfg.n_block, vocab, cfg.window_s)
    model = ngram_train(corpus, cfg.order, cfg.alpha, vocab.size)
    obj = model.to_json()
    obj["meta"] = {"variant": Variant.parse(cfg.variant).value, "n_block": cfg.n_block, "window_s": cfg.window_s}
    with open(_path(cfg, "model"), "w") as fh:
        json.dump(obj, fh, separators=(",", ":"), sort_keys=True)
    report = {"n_sequences": len(corpus), "n_tokens": sum(map(len, corpus)), "n_histories": len(model.counts), "vocab_size": vocab.size}
    _emit(args, report, f"trained order-{cfg.order} model on {report['n_tokens']} tokens")
    return EXIT_OK


def _run_one(job):
    conv, model, codec, vocab, ecfg, engine, delta = job
    if model is None:
        return FrameStream.silence(conv.n_frames, conv.fps), None
    if engine == "turn":
        return run_turn_based(conv.user, model, codec, vocab, ecfg, delta, conv.speaker_prompt.tokens)
    return run_conversation(conv, model, codec, vocab, ecfg)


def _map(fn, jobs, n_jobs: int):
    if n_jobs <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, jobs))


def cmd_run(cfg: Config, args) -> int:
    convs = load_conversations(_path(cfg, "corpus"))
    codec = ToyCodec.load(_path(cfg, "codec"))
    vocab = vocabulary_for(codec)
    model, meta = load_model(_path(cfg, "model"), vocab)
    if meta.get("n_block") not in (None, cfg.n_block):
        log.warning("model was trained with n_block=%s, running with %s", meta["n_block"], cfg.n_block)
    jobs = [
        (conv, model, codec, vocab, cfg.engine(cfg.sub_seed(f"run/{conv.conv_id}"), teacher_forced=args.teacher_forced), args.engine, cfg.delta)
        for conv in convs
    ]
    results = _map(_run_one, jobs, args.jobs)
    ids = [c.conv_id for c in convs]
    save_outputs(ids, [r[0] for r in results], _path(cfg, "outputs"))
    if cfg.paths.get("traces") and model is not None:
        save_traces(ids, [r[1] for r in results], cfg.paths["traces"])
    report = {"n_conversations": len(convs), "variant": Variant.parse(cfg.variant).value, "engine": args.engine}
    _emit(args, report, f"decoded {len(convs)} conversations")
    return EXIT_OK


def cmd_eval(cfg: Config, args) -> int:
    convs = load_conversations(_path(cfg, "corpus"))
    codec = ToyCodec.load(_path(cfg, "codec"))
    outputs = load_outputs(_path(cfg, "outputs"))
    missing = [c.conv_id for c in convs if c.conv_id not in outputs]
    if missing:
        raise FormatError(f"no output for conversations {missing[:5]}")
    traces = None
    if cfg.paths.get("traces"):
        by_id = load_traces(cfg.paths["traces"])
        traces = [by_id[c.conv_id] for c in convs]
    judge_convs = load_conversations(args.judge_corpus) if args.judge_corpus else convs
    judge = fit_text_judge(judge_convs, codec.words, cfg.delta)
    report = evaluate(convs, [outputs[c.conv_id] for c in convs], traces, codec, cfg.n_block, judge, cfg.delta)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.dumps() + "\n")
    r = report
    text = (
        f"ROUGE-1 F {r.rouge1[2]:.4f}  ROUGE-2 F {r.rouge2[2]:.4f}  ROUGE-L F {r.rougeL[2]:.4f}\n"
        f"perplexity {r.perplexity}  overlap {r.overlap_pct:.3f} (P {r.overlap_precision}, R {r.overlap_recall})\n"
        f"first-token wait {r.first_token_wait_mean}  RTF {r.rtf_mean}  turns {r.n_turns}  blocks {r.n_blocks}"
    )
    _emit(args, report.to_json(), text)
    return EXIT_OK


def _parse_sizes(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise InvalidArgument(f"expected comma-separated block sizes, got {text!r}") from exc


class _Retrain:
    """Model factory that trains one n-gram per block size on the same corpus."""

    def __init__(self, convs, vocab, cfg: Config):
        self.convs, self.vocab, self.cfg = convs, vocab, cfg

    def __call__(self, n_block: int) -> NGramModel:
        corpus = block_sequence_corpus(self.convs, self.cfg.variant, n_block, self.vocab, self.cfg.window_s)
        return ngram_train(corpus, self.cfg.order, self.cfg.alpha, self.vocab.size)


def cmd_ablate(cfg: Config, args) -> int:
    convs = load_conversations(_path(cfg, "corpus"))
    codec = ToyCodec.load(_path(cfg, "codec"))
    vocab = vocabulary_for(codec)
    if args.train_corpus:
        model = _Retrain(load_conversations(args.train_corpus), vocab, cfg)
    else:
        model, _ = load_model(_path(cfg, "model"), vocab)
        if model is None:
            raise InvalidArgument("ablation needs a model")
    result = ablate_block_size(convs, model, codec, vocab, _parse_sizes(args.sizes), cfg.engine(), cfg.delta)
    _emit(args, result, reports_to_csv(result["rows"]).rstrip("\n"))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "align": cmd_align,
    "targets": cmd_targets,
    "train": cmd_train,
    "run": cmd_run,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file; flags override its values")
    common.add_argument("--json", action="store_true", help="print a machine-readable report")
    common.add_argument("--seed", type=int)
    common.add_argument("--fps", type=float)
    common.add_argument("--n-block-s", dest="n_block_s", type=float, help="block length in seconds")
    common.add_argument("--variant", choices=[v.value for v in Variant])
    common.add_argument("--delta", type=int, help="VAD silence run length in frames")
    common.add_argument("--corpus")
    common.add_argument("--codec")

    p = argparse.ArgumentParser(prog="duplexcot", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic two-channel corpus")
    g.add_argument("--n", type=int, help="number of conversations")
    g.add_argument("--duration", type=float, help="conversation length in seconds")
    g.add_argument("--overlap-rate", type=float)
    g.add_argument("--backchannel-prob", type=float)
    g.add_argument("--vocab-size", type=int, help="number of topic words")
    g.add_argument("--gen-seed", type=int, help="generator seed (default: derived from --seed)")

    a = sub.add_parser("align", parents=[common], help="CTC forced alignment of a target to an emission matrix")
    a.add_argument("--emissions", required=True, help=".npy array or JSON {T, V, scores}")
    a.add_argument("--target", required=True, help="comma-separated token ids")
    a.add_argument("--words", help="comma-separated words, one per target token or per distinct token")
    a.add_argument("--out")

    t = sub.add_parser("targets", parents=[common], help="build CoT training instances")
    t.add_argument("--mode", choices=["block", "turn"], default="block")
    t.add_argument("--out", required=True)

    tr = sub.add_parser("train", parents=[common], help="train an add-alpha n-gram on block sequences")
    tr.add_argument("--order", type=int)
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--model", help="output model path")

    r = sub.add_parser("run", parents=[common], help="decode every conversation of a corpus")
    r.add_argument("--model", help="n-gram JSON, 'uniform' or 'silence'")
    r.add_argument("--engine", choices=["duplex", "turn"], default="duplex")
    r.add_argument("--outputs", help="output frames (JSONL)")
    r.add_argument("--traces", help="stage traces (JSONL)")
    r.add_argument("--silence-k", dest="silence_k", type=int)
    r.add_argument("--clock", choices=["simulated", "wall"])
    r.add_argument("--teacher-forced", action="store_true")
    r.add_argument("--jobs", type=int, default=1, help="parallel worker processes (across conversations)")

    e = sub.add_parser("eval", parents=[common], help="score system outputs")
    e.add_argument("--outputs")
    e.add_argument("--traces")
    e.add_argument("--judge-corpus", help="corpus for the perplexity judge (default: the evaluated corpus)")
    e.add_argument("--out", help="write the MetricsReport JSON here")

    ab = sub.add_parser("ablate", parents=[common], help="block-size ablation")
    ab.add_argument("--sizes", default="1,2", help="comma-separated block sizes in seconds")
    ab.add_argument("--model")
    ab.add_argument("--train-corpus", help="retrain an n-gram per block size on this corpus")
    ab.add_argument("--order", type=int)
    ab.add_argument("--alpha", type=float)
    return p


def setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except InfeasibleAlignment as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ModelContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (InvalidArgument, FormatError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
