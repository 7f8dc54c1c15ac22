"""Turn-by-turn and blockwise duplex decoding engines.

Both engines drive a :class:`~duplexcot.models.SequenceModel` through the
ASR -> response -> speech stages and record a :class:`StageTrace`. Time is
kept on a logical timeline: block ``b`` becomes available at ``I_b / fps``
seconds and every model call advances the clock either by the model's declared
latency (``simulated``) or by the measured call duration (``wall``).
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .core import (
    DEFAULT_DELTA,
    SILENCE,
    Conversation,
    FrameStream,
    iter_blocks,
    partition_blocks,
    vad_segment,
)
from .errors import InvalidArgument, MissingTimingEvent
from .models import DecodeParams, SequenceModel, ToyCodec, greedy_decode, most_intelligible, topk_sample
from .targets import Stage, Variant, Vocabulary, block_layout, block_targets, stage_tokens, user_tokens, window_frames

log = logging.getLogger(__name__)

_STAGE_SEED = {Stage.ASR: 1, Stage.RES: 2, Stage.SPE: 3}


@dataclass(frozen=True)
class EngineConfig:
    n_block: int = 50
    variant: Variant = Variant.FULL
    asr: DecodeParams = DecodeParams(strategy="greedy", max_new_tokens=64, n_candidates=1)
    res: DecodeParams = DecodeParams(strategy="topk", k=30, temperature=0.8, max_new_tokens=64, n_candidates=1)
    spe: DecodeParams = DecodeParams(strategy="topk", k=30, temperature=0.8, n_candidates=10)
    max_words: int = 25
    silence_k: int = 10
    clock: str = "simulated"
    teacher_forced: bool = False
    window_s: float = 60.0
    seed: int = 0
    batch_candidates: bool = True
    turn_max_words: int = 50
    turn_max_frames: int = 250
    turn_history: int = 3

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.n_block < 1:
            raise InvalidArgument("n_block must be >= 1")
        if self.max_words < 1:
            raise InvalidArgument("max_words must be >= 1")
        if self.silence_k < 1:
            raise InvalidArgument("silence_k must be >= 1")
        if self.clock not in ("simulated", "wall"):
            raise InvalidArgument(f"unknown clock mode {self.clock!r}")

    def replace(self, **changes) -> "EngineConfig":
        return EngineConfig(**{**self.__dict__, **changes})


# ---------------------------------------------------------------------------
# Clock


class Clock:
    def __init__(self, mode: str = "simulated"):
        self.mode = mode
        self.t = 0.0
        self.calls = 0

    def wait_until(self, t: float) -> None:
        self.t = max(self.t, t)

    def call(self, model: SequenceModel, context: Sequence[int]) -> np.ndarray:
        # the decoders validate the returned distribution
        self.calls += 1
        if self.mode == "simulated":
            out = model.next_token_log_probs(context)
            self.t += model.latency_s
            return out
        t0 = time.perf_counter()
        out = model.next_token_log_probs(context)
        self.t += time.perf_counter() - t0
        return out


class _Timed(SequenceModel):
    """Routes every model call through the session clock."""

    def __init__(self, model: SequenceModel, clock: Clock):
        self.model = model
        self.clock = clock
        self.vocab_size = model.vocab_size

    def next_token_log_probs(self, context):
        return self.clock.call(self.model, context)


# ---------------------------------------------------------------------------
# Trace


@dataclass
class StageRecord:
    unit: str  # "block" or "turn"
    index: int
    span: tuple[int, int]
    stages: list[str] = field(default_factory=list)
    asr: list[int] = field(default_factory=list)
    res: list[int] = field(default_factory=list)
    speech: list[int] = field(default_factory=list)
    asr_words: list[str] = field(default_factory=list)
    res_words: list[str] = field(default_factory=list)
    speech_words: list[str] = field(default_factory=list)
    silent: bool = False
    silent_votes: int = 0
    times: dict[str, list[float]] = field(default_factory=dict)
    available: float = 0.0
    start: float = 0.0
    end: float = 0.0
    first_speech: float | None = None
    emit_start: int | None = None
    n_calls: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["span"] = list(self.span)
        return d


@dataclass
class StageTrace:
    mode: str  # "duplex" or "turn"
    variant: Variant
    fps: float
    n_block: int
    teacher_forced: bool
    records: list[StageRecord] = field(default_factory=list)

    def header(self) -> dict:
        return {
            "mode": self.mode,
            "variant": self.variant.value,
            "fps": self.fps,
            "n_block": self.n_block,
            "teacher_forced": self.teacher_forced,
        }

    def record_for(self, index: int) -> StageRecord:
        for r in self.records:
            if r.index == index:
                return r
        raise MissingTimingEvent(f"no {self.mode} record with index {index}")

    def write_jsonl(self, fh) -> None:
        for r in self.records:
            fh.write(json.dumps({**self.header(), **r.to_json()}) + "\n")

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            self.write_jsonl(fh)

    def to_json(self) -> dict:
        return {**self.header(), "records": [r.to_json() for r in self.records]}

    @classmethod
    def from_json(cls, obj) -> "StageTrace":
        records = [StageRecord(**{**r, "span": tuple(r["span"])}) for r in obj["records"]]
        return cls(obj["mode"], Variant.parse(obj["variant"]), obj["fps"], obj["n_block"], obj["teacher_forced"], records)


# ---------------------------------------------------------------------------
# Helpers shared by both engines


def is_silent_candidate(tokens: Sequence[int]) -> bool:
    return all(t == SILENCE for t in tokens)


def silence_decision(candidates: Sequence[Sequence[int]]) -> str:
    """``"silent"`` iff strictly more than half of the candidates are empty or all silence."""
    votes = sum(1 for c in candidates if is_silent_candidate(c))
    return "silent" if votes * 2 > len(candidates) else "speak"


def keep_words(tokens: Sequence[int], vocab: Vocabulary, max_words: int) -> list[int]:
    return [t for t in tokens if vocab.is_word(t)][:max_words]


def keep_speech(tokens: Sequence[int], vocab: Vocabulary, max_frames: int) -> list[int]:
    return [t for t in tokens if vocab.is_speech(t)][:max_frames]


def words_of(tokens: Sequence[int], vocab: Vocabulary) -> list[str]:
    return [vocab.word_of(t) for t in tokens]


class _Decoder:
    """Stage decoding on top of a clocked model; shared by the two engines."""

    def __init__(self, model: SequenceModel, codec: ToyCodec, vocab: Vocabulary, config: EngineConfig):
        if model.vocab_size != vocab.size:
            raise InvalidArgument(f"model vocabulary {model.vocab_size} != layout size {vocab.size}")
        self.codec = codec
        self.vocab = vocab
        self.config = config
        self.clock = Clock(config.clock)
        self.model = _Timed(model, self.clock)
        self.stop = tuple(sorted(vocab.tags))

    def rng(self, index: int, stage: Stage, salt: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, index, _STAGE_SEED[stage], salt])

    def candidates(self, n, context, params, rng, max_new, post, first_token=None):
        """Draw ``n`` samples from one generator; batched candidates share a start time."""
        t0 = self.clock.t
        ends, out = [], []
        for i in range(n):
            if self.config.batch_candidates:
                self.clock.t = t0
            hook = first_token if (first_token is not None and n == 1) else None
            out.append(post(topk_sample(self.model, context, params, self.stop, rng=rng, max_new=max_new, on_token=hook)))
            ends.append(self.clock.t)
        if self.config.batch_candidates and ends:
            self.clock.t = max(ends)
        return out

    def asr(self, context, max_words, index) -> list[int]:
        params = self.config.asr
        if params.strategy == "greedy":
            toks = greedy_decode(self.model, context, self.stop, params.max_new_tokens)
        else:
            toks = topk_sample(self.model, context, params, self.stop, rng=self.rng(index, Stage.ASR))
        return keep_words(toks, self.vocab, max_words)


# ---------------------------------------------------------------------------
# Duplex engine


class DuplexSession:
    """Blockwise duplex decoding; feed user frames one block at a time.

    The session only ever sees blocks that have been pushed, so output for
    block ``b`` cannot depend on input after ``I_b``.
    """

    def __init__(
        self,
        model: SequenceModel,
        codec: ToyCodec,
        vocab: Vocabulary,
        config: EngineConfig,
        fps: float,
        speaker_prompt: Sequence[int] = (),
        reference: Conversation | None = None,
    ):
        if config.teacher_forced and reference is None:
            raise InvalidArgument("teacher-forced decoding needs a reference conversation")
        self.dec = _Decoder(model, codec, vocab, config)
        self.vocab = vocab
        self.config = config
        self.fps = fps
        self.prompt = [vocab.spk, *speaker_prompt] if len(speaker_prompt) else []
        self.reference = reference
        blocks_per_window = window_frames(config.window_s, fps, config.n_block) // config.n_block
        self.history: deque[list[int]] = deque(maxlen=blocks_per_window - 1)
        self.trace = StageTrace("duplex", config.variant, fps, config.n_block, config.teacher_forced)
        self.frames_seen = 0
        self.contexts: list[tuple[int, Stage, list[int]]] = []
        self.record_contexts = False

    @property
    def clock(self) -> Clock:
        return self.dec.clock

    def _ctx(self, b, stage, tokens):
        if self.record_contexts:
            self.contexts.append((b, stage, list(tokens)))
        return tokens

    def push_block(self, frames: Sequence[int]) -> list[int]:
        """Process one block of user frames and return the system frames for it."""
        frames = tuple(int(x) for x in frames)
        n = len(frames)
        if not 1 <= n <= self.config.n_block:
            raise InvalidArgument(f"block must hold 1..{self.config.n_block} frames, got {n}")
        cfg, vocab, dec = self.config, self.vocab, self.dec
        b = len(self.trace.records) + 1
        start_frame = self.frames_seen + 1
        self.frames_seen += n
        rec = StageRecord("block", b, (start_frame, self.frames_seen))
        rec.available = self.frames_seen / self.fps
        dec.clock.wait_until(rec.available)
        rec.start = dec.clock.t
        calls0 = dec.clock.calls

        hist = [t for blk in self.history for t in blk]
        cur = user_tokens(vocab, frames)
        inter: list[int] = []
        asr: list[int] = []
        res: list[int] = []
        silent = None
        votes = 0

        for stage in cfg.variant.stages:
            t0 = dec.clock.t
            rec.stages.append(stage.value)
            if stage is Stage.ASR:
                ctx = self._ctx(b, stage, hist + cur + [vocab.asr])
                asr = dec.asr(ctx, cfg.max_words, b)
                inter += [vocab.asr, *asr]
            elif stage is Stage.RES:
                ctx = self._ctx(b, stage, hist + cur + inter + [vocab.res])
                cands = dec.candidates(
                    cfg.silence_k, ctx, cfg.res, dec.rng(b, Stage.RES), cfg.res.max_new_tokens,
                    lambda c: keep_words(c, vocab, cfg.max_words),
                )
                votes = sum(1 for c in cands if is_silent_candidate(c))
                silent = silence_decision(cands) == "silent"
                res = [] if silent else next(c for c in cands if c)
                inter += [vocab.res, *res]
            else:
                ctx = self._ctx(b, stage, self.prompt + hist + cur + inter + [vocab.spe])
                speech, silent, votes = self._speech(b, ctx, n, res, silent, votes, rec)
                rec.speech = speech
            rec.times[stage.value] = [t0, dec.clock.t]

        rec.asr, rec.res = asr, res
        rec.asr_words, rec.res_words = words_of(asr, vocab), words_of(res, vocab)
        rec.speech_words = dec.codec.decode(rec.speech)
        rec.silent, rec.silent_votes = bool(silent), votes
        rec.end = dec.clock.t
        rec.n_calls = dec.clock.calls - calls0
        self.trace.records.append(rec)

        out = list(rec.speech) + [SILENCE] * (n - len(rec.speech))
        if cfg.teacher_forced:
            plan = partition_blocks(self.reference.n_frames, cfg.n_block)
            inp, tgt = block_layout(vocab, cfg.variant, frames, block_targets(self.reference, plan, b))
        else:
            inp = cur
            tgt = stage_tokens(vocab, cfg.variant, asr, res, out, vocab.eob)
        self.history.append(inp + tgt)
        return out

    def _speech(self, b, ctx, n, res, silent, votes, rec):
        cfg, dec, vocab = self.config, self.dec, self.vocab
        post = lambda c: keep_speech(c, vocab, n)

        def first(_tok):
            if rec.first_speech is None:
                rec.first_speech = dec.clock.t

        if silent:
            rec.first_speech = dec.clock.t
            return [SILENCE] * n, True, votes
        if Stage.RES in cfg.variant.stages:
            cands = dec.candidates(cfg.spe.n_candidates, ctx, cfg.spe, dec.rng(b, Stage.SPE), n, post, first)
            idx, _ = most_intelligible(cands, words_of(res, vocab), dec.codec)
            speech = cands[idx]
        else:
            cands = dec.candidates(cfg.silence_k, ctx, cfg.spe, dec.rng(b, Stage.SPE), n, post, first)
            votes = sum(1 for c in cands if is_silent_candidate(c))
            silent = silence_decision(cands) == "silent"
            speech = [SILENCE] * n if silent else next(c for c in cands if not is_silent_candidate(c))
        if rec.first_speech is None or len(cands) > 1:
            rec.first_speech = dec.clock.t
        return speech, bool(silent), votes


def run_duplex(
    user: FrameStream | Iterable[Sequence[int]],
    model: SequenceModel,
    codec: ToyCodec,
    vocab: Vocabulary,
    config: EngineConfig,
    fps: float | None = None,
    speaker_prompt: Sequence[int] = (),
    reference: Conversation | None = None,
) -> tuple[FrameStream, StageTrace]:
    """Run the duplex engine over a stream delivered block by block."""
    if isinstance(user, FrameStream):
        fps = user.fps if fps is None else fps
        blocks: Iterable[Sequence[int]] = iter_blocks(user, config.n_block)
    else:
        if fps is None:
            raise InvalidArgument("fps is required when the input is an iterable of blocks")
        blocks = user
    session = DuplexSession(model, codec, vocab, config, fps, speaker_prompt, reference)
    out: list[int] = []
    for frames in blocks:
        out.extend(session.push_block(frames))
    return FrameStream(out, fps), session.trace


def run_conversation(conv: Conversation, model, codec, vocab, config: EngineConfig) -> tuple[FrameStream, StageTrace]:
    return run_duplex(
        conv.user, model, codec, vocab, config,
        speaker_prompt=conv.speaker_prompt.tokens,
        reference=conv if config.teacher_forced else None,
    )


_END = object()


def threaded_feed(blocks: Iterable[Sequence[int]], maxsize: int = 4) -> Iterator[Sequence[int]]:
    """Deliver blocks from a producer thread through a bounded queue, in order."""
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    errors: list[BaseException] = []

    def produce():
        try:
            for blk in blocks:
                q.put(blk)
        except BaseException as exc:  # re-raised in the consumer
            errors.append(exc)
        finally:
            q.put(_END)

    threading.Thread(target=produce, daemon=True).start()
    while True:
        item = q.get()
        if item is _END:
            break
        yield item
    if errors:
        raise errors[0]


# ---------------------------------------------------------------------------
# Turn-by-turn engine


def run_turn_based(
    user: FrameStream,
    model: SequenceModel,
    codec: ToyCodec,
    vocab: Vocabulary,
    config: EngineConfig,
    delta: int = DEFAULT_DELTA,
    speaker_prompt: Sequence[int] = (),
) -> tuple[FrameStream, StageTrace]:
    """VAD-segmented simplex engine.

    Each turn is decoded once its silence run is detected; the response is
    written from frame ``T_k`` onward and cut as soon as the user speaks again,
    so the output never overlaps the input.
    """
    dec = _Decoder(model, codec, vocab, config)
    fps = user.fps
    T = len(user)
    prompt = [vocab.spk, *speaker_prompt] if len(speaker_prompt) else []
    out = [SILENCE] * T
    trace = StageTrace("turn", Variant.FULL, fps, config.n_block, False)
    history: deque[list[int]] = deque(maxlen=config.turn_history)

    for seg in vad_segment(user, delta):
        rec = StageRecord("turn", seg.index, seg.buffered_span)
        rec.available = seg.detect_frame / fps
        dec.clock.wait_until(rec.available)
        rec.start = dec.clock.t
        calls0 = dec.clock.calls
        hist = [t for h in history for t in h]
        cur = user_tokens(vocab, user.span(*seg.buffered_span))

        t0 = dec.clock.t
        asr = dec.asr(hist + cur + [vocab.asr], config.turn_max_words, seg.index)
        rec.times[Stage.ASR.value] = [t0, dec.clock.t]

        t0 = dec.clock.t
        ctx = hist + cur + [vocab.asr, *asr, vocab.res]
        res = keep_words(
            topk_sample(dec.model, ctx, config.res, dec.stop, rng=dec.rng(seg.index, Stage.RES)),
            vocab, config.turn_max_words,
        )
        rec.times[Stage.RES.value] = [t0, dec.clock.t]

        t0 = dec.clock.t
        ctx = prompt + hist + cur + [vocab.asr, *asr, vocab.res, *res, vocab.spe]

        def first(_tok):
            if rec.first_speech is None:
                rec.first_speech = dec.clock.t

        cands = dec.candidates(
            config.spe.n_candidates, ctx, config.spe, dec.rng(seg.index, Stage.SPE), config.turn_max_frames,
            lambda c: keep_speech(c, vocab, config.turn_max_frames), first,
        )
        idx, _ = most_intelligible(cands, words_of(res, vocab), codec)
        speech = cands[idx]
        if rec.first_speech is None or len(cands) > 1:
            rec.first_speech = dec.clock.t
        rec.times[Stage.SPE.value] = [t0, dec.clock.t]

        rec.stages = [s.value for s in Variant.FULL.stages]
        rec.asr, rec.res, rec.speech = asr, res, speech
        rec.asr_words, rec.res_words = words_of(asr, vocab), words_of(res, vocab)
        rec.speech_words = codec.decode(speech)
        rec.end = dec.clock.t
        rec.n_calls = dec.clock.calls - calls0

        emitted = 0
        if not seg.open:
            rec.emit_start = seg.detect_frame
            for i, tok in enumerate(speech):
                t = seg.detect_frame + i
                if t > T or user.labels[t - 1] != SILENCE:
                    break
                out[t - 1] = tok
                emitted += 1
        trace.records.append(rec)
        history.append(cur + stage_tokens(vocab, Variant.FULL, asr, res, speech[:emitted], vocab.eot))
    return FrameStream(out, fps), trace


# ---------------------------------------------------------------------------
# Timing


@dataclass
class TimingReport:
    turns: list[dict]
    block_latency: list[float]
    rtf_mean: float | None
    first_token_wait_mean: float | None
    block_latency_mean: float | None

    def to_json(self) -> dict:
        return asdict(self)


def _mean(xs: Sequence[float]) -> float | None:
    return float(np.mean(xs)) if len(xs) else None


def measure_timings(trace: StageTrace, user: FrameStream, delta: int = DEFAULT_DELTA) -> TimingReport:
    """First-speech-token wait and real-time factor for every user turn.

    The wait for a turn ending at frame ``e`` runs from ``e / fps`` to the first
    speech token of the block containing ``e`` (duplex) or of the turn's
    response (turn-based). RTF is that wait divided by the turn's duration.
    """
    fps = trace.fps
    turns = []
    for seg in vad_segment(user, delta):
        e = seg.buffered_end
        if trace.mode == "duplex":
            index = (e - 1) // trace.n_block + 1
        else:
            if seg.open:
                continue
            index = seg.index
        rec = trace.record_for(index)
        if rec.first_speech is None:
            raise MissingTimingEvent(f"{trace.mode} record {index} has no first-speech event")
        wait = rec.first_speech - e / fps
        duration = seg.n_buffered / fps
        turns.append({"turn": seg.index, "end_frame": e, "record": index, "wait_s": wait, "duration_s": duration, "rtf": wait / duration})
    block_latency = [r.end - r.available for r in trace.records]
    return TimingReport(
        turns=turns,
        block_latency=block_latency,
        rtf_mean=_mean([t["rtf"] for t in turns]),
        first_token_wait_mean=_mean([t["wait_s"] for t in turns]),
        block_latency_mean=_mean(block_latency),
    )
