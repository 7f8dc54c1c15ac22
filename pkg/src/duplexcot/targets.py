"""Token layout, CoT variants and training/inference instance builders.

A block is serialised as::

    <usr> x_1 .. x_n  [<asr> words]  [<res> words]  <spe> y_1 .. y_m  <eob>

with the bracketed stages present according to the variant. Turns use the same
layout terminated by ``<eot>`` instead of ``<eob>``.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .core import (
    DEFAULT_DELTA,
    BlockPlan,
    Conversation,
    WordSpan,
    partition_blocks,
    utterances,
)
from .errors import InvalidArgument

log = logging.getLogger(__name__)

SPECIALS = ("<unk>", "<usr>", "<asr>", "<res>", "<spe>", "<eob>", "<eot>", "<spk>")


class Stage(str, enum.Enum):
    ASR = "ASR"
    RES = "RES"
    SPE = "SPE"


class Variant(str, enum.Enum):
    NONE = "none"
    ASR = "asr"
    RESPONSE = "response"
    FULL = "full"

    @property
    def stages(self) -> tuple[Stage, ...]:
        return {
            Variant.NONE: (Stage.SPE,),
            Variant.ASR: (Stage.ASR, Stage.SPE),
            Variant.RESPONSE: (Stage.RES, Stage.SPE),
            Variant.FULL: (Stage.ASR, Stage.RES, Stage.SPE),
        }[self]

    @classmethod
    def parse(cls, name: "str | Variant") -> "Variant":
        if isinstance(name, Variant):
            return name
        try:
            return cls(name.lower())
        except ValueError:
            raise InvalidArgument(f"unknown variant {name!r}; choose from {[v.value for v in cls]}") from None


@dataclass(frozen=True)
class Vocabulary:
    """Model token space: speech labels, then special tags, then words."""

    n_speech: int
    words: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "_word_ids", {w: i for i, w in enumerate(self.words)})

    @property
    def size(self) -> int:
        return self.n_speech + len(SPECIALS) + len(self.words)

    def special(self, name: str) -> int:
        return self.n_speech + SPECIALS.index(name)

    unk = property(lambda self: self.special("<unk>"))
    usr = property(lambda self: self.special("<usr>"))
    asr = property(lambda self: self.special("<asr>"))
    res = property(lambda self: self.special("<res>"))
    spe = property(lambda self: self.special("<spe>"))
    eob = property(lambda self: self.special("<eob>"))
    eot = property(lambda self: self.special("<eot>"))
    spk = property(lambda self: self.special("<spk>"))

    @property
    def tags(self) -> frozenset[int]:
        return frozenset(range(self.n_speech, self.n_speech + len(SPECIALS)))

    def stage_tag(self, stage: Stage) -> int:
        return {Stage.ASR: self.asr, Stage.RES: self.res, Stage.SPE: self.spe}[stage]

    def word_id(self, word: str) -> int:
        i = self._word_ids.get(word)
        return self.unk if i is None else self.n_speech + len(SPECIALS) + i

    def word_ids(self, words: Iterable[str]) -> list[int]:
        return [self.word_id(w) for w in words]

    def is_speech(self, tok: int) -> bool:
        return 0 <= tok < self.n_speech

    def is_word(self, tok: int) -> bool:
        return self.n_speech + len(SPECIALS) <= tok < self.size

    def word_of(self, tok: int) -> str:
        if not self.is_word(tok):
            raise InvalidArgument(f"token {tok} is not a word")
        return self.words[tok - self.n_speech - len(SPECIALS)]

    def describe(self, tok: int) -> str:
        if self.is_speech(tok):
            return f"s{tok}"
        if tok in self.tags:
            return SPECIALS[tok - self.n_speech]
        return self.word_of(tok)

    def to_json(self) -> dict:
        return {"n_speech": self.n_speech, "words": list(self.words)}

    @classmethod
    def from_json(cls, obj) -> "Vocabulary":
        return cls(int(obj["n_speech"]), tuple(obj["words"]))


@dataclass(frozen=True)
class BlockCoTTargets:
    block: int
    asr_words: tuple[str, ...]
    res_words: tuple[str, ...]
    speech_frames: tuple[int, ...]


@dataclass(frozen=True)
class TurnCoTTargets:
    turn: int
    asr_text: str
    res_text: str
    speech: tuple[int, ...]


@dataclass
class CoTInstance:
    variant: Variant
    context: list[int]
    target: list[int]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"variant": self.variant.value, "context": self.context, "target": self.target, "meta": self.meta}

    @classmethod
    def from_json(cls, obj) -> "CoTInstance":
        return cls(Variant.parse(obj["variant"]), list(obj["context"]), list(obj["target"]), dict(obj.get("meta", {})))


# ---------------------------------------------------------------------------
# Layout helpers


def stage_tokens(vocab: Vocabulary, variant: Variant, asr: Sequence[int], res: Sequence[int], speech: Sequence[int], end: int) -> list[int]:
    """Target-side tokens for one block or turn (everything after the user input)."""
    out: list[int] = []
    for stage in variant.stages:
        out.append(vocab.stage_tag(stage))
        out.extend({Stage.ASR: asr, Stage.RES: res, Stage.SPE: speech}[stage])
    out.append(end)
    return out


def stage_sequence(tokens: Sequence[int], vocab: Vocabulary) -> list[Stage]:
    """Stage tags in the order they occur (used to check a layout)."""
    by_tag = {vocab.asr: Stage.ASR, vocab.res: Stage.RES, vocab.spe: Stage.SPE}
    return [by_tag[t] for t in tokens if t in by_tag]


def user_tokens(vocab: Vocabulary, frames: Sequence[int]) -> list[int]:
    return [vocab.usr, *frames]


# ---------------------------------------------------------------------------
# Block targets


def slice_alignment(words: Sequence[WordSpan], plan: BlockPlan, b: int) -> list[WordSpan]:
    """Every word whose span intersects block ``b``; boundary-crossing words land in both blocks."""
    start, end = plan.span(b)
    return [w for w in words if w.intersects(start, end)]


def block_targets(conv: Conversation, plan: BlockPlan, b: int) -> BlockCoTTargets:
    start, end = plan.span(b)
    return BlockCoTTargets(
        block=b,
        asr_words=tuple(w.word for w in slice_alignment(conv.user_words, plan, b)),
        res_words=tuple(w.word for w in slice_alignment(conv.system_words, plan, b)),
        speech_frames=conv.system_reference.span(start, end),
    )


def block_layout(vocab: Vocabulary, variant: Variant, user_frames: Sequence[int], tgt: BlockCoTTargets) -> tuple[list[int], list[int]]:
    """(input tokens, target tokens) for one block."""
    return user_tokens(vocab, user_frames), stage_tokens(
        vocab, variant, vocab.word_ids(tgt.asr_words), vocab.word_ids(tgt.res_words), tgt.speech_frames, vocab.eob
    )


def window_frames(window_s: float, fps: float, n_block: int) -> int:
    """Window length in frames, rounded down to whole blocks (at least one)."""
    if not window_s > 0:
        raise InvalidArgument("window_s must be > 0")
    return max(1, int(round(window_s * fps)) // n_block) * n_block


def build_block_instances(
    conv: Conversation,
    variant: Variant | str,
    plan: BlockPlan,
    vocab: Vocabulary,
    window_s: float = 60.0,
) -> list[CoTInstance]:
    """One instance per block; windows tile the conversation and reset the context."""
    variant = Variant.parse(variant)
    blocks_per_window = window_frames(window_s, conv.fps, plan.n_block) // plan.n_block
    instances = []
    history: list[int] = []
    for b, (start, end) in enumerate(plan, start=1):
        window, pos = divmod(b - 1, blocks_per_window)
        if pos == 0:
            history = []
        inp, tgt = block_layout(vocab, variant, conv.user.span(start, end), block_targets(conv, plan, b))
        instances.append(
            CoTInstance(
                variant,
                history + inp,
                tgt,
                {"conv_id": conv.conv_id, "window": window + 1, "block": b},
            )
        )
        history = history + inp + tgt
    return instances


def window_sequences(conv: Conversation, variant: Variant | str, plan: BlockPlan, vocab: Vocabulary, window_s: float = 60.0) -> list[list[int]]:
    """Full token stream of each window (what a language model is trained on)."""
    seqs: dict[int, list[int]] = {}
    for inst in build_block_instances(conv, variant, plan, vocab, window_s):
        seqs[inst.meta["window"]] = inst.context + inst.target
    return [seqs[k] for k in sorted(seqs)]


def block_sequence_corpus(convs: Iterable[Conversation], variant: Variant | str, n_block: int, vocab: Vocabulary, window_s: float = 60.0) -> list[list[int]]:
    corpus = []
    for conv in convs:
        plan = partition_blocks(conv.n_frames, n_block)
        corpus.extend(window_sequences(conv, variant, plan, vocab, window_s))
    return corpus


# ---------------------------------------------------------------------------
# Turn targets


@dataclass(frozen=True)
class Exchange:
    """A user utterance and the assistant utterance that answers it."""

    user: tuple[WordSpan, ...]
    assistant: tuple[WordSpan, ...]

    @property
    def start(self) -> int:
        return (self.user or self.assistant)[0].start

    @property
    def end(self) -> int:
        return (self.assistant or self.user)[-1].end


def exchanges(conv: Conversation, max_gap: int = DEFAULT_DELTA) -> list[Exchange]:
    """Pair user utterances with the assistant utterance that follows them.

    Utterances are ordered by start frame and consecutive utterances of one
    speaker are merged. A leading assistant utterance gets an empty user side;
    a trailing user utterance with no answer is dropped.
    """
    utts = [("user", u) for u in utterances(conv.user_words, max_gap)]
    utts += [("assistant", u) for u in utterances(conv.system_words, max_gap)]
    utts.sort(key=lambda su: (su[1][0].start, su[0]))
    turns: list[tuple[str, list[WordSpan]]] = []
    for speaker, words in utts:
        if turns and turns[-1][0] == speaker:
            turns[-1][1].extend(words)
        else:
            turns.append((speaker, list(words)))
    out = []
    pending: list[WordSpan] = []
    for speaker, words in turns:
        if speaker == "user":
            pending = words
        else:
            out.append(Exchange(tuple(pending), tuple(words)))
            pending = []
    return out


def turn_targets(conv: Conversation, ex: Exchange, k: int) -> TurnCoTTargets:
    start, end = ex.assistant[0].start, ex.assistant[-1].end
    return TurnCoTTargets(
        turn=k,
        asr_text=" ".join(w.word for w in ex.user),
        res_text=" ".join(w.word for w in ex.assistant),
        speech=conv.system_reference.span(start, end),
    )


def turn_layout(vocab: Vocabulary, conv: Conversation, ex: Exchange, k: int) -> tuple[list[int], list[int]]:
    user_frames = conv.user.span(ex.user[0].start, ex.user[-1].end) if ex.user else ()
    tgt = turn_targets(conv, ex, k)
    return user_tokens(vocab, user_frames), stage_tokens(
        vocab,
        Variant.FULL,
        vocab.word_ids(tgt.asr_text.split()),
        vocab.word_ids(tgt.res_text.split()),
        tgt.speech,
        vocab.eot,
    )


def build_turn_instances(
    conv: Conversation,
    vocab: Vocabulary,
    max_turns: int = 4,
    max_s: float = 120.0,
    max_gap: int = DEFAULT_DELTA,
) -> list[CoTInstance]:
    """Turn-level instances with each speaker simulated as the assistant.

    Every answered exchange is predicted once, with up to ``max_turns - 1``
    preceding exchanges as context, dropping the oldest until the window fits
    in ``max_s``. An exchange with no user side (the assistant opened the
    dialogue) is context only.
    """
    if max_turns < 1:
        raise InvalidArgument("max_turns must be >= 1")
    cap = max_s * conv.fps
    instances = []
    for c in (conv, conv.swapped()):
        exs = exchanges(c, max_gap)
        layouts = [turn_layout(vocab, c, ex, k) for k, ex in enumerate(exs, start=1)]
        for k, ex in enumerate(exs, start=1):
            if not ex.user:
                continue
            first = max(0, k - max_turns)
            while first < k - 1 and ex.end - exs[first].start + 1 > cap:
                first += 1
            if ex.end - exs[first].start + 1 > cap:
                log.warning("%s: exchange %d alone exceeds %.0f s; skipped", conv.conv_id, k, max_s)
                continue
            context: list[int] = []
            for inp, tgt in layouts[first:k - 1]:
                context += inp + tgt
            inp, tgt = layouts[k - 1]
            instances.append(
                CoTInstance(
                    Variant.FULL,
                    context + inp,
                    tgt,
                    {"conv_id": conv.conv_id, "assistant": c.speakers[1], "turn": k, "first_turn": first + 1},
                )
            )
    return instances


def save_instances(instances: Iterable[CoTInstance], path: str | Path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), separators=(",", ":")) + "\n")


def load_instances(path: str | Path) -> list[CoTInstance]:
    with open(path) as fh:
        return [CoTInstance.from_json(json.loads(line)) for line in fh if line.strip()]
