"""Seeded two-channel synthetic dialogues with a controlled block-overlap rate.

Turns alternate between the two speakers and every turn change is pushed past
a block boundary, so without intervention no block holds speech from both
channels. Backchannels and short interjections from the listener are then
dropped into a chosen set of blocks to reach the requested overlap rate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import SILENCE, Conversation, FrameStream, SpeakerPrompt, WordSpan, partition_blocks, seconds_to_frames
from .errors import InvalidArgument
from .models import ToyCodec

log = logging.getLogger(__name__)

TOPICS = (
    "music movies dogs cats cooking soccer weather school travel books gardening "
    "baseball coffee tea camping fishing painting running swimming hiking chess "
    "pizza pasta trains cars boats jazz poetry science history math biking golf "
    "tennis skiing dancing photography theater knitting baking"
).split()

QUESTIONS = (
    "do you like {t}",
    "what do you think about {t}",
    "have you ever tried {t}",
    "how do you feel about {t}",
)
ANSWERS = (
    "yes i really like {t}",
    "i think {t} is great",
    "well {t} is fun but {u} is better",
    "not really i prefer {u}",
    "oh i love {t} a lot",
)
STATEMENTS = (
    "i have been into {t} lately",
    "my family really loves {t}",
    "we talked about {t} last week",
)
BACKCHANNELS = ("yeah", "uh-huh", "right", "okay", "mm-hmm", "sure")
INTERJECTIONS = ("oh really", "i see", "no way", "that's nice")


@dataclass(frozen=True)
class SyntheticSpec:
    n_conversations: int = 10
    duration_s: float = 60.0
    fps: float = 25
    block_s: float = 2.0
    vocab_size: int = 20
    frames_per_word: int = 5
    mean_turn_sentences: float = 1.6
    word_gap_max: int = 2
    sentence_gap_max: int = 6
    turn_gap_max: int = 12
    overlap_rate: float = 0.575
    backchannel_prob: float = 0.7
    prompt_len: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("overlap_rate", "backchannel_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgument(f"{name} must be in [0, 1], got {v}")
        if self.n_conversations < 1:
            raise InvalidArgument("n_conversations must be >= 1")
        if not 1 <= self.vocab_size <= len(set(TOPICS)):
            raise InvalidArgument(f"vocab_size must be in [1, {len(set(TOPICS))}]")
        if self.mean_turn_sentences < 1:
            raise InvalidArgument("mean_turn_sentences must be >= 1")
        if self.duration_s <= 0 or self.fps <= 0 or self.block_s <= 0:
            raise InvalidArgument("duration, fps and block size must be positive")
        if self.frames_per_word < 1 or min(self.word_gap_max, self.sentence_gap_max, self.turn_gap_max) < 0:
            raise InvalidArgument("frame counts must be non-negative")
        if 2 * self.frames_per_word > self.n_block:
            raise InvalidArgument("a block must fit a two-word interjection")

    @property
    def n_block(self) -> int:
        return seconds_to_frames(self.block_s, self.fps)

    @property
    def n_frames(self) -> int:
        return seconds_to_frames(self.duration_s, self.fps)

    @property
    def topics(self) -> list[str]:
        return sorted(set(TOPICS))[: self.vocab_size]


def lexicon(spec: SyntheticSpec) -> list[str]:
    words = set(spec.topics) | set(BACKCHANNELS)
    for template in QUESTIONS + ANSWERS + STATEMENTS + INTERJECTIONS:
        words |= {w for w in template.split() if not w.startswith("{")}
    return sorted(words)


def build_codec(spec: SyntheticSpec) -> ToyCodec:
    return ToyCodec.build(lexicon(spec), spec.frames_per_word)


def _sentence(rng, templates, topic, topics) -> list[str]:
    other = topics[int(rng.integers(len(topics)))]
    return templates[int(rng.integers(len(templates)))].format(t=topic, u=other).split()


def _turn_sentences(rng, spec: SyntheticSpec, topic: str, answering: bool) -> list[list[str]]:
    topics = spec.topics
    n = 1 + int(rng.poisson(spec.mean_turn_sentences - 1))
    out = [_sentence(rng, ANSWERS if answering else QUESTIONS + STATEMENTS, topic, topics)]
    for _ in range(n - 1):
        out.append(_sentence(rng, QUESTIONS + STATEMENTS, topic, topics))
    return out


def _place(words: list[str], start: int, rng, spec: SyntheticSpec, T: int) -> tuple[list[WordSpan], int]:
    """Lay out words from ``start``; returns the spans that fit and the next free frame."""
    L = spec.frames_per_word
    spans = []
    t = start
    for i, w in enumerate(words):
        if i > 0:
            t += int(rng.integers(spec.word_gap_max + 1))
        if t + L - 1 > T:
            break
        spans.append(WordSpan(w, t, t + L - 1))
        t += L
    return spans, t


def generate_conversation(spec: SyntheticSpec, codec: ToyCodec, rng: np.random.Generator, conv_id: str = "") -> Conversation:
    T, n_block, L = spec.n_frames, spec.n_block, spec.frames_per_word
    words: list[list[WordSpan]] = [[], []]
    speaker = int(rng.integers(2))
    t = 1 + int(rng.integers(spec.turn_gap_max + 1))
    topic = spec.topics[int(rng.integers(spec.vocab_size))]
    answering = False
    while t + L - 1 <= T:
        for k, sentence in enumerate(_turn_sentences(rng, spec, topic, answering)):
            if k > 0:
                t += 1 + int(rng.integers(spec.sentence_gap_max + 1))
            spans, t = _place(sentence, t, rng, spec, T)
            words[speaker] += spans
            if len(spans) < len(sentence):
                break
        if not words[speaker] or t > T:
            break
        # next speaker starts in a later block than the last word of this turn
        last_end = words[speaker][-1].end
        boundary = ((last_end - 1) // n_block + 1) * n_block
        t = boundary + 1 + int(rng.integers(spec.turn_gap_max + 1))
        speaker = 1 - speaker
        answering = not answering
        if rng.random() < 0.3:
            topic = spec.topics[int(rng.integers(spec.vocab_size))]

    frames = [[SILENCE] * T, [SILENCE] * T]
    for ch in (0, 1):
        for w in words[ch]:
            frames[ch][w.start - 1:w.end] = codec.encode(w.word)

    plan = partition_blocks(T, n_block)
    active = [
        [any(x != SILENCE for x in frames[ch][s - 1:e]) for (s, e) in plan]
        for ch in (0, 1)
    ]
    eligible = [b for b in range(len(plan)) if active[0][b] != active[1][b]]
    # unbiased rounding keeps the corpus-level rate on target
    exact = spec.overlap_rate * len(plan)
    want = int(exact) + int(rng.random() < exact - int(exact))
    if want > len(eligible):
        log.warning("%s: only %d of %d requested overlap blocks are available", conv_id, len(eligible), want)
        want = len(eligible)
    chosen = sorted(rng.choice(len(eligible), size=want, replace=False)) if want else []
    for i in chosen:
        b = eligible[i]
        listener = 0 if active[1][b] else 1
        s, e = plan.blocks[b]
        if rng.random() < spec.backchannel_prob:
            phrase = [BACKCHANNELS[int(rng.integers(len(BACKCHANNELS)))]]
        else:
            phrase = INTERJECTIONS[int(rng.integers(len(INTERJECTIONS)))].split()
        need = len(phrase) * L
        room = e - s + 1 - need
        if room < 0:
            phrase, need, room = phrase[:1], L, e - s + 1 - L
        at = s + int(rng.integers(room + 1))
        for w in phrase:
            words[listener].append(WordSpan(w, at, at + L - 1))
            frames[listener][at - 1:at + L - 1] = codec.encode(w)
            at += L
    for ch in (0, 1):
        words[ch].sort(key=lambda w: w.start)

    prompt = rng.integers(1, codec.n_speech, size=spec.prompt_len).tolist()
    return Conversation(
        user=FrameStream(frames[0], spec.fps),
        system_reference=FrameStream(frames[1], spec.fps),
        user_words=tuple(words[0]),
        system_words=tuple(words[1]),
        speaker_prompt=SpeakerPrompt(prompt),
        conv_id=conv_id,
    )


def generate_corpus(spec: SyntheticSpec) -> tuple[list[Conversation], ToyCodec]:
    codec = build_codec(spec)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_conversations)
    convs = [
        generate_conversation(spec, codec, np.random.default_rng(s), f"syn{spec.seed}-{i:04d}")
        for i, s in enumerate(seeds)
    ]
    return convs, codec
