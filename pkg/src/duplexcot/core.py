"""Frames, streams, conversations and block/turn segmentation.

Frame indices in every public span are 1-based and inclusive, so a stream of
``T`` frames covers ``[1, T]``. Internally lists are 0-based; ``labels[t - 1]``
is frame ``t``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import FormatError, InvalidArgument

SILENCE = 0
DEFAULT_FPS = 25
DEFAULT_DELTA = 10

Span = tuple[int, int]


class Mode(str, enum.Enum):
    LISTENING = "listening"
    SPEAKING = "speaking"
    OVERLAP = "overlap"
    MUTUAL_SILENCE = "mutual_silence"


@dataclass(frozen=True)
class FrameStream:
    """Per-channel sequence of frame labels (``SILENCE`` or a token id)."""

    labels: tuple[int, ...]
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(x) for x in self.labels))
        if self.fps <= 0:
            raise InvalidArgument(f"fps must be positive, got {self.fps}")
        for i, x in enumerate(self.labels):
            if x < 0:
                raise InvalidArgument(f"negative frame label {x} at frame {i + 1}")

    def __len__(self) -> int:
        return len(self.labels)

    def span(self, start: int, end: int) -> tuple[int, ...]:
        return self.labels[start - 1:end]

    def seconds(self, n_frames: int | None = None) -> float:
        return (len(self) if n_frames is None else n_frames) / self.fps

    def is_silent(self, start: int = 1, end: int | None = None) -> bool:
        end = len(self) if end is None else end
        return all(x == SILENCE for x in self.span(start, end))

    @classmethod
    def silence(cls, n: int, fps: float = DEFAULT_FPS) -> "FrameStream":
        return cls((SILENCE,) * n, fps)


@dataclass(frozen=True)
class WordSpan:
    word: str
    start: int
    end: int

    @property
    def span(self) -> Span:
        return (self.start, self.end)

    def intersects(self, start: int, end: int) -> bool:
        return self.start <= end and start <= self.end


@dataclass(frozen=True)
class SpeakerPrompt:
    tokens: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(x) for x in self.tokens))


@dataclass(frozen=True)
class Conversation:
    """A two-channel dialogue: the user channel and the reference system channel."""

    user: FrameStream
    system_reference: FrameStream
    user_words: tuple[WordSpan, ...] = ()
    system_words: tuple[WordSpan, ...] = ()
    speaker_prompt: SpeakerPrompt = field(default_factory=SpeakerPrompt)
    conv_id: str = ""
    speakers: tuple[str, str] = ("A", "B")

    def __post_init__(self):
        object.__setattr__(self, "user_words", tuple(self.user_words))
        object.__setattr__(self, "system_words", tuple(self.system_words))
        validate_conversation(self)

    @property
    def n_frames(self) -> int:
        return len(self.user)

    @property
    def fps(self) -> float:
        return self.user.fps

    def swapped(self) -> "Conversation":
        """The same dialogue with the other speaker simulated as the system."""
        return Conversation(
            user=self.system_reference,
            system_reference=self.user,
            user_words=self.system_words,
            system_words=self.user_words,
            speaker_prompt=self.speaker_prompt,
            conv_id=self.conv_id,
            speakers=(self.speakers[1], self.speakers[0]),
        )


def _check_words(words: Sequence[WordSpan], stream: FrameStream, channel: str) -> None:
    T = len(stream)
    prev_end = 0
    covered = [False] * T
    for w in words:
        if not (1 <= w.start <= w.end <= T):
            raise FormatError(f"{channel}: word {w.word!r} span [{w.start}, {w.end}] outside [1, {T}]")
        if w.start <= prev_end:
            raise FormatError(f"{channel}: word {w.word!r} overlaps or precedes the previous word")
        prev_end = w.end
        for t in range(w.start, w.end + 1):
            covered[t - 1] = True
    for t, (label, inside) in enumerate(zip(stream.labels, covered), start=1):
        if inside and label == SILENCE:
            raise FormatError(f"{channel}: frame {t} is silent inside a word span")
        if not inside and label != SILENCE and words:
            raise FormatError(f"{channel}: frame {t} is non-silent outside every word span")


def validate_conversation(conv: Conversation) -> None:
    if len(conv.user) != len(conv.system_reference):
        raise FormatError(
            f"channel lengths differ: {len(conv.user)} vs {len(conv.system_reference)}"
        )
    if conv.user.fps != conv.system_reference.fps:
        raise FormatError("channels disagree on fps")
    _check_words(conv.user_words, conv.user, "user")
    _check_words(conv.system_words, conv.system_reference, "system")


# ---------------------------------------------------------------------------
# Blocks


@dataclass(frozen=True)
class BlockPlan:
    n_frames: int
    n_block: int
    blocks: tuple[Span, ...]

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self) -> Iterator[Span]:
        return iter(self.blocks)

    def boundary(self, b: int) -> int:
        """End frame ``I_b`` of block ``b`` (1-based block index; ``I_0 = 0``)."""
        if b == 0:
            return 0
        return self.blocks[b - 1][1]

    def span(self, b: int) -> Span:
        if not 1 <= b <= len(self.blocks):
            raise IndexError(f"block {b} out of range [1, {len(self.blocks)}]")
        return self.blocks[b - 1]

    def block_of(self, frame: int) -> int:
        if not 1 <= frame <= self.n_frames:
            raise IndexError(f"frame {frame} out of range [1, {self.n_frames}]")
        return (frame - 1) // self.n_block + 1


def partition_blocks(T: int, n_block: int) -> BlockPlan:
    if n_block < 1:
        raise InvalidArgument(f"n_block must be >= 1, got {n_block}")
    if T < 0:
        raise InvalidArgument(f"T must be >= 0, got {T}")
    B = math.ceil(T / n_block)
    blocks = tuple((b * n_block + 1, min((b + 1) * n_block, T)) for b in range(B))
    return BlockPlan(T, n_block, blocks)


def seconds_to_frames(seconds: float, fps: float) -> int:
    n = round(seconds * fps)
    if n < 1:
        raise InvalidArgument(f"{seconds} s at {fps} fps is less than one frame")
    return n


def iter_blocks(stream: FrameStream | Sequence[int], n_block: int) -> Iterator[tuple[int, ...]]:
    """Yield the stream one block at a time (the last block may be short)."""
    labels = stream.labels if isinstance(stream, FrameStream) else tuple(stream)
    for start, end in partition_blocks(len(labels), n_block):
        yield labels[start - 1:end]


# ---------------------------------------------------------------------------
# Modes and overlap


def classify_mode(x: int, y: int) -> Mode:
    if x != SILENCE and y != SILENCE:
        return Mode.OVERLAP
    if x != SILENCE:
        return Mode.LISTENING
    if y != SILENCE:
        return Mode.SPEAKING
    return Mode.MUTUAL_SILENCE


def joint_modes(user: FrameStream | Sequence[int], system: FrameStream | Sequence[int]) -> list[Mode]:
    xs = user.labels if isinstance(user, FrameStream) else user
    ys = system.labels if isinstance(system, FrameStream) else system
    if len(xs) != len(ys):
        raise InvalidArgument("streams differ in length")
    return [classify_mode(x, y) for x, y in zip(xs, ys)]


def spans_overlap(x: Sequence[int], y: Sequence[int], span: Span, min_frames: int = 1) -> bool:
    """Both channels have at least ``min_frames`` non-silent frames inside ``span``."""
    start, end = span
    nx = sum(1 for v in x[start - 1:end] if v != SILENCE)
    ny = sum(1 for v in y[start - 1:end] if v != SILENCE)
    return nx >= min_frames and ny >= min_frames


def block_has_overlap(conv: Conversation, span: Span) -> bool:
    start, end = span
    if not 1 <= start <= end <= conv.n_frames:
        raise InvalidArgument(f"span {span} outside [1, {conv.n_frames}]")
    return spans_overlap(conv.user.labels, conv.system_reference.labels, span)


def overlap_blocks(x: Sequence[int], y: Sequence[int], plan: BlockPlan) -> set[int]:
    return {b for b, span in enumerate(plan, start=1) if spans_overlap(x, y, span)}


# ---------------------------------------------------------------------------
# VAD turn segmentation


@dataclass(frozen=True)
class TurnSegment:
    """One user turn found by the run-length silence detector.

    ``start_frame`` is the first speech frame of the turn, ``detect_frame`` the
    frame where the silence run reached ``delta`` (or the stream end for an
    open turn) and ``buffered_end = detect_frame - delta`` for closed turns.
    """

    index: int
    start_frame: int
    detect_frame: int
    buffered_end: int
    open: bool = False
    response_len: int = 0

    @property
    def buffered_span(self) -> Span:
        return (self.start_frame, self.buffered_end)

    @property
    def n_buffered(self) -> int:
        return self.buffered_end - self.start_frame + 1


def vad_segment(user: FrameStream | Sequence[int], delta: int = DEFAULT_DELTA) -> list[TurnSegment]:
    if delta < 1:
        raise InvalidArgument(f"delta must be >= 1, got {delta}")
    labels = user.labels if isinstance(user, FrameStream) else tuple(user)
    segments: list[TurnSegment] = []
    start = None
    last_speech = None
    run = 0
    for t, x in enumerate(labels, start=1):
        if x != SILENCE:
            if start is None:
                start = t
            last_speech = t
            run = 0
            continue
        if start is None:
            continue
        run += 1
        if run == delta:
            segments.append(TurnSegment(len(segments) + 1, start, t, t - delta))
            start = None
            run = 0
    if start is not None:
        segments.append(TurnSegment(len(segments) + 1, start, len(labels), last_speech, open=True))
    return segments


def utterances(words: Sequence[WordSpan], max_gap: int = DEFAULT_DELTA) -> list[list[WordSpan]]:
    """Group a channel's words into utterances split at pauses longer than ``max_gap`` frames."""
    groups: list[list[WordSpan]] = []
    for w in words:
        if groups and w.start - groups[-1][-1].end - 1 <= max_gap:
            groups[-1].append(w)
        else:
            groups.append([w])
    return groups


# ---------------------------------------------------------------------------
# Conversation record I/O (line-delimited JSON)


def _stream_words(channel: dict, fps: float, where: str) -> tuple[FrameStream, tuple[WordSpan, ...]]:
    try:
        frames = channel["frames"]
        words = tuple(WordSpan(str(w["w"]), int(w["start"]), int(w["end"])) for w in channel.get("words", []))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{where}: malformed channel ({exc})") from exc
    if not all(isinstance(x, int) and not isinstance(x, bool) for x in frames):
        raise FormatError(f"{where}: frames must be integers")
    try:
        return FrameStream(frames, fps), words
    except InvalidArgument as exc:
        raise FormatError(f"{where}: {exc}") from exc


def conversation_from_record(record: dict, where: str = "record") -> Conversation:
    if not isinstance(record, dict):
        raise FormatError(f"{where}: expected an object")
    fps = record.get("fps", DEFAULT_FPS)
    channels = record.get("channels")
    if not isinstance(channels, list) or len(channels) != 2:
        raise FormatError(f"{where}: expected exactly two channels")
    if not isinstance(fps, (int, float)) or fps <= 0:
        raise FormatError(f"{where}: fps must be positive")
    user, user_words = _stream_words(channels[0], fps, f"{where}.channels[0]")
    system, system_words = _stream_words(channels[1], fps, f"{where}.channels[1]")
    speakers = (str(channels[0].get("speaker", "A")), str(channels[1].get("speaker", "B")))
    try:
        return Conversation(
            user=user,
            system_reference=system,
            user_words=user_words,
            system_words=system_words,
            speaker_prompt=SpeakerPrompt(record.get("speaker_prompt", [])),
            conv_id=str(record.get("id", "")),
            speakers=speakers,
        )
    except FormatError as exc:
        raise FormatError(f"{where}: {exc}") from exc


def conversation_to_record(conv: Conversation) -> dict:
    def channel(speaker, stream, words):
        return {
            "speaker": speaker,
            "words": [{"w": w.word, "start": w.start, "end": w.end} for w in words],
            "frames": list(stream.labels),
        }

    fps = conv.fps
    return {
        "id": conv.conv_id,
        "fps": int(fps) if float(fps).is_integer() else fps,
        "channels": [
            channel(conv.speakers[0], conv.user, conv.user_words),
            channel(conv.speakers[1], conv.system_reference, conv.system_words),
        ],
        "speaker_prompt": list(conv.speaker_prompt.tokens),
    }


def load_conversations(path: str | Path) -> list[Conversation]:
    convs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            convs.append(conversation_from_record(record, f"{path}:{lineno}"))
    return convs


def save_conversations(convs: Iterable[Conversation], path: str | Path) -> None:
    with open(path, "w") as fh:
        for conv in convs:
            fh.write(json.dumps(conversation_to_record(conv), separators=(",", ":")) + "\n")
