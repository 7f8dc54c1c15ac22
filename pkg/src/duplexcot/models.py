"""Sequence-model contract, desk-scale models and decoding policies."""

from __future__ import annotations

import json
import math
import re
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import SILENCE
from .errors import FormatError, InvalidArgument, ModelContractError

NGRAM_FORMAT = "duplexcot-ngram"
NGRAM_VERSION = 1
LOGSUMEXP_TOL = 1e-9


@dataclass(frozen=True)
class DecodeParams:
    strategy: str = "topk"
    k: int = 30
    temperature: float = 0.8
    seed: int = 0
    max_new_tokens: int = 64
    n_candidates: int = 10

    def __post_init__(self):
        if self.strategy not in ("greedy", "topk"):
            raise InvalidArgument(f"unknown strategy {self.strategy!r}")
        if self.k < 1:
            raise InvalidArgument("k must be >= 1")
        if not self.temperature > 0:
            raise InvalidArgument("temperature must be > 0")
        if self.max_new_tokens < 1:
            raise InvalidArgument("max_new_tokens must be >= 1")
        if self.n_candidates < 1:
            raise InvalidArgument("n_candidates must be >= 1")

    def replace(self, **changes) -> "DecodeParams":
        return DecodeParams(**{**self.__dict__, **changes})


# ---------------------------------------------------------------------------
# Model contract


class SequenceModel:
    """Anything that maps a token context to a log distribution over the vocabulary.

    ``latency_s`` is the declared cost of one call, used by the simulated clock.
    """

    vocab_size: int
    reentrant: bool = True
    latency_s: float = 0.0

    def next_token_log_probs(self, context: Sequence[int]) -> np.ndarray:
        raise NotImplementedError


def check_log_probs(model: SequenceModel, context: Sequence[int]) -> np.ndarray:
    logp = np.asarray(model.next_token_log_probs(context), dtype=np.float64)
    if logp.shape != (model.vocab_size,):
        raise ModelContractError(
            f"{type(model).__name__} returned shape {logp.shape}, expected ({model.vocab_size},)"
        )
    top = logp.max()
    if not np.isfinite(top):
        raise ModelContractError(f"{type(model).__name__} returned NaN or +inf log-probs")
    total = top + math.log(np.exp(logp - top).sum())
    if not abs(total) <= LOGSUMEXP_TOL:
        raise ModelContractError(
            f"{type(model).__name__} log-probs do not normalize (logsumexp = {total:.3g})"
        )
    return logp


class UniformModel(SequenceModel):
    def __init__(self, vocab_size: int, latency_s: float = 0.0):
        self.vocab_size = vocab_size
        self.latency_s = latency_s
        self._logp = np.full(vocab_size, -math.log(vocab_size))

    def next_token_log_probs(self, context):
        return self._logp


def _as_distribution(spec, vocab_size: int) -> np.ndarray:
    probs = np.zeros(vocab_size)
    if isinstance(spec, (int, np.integer)):
        probs[int(spec)] = 1.0
    else:
        for tok, p in spec.items():
            probs[int(tok)] = float(p)
        # an all-zero table is left as NaN for the contract check to reject
        with np.errstate(invalid="ignore"):
            probs /= probs.sum()
    with np.errstate(divide="ignore"):
        return np.log(probs)


class ScriptedModel(SequenceModel):
    """Transition table keyed by context suffix; the longest matching suffix wins.

    Each rule maps to either a token (deterministic) or ``{token: weight}``.
    Contexts matching no rule use ``default``.
    """

    def __init__(self, vocab_size: int, rules: Mapping[tuple, object], default=None, latency_s: float = 0.0):
        self.vocab_size = vocab_size
        self.latency_s = latency_s
        self.rules = {tuple(k): _as_distribution(v, vocab_size) for k, v in rules.items()}
        self._max_len = max((len(k) for k in self.rules), default=0)
        if default is None:
            self._default = np.full(vocab_size, -math.log(vocab_size))
        else:
            self._default = _as_distribution(default, vocab_size)

    def next_token_log_probs(self, context):
        ctx = tuple(context)
        for n in range(min(self._max_len, len(ctx)), -1, -1):
            key = ctx[len(ctx) - n:]
            if key in self.rules:
                return self.rules[key]
        return self._default

    @classmethod
    def from_json(cls, obj: Mapping) -> "ScriptedModel":
        try:
            rules = {
                tuple(r["context"]): (r["next"] if isinstance(r["next"], int) else {int(k): v for k, v in r["next"].items()})
                for r in obj["rules"]
            }
            return cls(int(obj["vocab_size"]), rules, obj.get("default"), float(obj.get("latency_s", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed scripted model: {exc}") from exc


class DelayedModel(SequenceModel):
    """Wraps a model with a per-call latency, optionally really sleeping."""

    def __init__(self, inner: SequenceModel, latency_s: float, sleep: bool = False):
        self.inner = inner
        self.vocab_size = inner.vocab_size
        self.reentrant = inner.reentrant
        self.latency_s = latency_s
        self.sleep = sleep

    def next_token_log_probs(self, context):
        if self.sleep:
            time.sleep(self.latency_s)
        return self.inner.next_token_log_probs(context)


class NGramModel(SequenceModel):
    """Add-alpha smoothed n-gram model over integer tokens.

    Contexts shorter than ``order - 1`` (sequence starts) are kept as their own
    histories. A context never seen in training gives the uniform distribution.
    """

    def __init__(self, order: int, alpha: float, vocab_size: int, counts=None, latency_s: float = 0.0):
        if order < 1:
            raise InvalidArgument("order must be >= 1")
        if not alpha > 0:
            raise InvalidArgument("alpha must be > 0")
        self.order = order
        self.alpha = alpha
        self.vocab_size = vocab_size
        self.latency_s = latency_s
        self.counts: dict[tuple, dict[int, int]] = counts if counts is not None else {}
        self._cached = lru_cache(maxsize=65536)(self._log_probs)

    def __getstate__(self):
        state = dict(self.__dict__)
        del state["_cached"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._cached = lru_cache(maxsize=65536)(self._log_probs)

    def history(self, context: Sequence[int]) -> tuple:
        n = self.order - 1
        if n == 0:
            return ()
        return tuple(context[-n:]) if len(context) >= n else tuple(context)

    def update(self, sequence: Sequence[int]) -> None:
        for i, tok in enumerate(sequence):
            if not 0 <= tok < self.vocab_size:
                raise InvalidArgument(f"token {tok} outside vocabulary of size {self.vocab_size}")
            followers = self.counts.setdefault(self.history(sequence[:i]), {})
            followers[tok] = followers.get(tok, 0) + 1
        self._cached.cache_clear()

    def _log_probs(self, hist: tuple) -> np.ndarray:
        vec = np.full(self.vocab_size, self.alpha)
        followers = self.counts.get(hist)
        total = 0
        if followers:
            toks = np.fromiter(followers.keys(), dtype=np.int64)
            cnts = np.fromiter(followers.values(), dtype=np.float64)
            vec[toks] += cnts
            total = cnts.sum()
        out = np.log(vec / (total + self.alpha * self.vocab_size))
        out.flags.writeable = False
        return out

    def next_token_log_probs(self, context):
        return self._cached(self.history(context))

    def prob(self, context: Sequence[int], token: int) -> float:
        return float(np.exp(self.next_token_log_probs(context)[token]))

    def to_json(self) -> dict:
        return {
            "format": NGRAM_FORMAT,
            "version": NGRAM_VERSION,
            "order": self.order,
            "alpha": self.alpha,
            "vocab_size": self.vocab_size,
            "counts": [
                [list(hist), sorted(followers.items())]
                for hist, followers in sorted(self.counts.items())
            ],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "NGramModel":
        if obj.get("format") != NGRAM_FORMAT or obj.get("version") != NGRAM_VERSION:
            raise FormatError(f"not a {NGRAM_FORMAT} v{NGRAM_VERSION} file")
        try:
            counts = {tuple(h): {int(t): int(c) for t, c in f} for h, f in obj["counts"]}
            model = cls(int(obj["order"]), float(obj["alpha"]), int(obj["vocab_size"]), counts)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed n-gram model: {exc}") from exc
        for followers in counts.values():
            if any(c < 0 or not 0 <= t < model.vocab_size for t, c in followers.items()):
                raise FormatError("n-gram counts must be non-negative and inside the vocabulary")
        return model

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, separators=(",", ":"))

    @classmethod
    def load(cls, path: str | Path) -> "NGramModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def ngram_train(corpus: Iterable[Sequence[int]], order: int = 3, alpha: float = 0.1, vocab_size: int | None = None) -> NGramModel:
    corpus = [list(seq) for seq in corpus]
    if not corpus or not any(corpus):
        raise InvalidArgument("cannot train on an empty corpus")
    if vocab_size is None:
        vocab_size = max(max(seq) for seq in corpus if seq) + 1
    model = NGramModel(order, alpha, vocab_size)
    for seq in corpus:
        model.update(seq)
    return model


def score_sequence(model: SequenceModel, tokens: Sequence[int], context: Sequence[int] = ()) -> float:
    if len(tokens) == 0:
        raise InvalidArgument("cannot score an empty sequence")
    ctx = list(context)
    total = 0.0
    for tok in tokens:
        total += float(check_log_probs(model, ctx)[tok])
        ctx.append(tok)
    return total


# ---------------------------------------------------------------------------
# Decoding


def greedy_decode(model: SequenceModel, context: Sequence[int], stop_tokens: Iterable[int] = (), max_new: int = 64) -> list[int]:
    stop = set(stop_tokens)
    ctx = list(context)
    out: list[int] = []
    for _ in range(max_new):
        tok = int(np.argmax(check_log_probs(model, ctx)))
        if tok in stop:
            break
        out.append(tok)
        ctx.append(tok)
    return out


def _topk_step(logp: np.ndarray, k: int, temperature: float, rng: np.random.Generator) -> int:
    # stable sort keeps the lowest id first among ties, so k=1 matches argmax
    order = np.argsort(-logp, kind="stable")[:k]
    if len(order) == 1:
        return int(order[0])
    logits = logp[order] / temperature
    logits -= logits.max()
    probs = np.exp(logits)
    cdf = np.cumsum(probs / probs.sum())
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return int(order[min(idx, len(order) - 1)])


def topk_sample(
    model: SequenceModel,
    context: Sequence[int],
    params: DecodeParams,
    stop_tokens: Iterable[int] = (),
    rng: np.random.Generator | None = None,
    max_new: int | None = None,
    on_token: Callable[[int], None] | None = None,
) -> list[int]:
    if rng is None:
        rng = np.random.default_rng(params.seed)
    stop = set(stop_tokens)
    ctx = list(context)
    out: list[int] = []
    for _ in range(params.max_new_tokens if max_new is None else max_new):
        tok = _topk_step(check_log_probs(model, ctx), params.k, params.temperature, rng)
        if on_token is not None:
            on_token(tok)
        if tok in stop:
            break
        out.append(tok)
        ctx.append(tok)
    return out


# ---------------------------------------------------------------------------
# Toy codec and intelligibility


class ToyCodec:
    """Bijective table from words to fixed-length speech-token sequences."""

    def __init__(self, table: Mapping[str, Sequence[int]]):
        self.table = {w: tuple(int(t) for t in toks) for w, toks in table.items()}
        lengths = {len(t) for t in self.table.values()}
        if len(lengths) != 1:
            raise InvalidArgument("every codec entry must have the same length")
        self.frames_per_word = lengths.pop()
        self._inverse = {toks: w for w, toks in self.table.items()}
        if len(self._inverse) != len(self.table):
            raise InvalidArgument("codec table is not injective")
        if any(SILENCE in toks for toks in self.table.values()):
            raise InvalidArgument("codec entries may not contain the silence label")

    @classmethod
    def build(cls, words: Iterable[str], frames_per_word: int = 5) -> "ToyCodec":
        """Give each word its own block of token ids so no two entries share a token."""
        words = sorted(set(words))
        L = frames_per_word
        return cls({w: [1 + i * L + j for j in range(L)] for i, w in enumerate(words)})

    @property
    def words(self) -> list[str]:
        return sorted(self.table)

    @property
    def n_speech(self) -> int:
        """Size of the speech label space (silence plus every codec token)."""
        return 1 + max(max(t) for t in self.table.values())

    def encode(self, word: str) -> tuple[int, ...]:
        return self.table[word]

    def encode_words(self, words: Iterable[str]) -> list[int]:
        out: list[int] = []
        for w in words:
            out.extend(self.table[w])
        return out

    def decode(self, labels: Sequence[int]) -> list[str]:
        """Greedy left-to-right decoding; unrecognised frames are skipped."""
        L = self.frames_per_word
        words = []
        i = 0
        labels = tuple(labels)
        while i < len(labels):
            if labels[i] == SILENCE:
                i += 1
                continue
            word = self._inverse.get(labels[i:i + L])
            if word is None:
                i += 1
            else:
                words.append(word)
                i += L
        return words

    def to_json(self) -> dict:
        return {"frames_per_word": self.frames_per_word, "table": {w: list(t) for w, t in sorted(self.table.items())}}

    @classmethod
    def from_json(cls, obj: Mapping) -> "ToyCodec":
        try:
            return cls(obj["table"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed codec: {exc}") from exc

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "ToyCodec":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


_PUNCT = re.compile(r"[^\w\s'-]")


def normalize_words(text: str | Sequence[str]) -> list[str]:
    """Case-fold, strip punctuation, split on whitespace."""
    if not isinstance(text, str):
        text = " ".join(text)
    return _PUNCT.sub(" ", text.casefold()).split()


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def wer(hyp: str | Sequence[str], ref: str | Sequence[str]) -> float:
    h, r = normalize_words(hyp), normalize_words(ref)
    return edit_distance(h, r) / max(len(r), 1)


def most_intelligible(candidates: Sequence[Sequence[int]], intended: str | Sequence[str], codec: ToyCodec) -> tuple[int, list[float]]:
    """Index of the candidate whose decoded words have the lowest WER (first wins ties)."""
    scores = [wer(codec.decode(c), intended) for c in candidates]
    return int(np.argmin(scores)), scores


def best_of_n_speech(
    model: SequenceModel,
    context: Sequence[int],
    intended_text: str | Sequence[str],
    codec: ToyCodec,
    params: DecodeParams,
    stop_tokens: Iterable[int] = (),
    rng: np.random.Generator | None = None,
    max_new: int | None = None,
    postprocess: Callable[[list[int]], list[int]] | None = None,
) -> tuple[list[int], int, list[float]]:
    """Sample ``params.n_candidates`` continuations and keep the most intelligible one.

    Returns ``(tokens, chosen_index, wers)``.
    """
    if rng is None:
        rng = np.random.default_rng(params.seed)
    stop_tokens = tuple(stop_tokens)
    candidates = []
    for _ in range(params.n_candidates):
        cand = topk_sample(model, context, params, stop_tokens, rng=rng, max_new=max_new)
        candidates.append(postprocess(cand) if postprocess else cand)
    idx, scores = most_intelligible(candidates, intended_text, codec)
    return candidates[idx], idx, scores
