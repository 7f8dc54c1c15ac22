"""CTC forced alignment.

The emission matrix has ``V + 1`` columns; column ``V`` is the blank. Labels
``0..V-1`` are ordinary tokens. Scores are arbitrary finite log scores.

Among paths with the best score, :func:`forced_align` returns the one whose
sequence of lattice states is lexicographically greatest, i.e. every target
token is entered as early as possible. :func:`brute_force_align` applies the
same rule by enumeration and exists to check the DP.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import WordSpan
from .errors import FormatError, InfeasibleAlignment, InvalidArgument

BRUTE_FORCE_MAX_T = 10
BRUTE_FORCE_MAX_V = 5


@dataclass(frozen=True)
class EmissionMatrix:
    log_scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.log_scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 2:
            raise InvalidArgument(f"emission matrix must be T x (V+1) with T, V >= 1, got {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise InvalidArgument("emission scores must be finite")
        object.__setattr__(self, "log_scores", scores)

    @property
    def T(self) -> int:
        return self.log_scores.shape[0]

    @property
    def V(self) -> int:
        return self.log_scores.shape[1] - 1

    @property
    def blank(self) -> int:
        return self.V

    def to_json(self) -> dict:
        return {"T": self.T, "V": self.V, "scores": self.log_scores.ravel().tolist()}

    @classmethod
    def from_json(cls, obj: Mapping) -> "EmissionMatrix":
        try:
            T, V, scores = int(obj["T"]), int(obj["V"]), obj["scores"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed emission record: {exc}") from exc
        if len(scores) != T * (V + 1):
            raise FormatError(f"expected {T * (V + 1)} scores, got {len(scores)}")
        return cls(np.asarray(scores, dtype=np.float64).reshape(T, V + 1))


@dataclass(frozen=True)
class Alignment:
    labels: tuple[int, ...]
    score: float
    target: tuple[int, ...]
    blank: int

    def to_json(self) -> dict:
        return {"labels": list(self.labels), "score": self.score}


def load_emissions(path: str | Path) -> EmissionMatrix:
    path = Path(path)
    if path.suffix == ".npy":
        return EmissionMatrix(np.load(path))
    with open(path) as fh:
        return EmissionMatrix.from_json(json.load(fh))


def min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check(em: EmissionMatrix, target: Sequence[int]) -> tuple[int, ...]:
    target = tuple(int(x) for x in target)
    if not target:
        raise InvalidArgument("target must be non-empty")
    for tok in target:
        if not 0 <= tok < em.V:
            raise InvalidArgument(f"target token {tok} outside vocabulary [0, {em.V})")
    need = min_frames(target)
    if em.T < need:
        raise InfeasibleAlignment(f"{em.T} frames cannot hold target needing {need}")
    return target


def collapse(labels: Sequence[int], blank: int) -> list[int]:
    out = []
    prev = None
    for x in labels:
        if x != prev and x != blank:
            out.append(x)
        prev = x
    return out


def state_path(labels: Sequence[int], target: Sequence[int], blank: int) -> list[int]:
    """Lattice states (``2i+1`` for token ``i``, ``2i`` for the blank before it)."""
    states = []
    pos = -1
    prev = None
    for x in labels:
        if x == blank:
            states.append(2 * (pos + 1))
        else:
            if prev is None or x != prev or prev == blank:
                pos += 1
            states.append(2 * pos + 1)
        prev = x
    return states


def path_score(em: EmissionMatrix, labels: Sequence[int]) -> float:
    return math.fsum(float(em.log_scores[t, x]) for t, x in enumerate(labels))


def forced_align(em: EmissionMatrix, target: Sequence[int]) -> Alignment:
    target = _check(em, target)
    T, blank = em.T, em.blank
    L = len(target)
    S = 2 * L + 1
    lab = np.full(S, blank, dtype=np.int64)
    lab[1::2] = target
    # state s may jump to s + 2 when s + 2 is a token differing from token s
    can_skip = np.zeros(S, dtype=bool)
    can_skip[1:S - 2:2] = lab[1:S - 2:2] != lab[3::2]

    emit = em.log_scores[:, lab]
    # best score from (t, s) to the end, including frame t
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        best = nxt.copy()
        best[:-1] = np.maximum(best[:-1], nxt[1:])
        skip = np.full(S, -np.inf)
        skip[:-2] = np.where(can_skip[:-2], nxt[2:], -np.inf)
        beta[t] = emit[t] + np.maximum(best, skip)

    starts = [1, 0]
    s = max(starts, key=lambda k: beta[0, k])
    if not np.isfinite(beta[0, s]):
        raise InfeasibleAlignment("no path collapses to the target")
    path = [s]
    for t in range(1, T):
        options = [s]
        if s + 1 < S:
            options.append(s + 1)
        if s + 2 < S and can_skip[s]:
            options.append(s + 2)
        # highest state first so ties favour advancing
        s = max(reversed(options), key=lambda k: beta[t, k])
        path.append(s)
    labels = tuple(int(lab[k]) for k in path)
    return Alignment(labels, path_score(em, labels), target, blank)


def brute_force_align(em: EmissionMatrix, target: Sequence[int]) -> Alignment:
    if em.T > BRUTE_FORCE_MAX_T or em.V > BRUTE_FORCE_MAX_V:
        raise InvalidArgument(
            f"brute force limited to T <= {BRUTE_FORCE_MAX_T}, V <= {BRUTE_FORCE_MAX_V}"
        )
    target = _check(em, target)
    blank = em.blank
    alphabet = sorted(set(target)) + [blank]
    best = None
    for labels in itertools.product(alphabet, repeat=em.T):
        if collapse(labels, blank) != list(target):
            continue
        key = (path_score(em, labels), state_path(labels, target, blank))
        if best is None or key > best[0]:
            best = (key, labels)
    if best is None:
        raise InfeasibleAlignment("no path collapses to the target")
    (score, _), labels = best
    return Alignment(tuple(labels), score, target, blank)


def word_timestamps(
    al: Alignment,
    token_to_word: Mapping[int, str] | Sequence[tuple[int, str]],
) -> list[WordSpan]:
    """Word spans (1-based, inclusive) from an alignment.

    ``token_to_word`` is either a dict from token id to word, in which case
    consecutive target tokens with the same word are merged, or a sequence
    giving ``(word_index, word)`` for every position of the target.
    """
    target = al.target
    if not target:
        return []
    if isinstance(token_to_word, Mapping):
        try:
            keys = [(token_to_word[tok], token_to_word[tok]) for tok in target]
        except KeyError as exc:
            raise InvalidArgument(f"token {exc.args[0]} has no word") from exc
        # merge runs of identical words
        grouped, prev, idx = [], None, -1
        for word, _ in keys:
            if word != prev:
                idx += 1
            grouped.append((idx, word))
            prev = word
        keys = grouped
    else:
        keys = list(token_to_word)
        if len(keys) != len(target):
            raise InvalidArgument(f"mapping covers {len(keys)} of {len(target)} target positions")

    spans: dict[int, list] = {}
    for t, state in enumerate(state_path(al.labels, target, al.blank), start=1):
        if state % 2 == 0:
            continue
        idx, word = keys[state // 2]
        if idx in spans:
            spans[idx][2] = t
        else:
            spans[idx] = [word, t, t]
    return [WordSpan(w, s, e) for w, s, e in (spans[k] for k in sorted(spans))]


def synthetic_emissions(
    frames: Sequence[int],
    n_tokens: int,
    rng: np.random.Generator,
    noise: float = 0.5,
    peak: float = 4.0,
    silence: int = 0,
) -> EmissionMatrix:
    """Emission scores that favour each frame's own label (silence favours the blank)."""
    T = len(frames)
    scores = rng.normal(0.0, noise, size=(T, n_tokens + 1))
    for t, x in enumerate(frames):
        scores[t, n_tokens if x == silence else x] += peak
    return EmissionMatrix(scores)
