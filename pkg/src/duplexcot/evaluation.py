"""Semantic, turn-taking and latency metrics, plus the block-size ablation."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import DEFAULT_DELTA, BlockPlan, Conversation, FrameStream, overlap_blocks, partition_blocks, seconds_to_frames, utterances
from .engine import EngineConfig, StageTrace, measure_timings, run_conversation
from .errors import InvalidArgument
from .models import NGramModel, SequenceModel, ToyCodec, normalize_words, score_sequence


# ---------------------------------------------------------------------------
# ROUGE


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _prf(overlap: float, n_hyp: int, n_ref: int) -> tuple[float, float, float]:
    p = overlap / n_hyp if n_hyp else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def rouge(hyp: str | Sequence[str], ref: str | Sequence[str], mode: int | str = 1) -> tuple[float, float, float]:
    """(precision, recall, F1) for ROUGE-1, ROUGE-2 or ROUGE-L."""
    h, r = normalize_words(hyp), normalize_words(ref)
    mode = str(mode).upper()
    if mode == "L":
        return _prf(lcs_length(h, r), len(h), len(r))
    if mode not in ("1", "2"):
        raise InvalidArgument(f"unknown ROUGE mode {mode!r}")
    n = int(mode)
    hg, rg = _ngrams(h, n), _ngrams(r, n)
    overlap = sum(min(c, rg[g]) for g, c in hg.items())
    return _prf(overlap, sum(hg.values()), sum(rg.values()))


# ---------------------------------------------------------------------------
# Perplexity


def perplexity(model: SequenceModel, tokens: Sequence[int], context: Sequence[int] = ()) -> float:
    return math.exp(-score_sequence(model, tokens, context) / len(tokens))


class TextJudge:
    """Word-level n-gram used to score generated text (index 0 is the unknown word)."""

    def __init__(self, words: Sequence[str], order: int = 3, alpha: float = 0.1):
        self.index = {w: i + 1 for i, w in enumerate(words)}
        self.model = NGramModel(order, alpha, len(words) + 1)

    def ids(self, words: Iterable[str]) -> list[int]:
        return [self.index.get(w, 0) for w in words]

    def fit(self, sentences: Iterable[Sequence[str]]) -> "TextJudge":
        for s in sentences:
            if s:
                self.model.update(self.ids(s))
        return self

    def perplexity(self, words: Sequence[str]) -> float | None:
        return perplexity(self.model, self.ids(words)) if words else None


def fit_text_judge(convs: Iterable[Conversation], words: Sequence[str], max_gap: int = DEFAULT_DELTA) -> TextJudge:
    sentences = []
    for conv in convs:
        for channel in (conv.user_words, conv.system_words):
            sentences += [[w.word for w in u] for u in utterances(channel, max_gap)]
    return TextJudge(words).fit(sentences)


# ---------------------------------------------------------------------------
# Overlap


@dataclass(frozen=True)
class OverlapStats:
    pct: float
    precision: float | None
    recall: float | None
    n_blocks: int
    n_sys: int
    n_ref: int
    n_both: int


def overlap_stats(sys: FrameStream, ref: FrameStream, user: FrameStream, plan: BlockPlan) -> OverlapStats:
    if not len(sys) == len(ref) == len(user) == plan.n_frames:
        raise InvalidArgument("streams and plan must have equal length")
    sys_ov = overlap_blocks(user.labels, sys.labels, plan)
    ref_ov = overlap_blocks(user.labels, ref.labels, plan)
    return _overlap_from_counts(len(plan), len(sys_ov), len(ref_ov), len(sys_ov & ref_ov))


def _overlap_from_counts(B: int, n_sys: int, n_ref: int, n_both: int) -> OverlapStats:
    return OverlapStats(
        pct=n_sys / B if B else 0.0,
        precision=n_both / n_sys if n_sys else None,
        recall=n_both / n_ref if n_ref else None,
        n_blocks=B,
        n_sys=n_sys,
        n_ref=n_ref,
        n_both=n_both,
    )


# ---------------------------------------------------------------------------
# Style rank


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """Rank 1 = highest score; tied scores share the mean of their ranks."""
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def style_rank(outputs: Mapping[str, np.ndarray], references: np.ndarray) -> dict[str, float]:
    """Mean rank of each system by cosine similarity to the reference embedding."""
    refs = np.atleast_2d(np.asarray(references, dtype=np.float64))
    names = list(outputs)
    embs = [np.atleast_2d(np.asarray(outputs[n], dtype=np.float64)) for n in names]
    for n, e in zip(names, embs):
        if e.shape != refs.shape:
            raise InvalidArgument(f"{n}: embeddings {e.shape} do not match references {refs.shape}")
    ref_norm = refs / np.linalg.norm(refs, axis=1, keepdims=True)
    sims = np.stack([np.sum(e / np.linalg.norm(e, axis=1, keepdims=True) * ref_norm, axis=1) for e in embs])
    ranks = np.stack([_average_ranks(sims[:, u]) for u in range(refs.shape[0])], axis=1)
    return {n: float(ranks[i].mean()) for i, n in enumerate(names)}


# ---------------------------------------------------------------------------
# Per-turn semantic scoring


def turn_pairs(conv: Conversation, system: FrameStream, codec: ToyCodec, plan: BlockPlan, max_gap: int = DEFAULT_DELTA) -> list[tuple[list[str], list[str]]]:
    """(hypothesis, reference) words for each reference system turn.

    The hypothesis is the decoded system output over every block the reference
    turn touches, so block outputs within a turn are concatenated.
    """
    pairs = []
    for utt in utterances(conv.system_words, max_gap):
        start = plan.span(plan.block_of(utt[0].start))[0]
        end = plan.span(plan.block_of(utt[-1].end))[1]
        pairs.append((codec.decode(system.span(start, end)), [w.word for w in utt]))
    return pairs


@dataclass
class MetricsReport:
    rouge1: tuple[float, float, float]
    rouge2: tuple[float, float, float]
    rougeL: tuple[float, float, float]
    perplexity: float | None
    overlap_pct: float
    overlap_precision: float | None
    overlap_recall: float | None
    rtf_mean: float | None
    first_token_wait_mean: float | None
    style_similarity: float | None = None
    n_turns: int = 0
    n_blocks: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("rouge1", "rouge2", "rougeL"):
            d[k] = list(d[k])
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, obj: Mapping) -> "MetricsReport":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in obj.items() if k in known}
        for k in ("rouge1", "rouge2", "rougeL"):
            d[k] = tuple(d[k])
        return cls(**d)

    def check(self) -> None:
        rates = [*self.rouge1, *self.rouge2, *self.rougeL, self.overlap_pct, self.overlap_precision, self.overlap_recall]
        for x in rates:
            if x is not None and not 0.0 <= x <= 1.0:
                raise ValueError(f"rate {x} outside [0, 1]")
        if self.perplexity is not None and self.perplexity < 1.0:
            raise ValueError("perplexity below 1")
        if self.rtf_mean is not None and self.rtf_mean < 0:
            raise ValueError("negative RTF")


def _mean_prf(items: list[tuple[float, float, float]]) -> tuple[float, float, float]:
    if not items:
        return (0.0, 0.0, 0.0)
    return tuple(float(x) for x in np.mean(np.asarray(items), axis=0))


def evaluate(
    convs: Sequence[Conversation],
    outputs: Sequence[FrameStream],
    traces: Sequence[StageTrace] | None,
    codec: ToyCodec,
    n_block: int,
    judge: TextJudge | None = None,
    delta: int = DEFAULT_DELTA,
) -> MetricsReport:
    """Aggregate metrics over a set of conversations and the system output for each."""
    if len(convs) != len(outputs):
        raise InvalidArgument("one output stream per conversation is required")
    r1, r2, rl = [], [], []
    hyp_words: list[str] = []
    counts = np.zeros(4, dtype=int)
    waits, rtfs = [], []
    for i, (conv, sys) in enumerate(zip(convs, outputs)):
        plan = partition_blocks(conv.n_frames, n_block)
        for hyp, ref in turn_pairs(conv, sys, codec, plan, delta):
            r1.append(rouge(hyp, ref, 1))
            r2.append(rouge(hyp, ref, 2))
            rl.append(rouge(hyp, ref, "L"))
        hyp_words += codec.decode(sys.labels)
        ov = overlap_stats(sys, conv.system_reference, conv.user, plan)
        counts += (ov.n_blocks, ov.n_sys, ov.n_ref, ov.n_both)
        if traces is not None:
            timing = measure_timings(traces[i], conv.user, delta)
            waits += [t["wait_s"] for t in timing.turns]
            rtfs += [t["rtf"] for t in timing.turns]
    ov = _overlap_from_counts(*counts)
    report = MetricsReport(
        rouge1=_mean_prf(r1),
        rouge2=_mean_prf(r2),
        rougeL=_mean_prf(rl),
        perplexity=judge.perplexity(hyp_words) if judge is not None else None,
        overlap_pct=ov.pct,
        overlap_precision=ov.precision,
        overlap_recall=ov.recall,
        rtf_mean=float(np.mean(rtfs)) if rtfs else None,
        first_token_wait_mean=float(np.mean(waits)) if waits else None,
        n_turns=len(rl),
        n_blocks=int(counts[0]),
    )
    report.check()
    return report


def reports_to_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: json.dumps(v) if isinstance(v, (list, tuple, dict)) else v for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Block-size ablation


def ablate_block_size(
    convs: Sequence[Conversation],
    model: SequenceModel | Callable[[int], SequenceModel],
    codec: ToyCodec,
    vocab,
    sizes_s: Sequence[float],
    config: EngineConfig,
    delta: int = DEFAULT_DELTA,
) -> dict:
    """Run the duplex engine at each block size with identical seeds.

    ``model`` may be a factory taking ``n_block`` so each size gets its own
    model. Returns the table plus per-conversation waits and whether the mean
    wait strictly increases with block size on every conversation.
    """
    if len(sizes_s) < 2:
        raise InvalidArgument("need at least two block sizes")
    if not convs:
        raise InvalidArgument("need at least one conversation")
    fps = convs[0].fps
    sizes_s = sorted(sizes_s)
    rows, per_conv = [], []
    for size in sizes_s:
        n_block = seconds_to_frames(size, fps)
        m = model(n_block) if not isinstance(model, SequenceModel) else model
        cfg = config.replace(n_block=n_block)
        outputs, traces, waits = [], [], []
        for conv in convs:
            out, trace = run_conversation(conv, m, codec, vocab, cfg)
            outputs.append(out)
            traces.append(trace)
            t = measure_timings(trace, conv.user, delta)
            waits.append(t.first_token_wait_mean)
        report = evaluate(convs, outputs, traces, codec, n_block, delta=delta)
        rows.append({
            "block_s": size,
            "n_block": n_block,
            "rougeL_f1": report.rougeL[2],
            "rtf_mean": report.rtf_mean,
            "first_token_wait_mean": report.first_token_wait_mean,
        })
        per_conv.append(waits)
    increasing = all(
        all(a is not None and b is not None and a < b for a, b in zip(col, col[1:]))
        for col in zip(*per_conv)
    )
    return {"rows": rows, "per_conversation_wait": per_conv, "wait_increasing": increasing}
