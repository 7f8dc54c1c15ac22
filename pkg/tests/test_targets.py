import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_conv
from duplexcot.core import SILENCE, WordSpan, partition_blocks
from duplexcot.errors import InvalidArgument
from duplexcot.targets import (
    Stage,
    Variant,
    Vocabulary,
    block_targets,
    build_block_instances,
    build_turn_instances,
    exchanges,
    load_instances,
    save_instances,
    slice_alignment,
    stage_sequence,
    window_sequences,
)

WORDS = ("hello", "there", "yes", "no", "maybe")


@pytest.fixture
def vocab():
    return Vocabulary(n_speech=4, words=WORDS)


def test_vocabulary_layout(vocab):
    assert vocab.size == 4 + 8 + len(WORDS)
    assert vocab.word_of(vocab.word_id("yes")) == "yes"
    assert vocab.word_id("zebra") == vocab.unk
    assert vocab.is_speech(0) and not vocab.is_speech(vocab.usr)
    assert len({vocab.usr, vocab.asr, vocab.res, vocab.spe, vocab.eob, vocab.eot, vocab.spk}) == 7
    assert Vocabulary.from_json(vocab.to_json()) == vocab
    with pytest.raises(InvalidArgument):
        vocab.word_of(0)


def test_variant_stages():
    assert Variant.FULL.stages == (Stage.ASR, Stage.RES, Stage.SPE)
    assert Variant.ASR.stages == (Stage.ASR, Stage.SPE)
    assert Variant.RESPONSE.stages == (Stage.RES, Stage.SPE)
    assert Variant.NONE.stages == (Stage.SPE,)
    assert Variant.parse("Full") is Variant.FULL
    with pytest.raises(InvalidArgument):
        Variant.parse("everything")


def test_boundary_word_in_both_blocks():
    plan = partition_blocks(150, 50)
    words = [WordSpan("hello", 48, 52), WordSpan("there", 110, 120)]
    assert [w.word for w in slice_alignment(words, plan, 1)] == ["hello"]
    assert [w.word for w in slice_alignment(words, plan, 2)] == ["hello"]
    assert [w.word for w in slice_alignment(words, plan, 3)] == ["there"]
    assert all(slice_alignment([], plan, b) == [] for b in (1, 2, 3))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.lists(st.tuples(st.integers(0, 6), st.integers(1, 12)), max_size=12))
def test_slice_membership_matches_intersection(n_block, gaps_lengths):
    words, t = [], 0
    for i, (gap, length) in enumerate(gaps_lengths):
        start = t + gap + 1
        words.append(WordSpan(f"w{i}", start, start + length - 1))
        t = start + length - 1
    T = max(t, 1)
    plan = partition_blocks(T, n_block)
    for b in range(1, len(plan) + 1):
        s, e = plan.span(b)
        got = {w.word for w in slice_alignment(words, plan, b)}
        assert got == {w.word for w in words if w.start <= e and s <= w.end}
    for w in words:
        blocks = {b for b in range(1, len(plan) + 1) if w in slice_alignment(words, plan, b)}
        assert blocks == set(range(plan.block_of(w.start), plan.block_of(w.end) + 1))


def test_block_targets_of_silent_block(vocab):
    conv = make_conv(100, user=[("hello", 60, 65)], system=[("yes", 70, 75)])
    plan = partition_blocks(100, 50)
    tgt = block_targets(conv, plan, 1)
    assert tgt.asr_words == () and tgt.res_words == ()
    assert set(tgt.speech_frames) == {SILENCE} and len(tgt.speech_frames) == 50
    (inst, _) = build_block_instances(conv, Variant.FULL, plan, vocab)
    assert inst.target == [vocab.asr, vocab.res, vocab.spe] + [SILENCE] * 50 + [vocab.eob]


def test_window_counts_120s():
    conv = make_conv(3000, user=[("hello", 10, 14)], fps=25)
    plan = partition_blocks(3000, 50)
    insts = build_block_instances(conv, Variant.FULL, plan, Vocabulary(4, WORDS), window_s=60)
    windows = {}
    for inst in insts:
        windows.setdefault(inst.meta["window"], []).append(inst.meta["block"])
    assert sorted(windows) == [1, 2]
    assert [len(v) for v in windows.values()] == [30, 30]
    # the context resets at each window
    first_of_second = next(i for i in insts if i.meta["block"] == 31)
    assert first_of_second.context[0] == Vocabulary(4, WORDS).usr
    assert len(first_of_second.context) == 1 + 50


def test_context_grows_within_window(vocab):
    conv = make_conv(150, user=[("hello", 10, 14)], system=[("yes", 60, 64)])
    plan = partition_blocks(150, 50)
    insts = build_block_instances(conv, Variant.RESPONSE, plan, vocab)
    for prev, cur in zip(insts, insts[1:]):
        assert cur.context[: len(prev.context) + len(prev.target)] == prev.context + prev.target
    assert [inst.meta["block"] for inst in insts] == [1, 2, 3]


@pytest.mark.parametrize("variant", list(Variant))
def test_stage_order_in_targets(vocab, variant):
    conv = make_conv(100, user=[("hello", 10, 14)], system=[("yes", 48, 55)])
    for inst in build_block_instances(conv, variant, partition_blocks(100, 50), vocab):
        assert stage_sequence(inst.target, vocab) == list(variant.stages)
        assert inst.target[-1] == vocab.eob


def test_response_variant_has_no_asr_tokens(vocab):
    conv = make_conv(100, user=[("hello", 10, 14)], system=[("yes", 48, 55)])
    insts = build_block_instances(conv, Variant.RESPONSE, partition_blocks(100, 50), vocab)
    assert all(vocab.asr not in inst.target for inst in insts)
    # the reply straddles the boundary so it is a target in both blocks
    assert all(vocab.word_id("yes") in inst.target for inst in insts)


def test_window_sequences_concatenate(vocab):
    conv = make_conv(100, user=[("hello", 10, 14)])
    plan = partition_blocks(100, 50)
    (seq,) = window_sequences(conv, Variant.FULL, plan, vocab)
    insts = build_block_instances(conv, Variant.FULL, plan, vocab)
    assert seq == insts[-1].context + insts[-1].target


# ---------------------------------------------------------------- turn level


def alternating(n_exchanges, assistant_first=False):
    user, system, t = [], [], 1
    for k in range(n_exchanges):
        turns = [(system, "yes"), (user, "hello")] if assistant_first else [(user, "hello"), (system, "yes")]
        for chan, word in turns:
            chan.append((word, t, t + 4))
            t += 30
    return make_conv(t, user=user, system=system)


def test_exchanges_pair_user_then_assistant():
    exs = exchanges(alternating(3))
    assert len(exs) == 3
    assert all(ex.user and ex.assistant for ex in exs)


def test_turn_windows(vocab):
    conv = alternating(5)
    insts = build_turn_instances(conv, vocab, max_turns=4)
    own = [i for i in insts if i.meta["assistant"] == "B"]
    assert [i.meta["turn"] for i in own] == [1, 2, 3, 4, 5]
    assert [i.meta["first_turn"] for i in own] == [1, 1, 1, 1, 2]
    # the other speaker opened the dialogue, so its first turn is context only
    other = [i for i in insts if i.meta["assistant"] == "A"]
    assert [i.meta["turn"] for i in other] == [2, 3, 4, 5]


def test_assistant_first_turn_not_a_target(vocab):
    conv = alternating(2, assistant_first=True)
    own = [i for i in build_turn_instances(conv, vocab) if i.meta["assistant"] == "B"]
    assert [i.meta["turn"] for i in own] == [2]


def test_single_exchange_one_target(vocab):
    conv = make_conv(60, user=[("hello", 1, 5)], system=[("yes", 20, 24)])
    insts = build_turn_instances(conv, vocab)
    assert len(insts) == 1
    assert insts[0].target[-1] == vocab.eot
    assert stage_sequence(insts[0].target, vocab) == [Stage.ASR, Stage.RES, Stage.SPE]


def test_time_cap_drops_old_turns(vocab):
    conv = alternating(4)
    insts = [i for i in build_turn_instances(conv, vocab, max_turns=4, max_s=3.0) if i.meta["assistant"] == "B"]
    for inst in insts:
        assert inst.meta["first_turn"] >= inst.meta["turn"] - 1


def test_instance_file_round_trip(tmp_path, vocab):
    conv = alternating(2)
    insts = build_turn_instances(conv, vocab)
    save_instances(insts, tmp_path / "i.jsonl")
    assert load_instances(tmp_path / "i.jsonl") == insts
