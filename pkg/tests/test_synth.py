import pytest

from duplexcot.core import SILENCE, overlap_blocks, partition_blocks, save_conversations
from duplexcot.errors import InvalidArgument
from duplexcot.synth import BACKCHANNELS, SyntheticSpec, generate_corpus, lexicon


def block_overlap_rate(convs, n_block):
    both = total = 0
    for c in convs:
        plan = partition_blocks(c.n_frames, n_block)
        both += len(overlap_blocks(c.user.labels, c.system_reference.labels, plan))
        total += len(plan)
    return both / total, total


@pytest.mark.parametrize("field,value", [("overlap_rate", 1.2), ("overlap_rate", -0.1), ("backchannel_prob", 2.0),
                                         ("n_conversations", 0), ("vocab_size", 0), ("mean_turn_sentences", 0.5)])
def test_spec_validation(field, value):
    with pytest.raises(InvalidArgument):
        SyntheticSpec(**{field: value})


def test_same_seed_byte_identical(tmp_path):
    spec = SyntheticSpec(n_conversations=3, duration_s=20, seed=9)
    a, codec_a = generate_corpus(spec)
    b, codec_b = generate_corpus(spec)
    save_conversations(a, tmp_path / "a.jsonl")
    save_conversations(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert codec_a.table == codec_b.table
    c, _ = generate_corpus(SyntheticSpec(n_conversations=3, duration_s=20, seed=10))
    assert c != a


def test_zero_overlap_rate():
    spec = SyntheticSpec(n_conversations=5, duration_s=30, overlap_rate=0.0, seed=2)
    convs, _ = generate_corpus(spec)
    rate, _ = block_overlap_rate(convs, spec.n_block)
    assert rate == 0.0


@pytest.mark.parametrize("target", [0.2, 0.575])
def test_overlap_rate_tracks_target(target):
    spec = SyntheticSpec(n_conversations=20, duration_s=60, overlap_rate=target, seed=4)
    convs, _ = generate_corpus(spec)
    rate, total = block_overlap_rate(convs, spec.n_block)
    assert total >= 500
    assert abs(rate - target) <= 0.03


def test_words_and_frames_agree():
    spec = SyntheticSpec(n_conversations=2, duration_s=30, seed=1)
    convs, codec = generate_corpus(spec)
    assert set(codec.words) == set(lexicon(spec))
    for conv in convs:
        for stream, words in ((conv.user, conv.user_words), (conv.system_reference, conv.system_words)):
            assert codec.decode(stream.labels) == [w.word for w in words]
            assert all(w.end - w.start + 1 == spec.frames_per_word for w in words)
        assert len(conv.speaker_prompt.tokens) == spec.prompt_len


def test_backchannels_only_when_requested():
    spec = SyntheticSpec(n_conversations=3, duration_s=30, overlap_rate=0.0, seed=6)
    convs, _ = generate_corpus(spec)
    for conv in convs:
        words = [w.word for w in conv.user_words + conv.system_words]
        assert not set(words) & set(BACKCHANNELS)
    spec = SyntheticSpec(n_conversations=3, duration_s=30, overlap_rate=0.5, backchannel_prob=1.0, seed=6)
    convs, _ = generate_corpus(spec)
    assert any(set(w.word for w in c.user_words + c.system_words) & set(BACKCHANNELS) for c in convs)
