from duplexcot.core import SILENCE, Conversation, FrameStream, WordSpan


def frames_for(T, words, label=1):
    out = [SILENCE] * T
    for w in words:
        out[w.start - 1:w.end] = [label] * (w.end - w.start + 1)
    return out


def make_conv(T, user=(), system=(), fps=25, conv_id="c", label_user=1, label_system=2):
    """Conversation whose word spans are given as (word, start, end) triples."""
    uw = [WordSpan(*w) for w in user]
    sw = [WordSpan(*w) for w in system]
    return Conversation(
        FrameStream(frames_for(T, uw, label_user), fps),
        FrameStream(frames_for(T, sw, label_system), fps),
        tuple(uw),
        tuple(sw),
        conv_id=conv_id,
    )


def chain(rules, start, tokens, end):
    """Rules that make a scripted model emit ``tokens`` then ``end`` after ``start``."""
    prev = start
    for tok in tokens:
        rules[(prev,)] = tok
        prev = tok
    rules[(prev,)] = end


def scripted_world(codec=None, asr_words=("a0", "a1"), res_words=("r0",), speech_word=None,
                   latency_s=0.0, speak=True):
    """Codec, vocabulary and a deterministic always-speak (or never-speak) model.

    ASR greedily produces ``asr_words``, the response stage ``res_words``, and
    the speech stage loops over the codec tokens of ``speech_word``.
    """
    from duplexcot.models import ScriptedModel, ToyCodec
    from duplexcot.targets import Vocabulary

    if codec is None:
        codec = ToyCodec.build(set(asr_words) | set(res_words) | {speech_word or "yes"}, frames_per_word=5)
    speech_word = speech_word or codec.words[-1]
    vocab = Vocabulary(codec.n_speech, tuple(codec.words))
    rules = {}
    chain(rules, vocab.asr, vocab.word_ids(asr_words), vocab.eob)
    chain(rules, vocab.res, vocab.word_ids(res_words), vocab.eob)
    if speak:
        toks = codec.encode(speech_word)
        rules[(vocab.spe,)] = toks[0]
        for a, b in zip(toks, toks[1:] + toks[:1]):
            rules[(a,)] = b
    else:
        rules[(vocab.spe,)] = vocab.eob
    model = ScriptedModel(vocab.size, rules, default=vocab.eob, latency_s=latency_s)
    return codec, vocab, model


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
