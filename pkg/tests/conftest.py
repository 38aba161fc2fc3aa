import sys

import numpy as np
import pytest

from lidprompt.corpus import CorpusConfig
from lidprompt.model import EncoderConfig, ModelWeights
from lidprompt.vocab import VocabSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_vocab():
    return VocabSpec.build(["<en>", "<ja>", "<zh>"], ["a", "b", "c", "d"])


@pytest.fixture(scope="session")
def tiny_cfg():
    return EncoderConfig(
        num_layers=2, model_dim=8, num_heads=2, ff_dim=16,
        intermediate_layer_index=1, feature_dim=4, num_decoder_layers=1,
    )


@pytest.fixture
def tiny_model(small_vocab, tiny_cfg):
    W = ModelWeights.initialize(tiny_cfg, small_vocab, seed=7)
    # non-zero biases and gains so every parameter is exercised
    r = np.random.default_rng(99)
    for name, p in W.params.items():
        if name.endswith(".b") or name.endswith(".g"):
            p.data += 0.1 * r.normal(size=p.shape)
    return W


@pytest.fixture(scope="session")
def tiny_corpus_cfg():
    return CorpusConfig(
        num_languages=3,
        tier_sizes={"high": 6, "low": 3},
        dev_per_language=1,
        test_per_language=2,
        feature_dim=4,
        max_chars=4,
    )


def random_log_probs(rng, T, V):
    x = rng.normal(size=(T, V)) * 2
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def random_lattice(rng, T, V, sparse=False):
    if sparse:
        x = rng.normal(size=(T, V)) * 8
    else:
        x = rng.normal(size=(T, V)) * 2
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@pytest.fixture(scope="session")
def trained_toy():
    """A dim-8 model trained for a few seconds on one- or two-character utterances."""
    from lidprompt.corpus import generate_corpus
    from lidprompt.training import TrainConfig, train

    cc = CorpusConfig(
        num_languages=2, tier_sizes={"high": 40}, dev_per_language=1, test_per_language=150,
        inventory_size=4, num_phones=4, chars_per_language=3, feature_dim=4,
        min_chars=1, max_chars=2, min_frames_per_char=2, max_frames_per_char=3,
        silence_frames=1, max_leading_silence=2, confusability=0.0,
    )
    corpus = generate_corpus(cc, seed=0)
    enc_cfg = EncoderConfig(num_layers=2, model_dim=8, num_heads=2, ff_dim=16, intermediate_layer_index=1,
                            feature_dim=4, num_decoder_layers=1)
    W, log = train(corpus, corpus.vocab, enc_cfg, TrainConfig(epochs=30, batch_size=8, learning_rate=1e-2, seed=0))
    return corpus, W, log


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
