"""A scikit-learn style wrapper around training and joint decoding.

Inputs are :class:`~lidprompt.corpus.Utterance` lists (or a corpus manifest, in
which case its train split is used by ``fit``). Utterances carry the language
label that decoder and encoder prompting need at inference time.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .corpus import CorpusManifest, Utterance
from .decoding import DecodeConfig, joint_beam_search
from .harness import compute_cer, corpus_cer
from .model import EncoderConfig, ModelWeights, encode_for_variant
from .prompting import PromptMode, PromptSpec
from .training import TrainConfig, train


def _utterances(X, split: str) -> list[Utterance]:
    if isinstance(X, CorpusManifest):
        return list(X.split(split))
    return list(X)


class LIDPromptedASR(BaseEstimator):
    """Multilingual CTC/attention recogniser with LID prompting.

    ``score`` returns the negated pooled CER in percent, so higher is better.
    """

    def __init__(
        self,
        variant: str = "scctc",
        num_layers: int = 4,
        model_dim: int = 64,
        num_heads: int = 4,
        ff_dim: int = 128,
        intermediate_layer_index: int = 2,
        num_decoder_layers: int = 2,
        epochs: int = 12,
        batch_size: int = 32,
        learning_rate: float = 2e-3,
        sampling_temperature: float = 1.0,
        dtype: str = "float64",
        seed: int = 0,
        beam_size: int = 4,
        ctc_weight: float = 0.3,
        decoder_prompt: bool = False,
        encoder_prompt: str = "none",
        soft_targets: Sequence[str] = (),
    ):
        self.variant = variant
        self.num_layers = num_layers
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.ff_dim = ff_dim
        self.intermediate_layer_index = intermediate_layer_index
        self.num_decoder_layers = num_decoder_layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.sampling_temperature = sampling_temperature
        self.dtype = dtype
        self.seed = seed
        self.beam_size = beam_size
        self.ctc_weight = ctc_weight
        self.decoder_prompt = decoder_prompt
        self.encoder_prompt = encoder_prompt
        self.soft_targets = soft_targets

    def fit(self, X, y=None, vocab=None):
        """Train on utterances. ``vocab`` is needed unless ``X`` is a corpus manifest."""
        if isinstance(X, CorpusManifest):
            vocab = X.vocab
        if vocab is None:
            raise ValueError("pass vocab= when fitting on a plain utterance list")
        utts = _utterances(X, "train")
        enc = EncoderConfig(
            num_layers=self.num_layers, model_dim=self.model_dim, num_heads=self.num_heads,
            ff_dim=self.ff_dim, intermediate_layer_index=self.intermediate_layer_index,
            feature_dim=utts[0].features.shape[1], num_decoder_layers=self.num_decoder_layers,
        )
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            sampling_temperature=self.sampling_temperature, dtype=self.dtype, seed=self.seed,
            encoder_variant=self.variant,
        )
        self.weights_, self.train_log_ = train(utts, vocab, enc, cfg)
        self.vocab_ = vocab
        return self

    def _check_fitted(self) -> ModelWeights:
        if not hasattr(self, "weights_"):
            raise NotFittedError("this estimator is not fitted yet; call fit first")
        return self.weights_

    def _prompt(self, language: int) -> PromptSpec | None:
        mode = PromptMode(self.encoder_prompt)
        if mode is PromptMode.NONE:
            return None
        if mode is PromptMode.SOFT:
            return PromptSpec(mode, targets=frozenset(self.vocab_.ids(list(self.soft_targets))))
        return PromptSpec(mode, target=language)

    def _decode(self, u: Utterance):
        cfg = DecodeConfig(
            beam_size=self.beam_size,
            ctc_weight=self.ctc_weight,
            decoder_prompt=u.language if self.decoder_prompt else None,
            encoder_prompt=self._prompt(u.language),
        )
        return joint_beam_search(u.features, self._check_fitted(), cfg)

    def predict(self, X) -> list[list[int]]:
        """Best hypothesis per utterance as token ids, LID tokens removed."""
        self._check_fitted()
        return [self.vocab_.strip_lid(self._decode(u)[0].output) for u in _utterances(X, "test")]

    def predict_language(self, X) -> list[int | None]:
        self._check_fitted()
        return [self._decode(u)[1] for u in _utterances(X, "test")]

    def transform(self, X) -> list[np.ndarray]:
        """Intermediate posterior lattices (after any encoder prompt), one T x V array each."""
        W = self._check_fitted()
        out = []
        for u in _utterances(X, "test"):
            r = encode_for_variant(u.features, W, prompt=self._prompt(u.language))
            out.append(r.prompted_lattice.probs)
        return out

    def score(self, X, y=None) -> float:
        utts = _utterances(X, "test")
        pairs = [compute_cer(h, u.text, self.vocab_.lid_ids) for h, u in zip(self.predict(utts), utts)]
        return -corpus_cer(pairs)
