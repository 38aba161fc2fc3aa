"""Multi-task training of the joint CTC/attention model."""
from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import CorpusManifest, Utterance
from .ctc import ctc_loss_tensor
from .model import ENCODER_VARIANTS, EncoderConfig, ModelWeights, decoder_forward, encoder_forward
from .numerics import Tensor
from .vocab import VocabSpec

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: ModelWeights | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    ctc_weight: float = 0.3
    interctc_weight: float = 0.3
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 2e-3
    warmup_fraction: float = 0.1
    final_lr_fraction: float = 0.05
    rms_decay: float = 0.98
    grad_clip: float = 5.0
    seed: int = 0
    encoder_variant: str = "scctc"
    freeze_feedback: bool = False
    languages: tuple | None = None  # restrict training to these LID tokens
    dtype: str = "float64"
    sampling_temperature: float = 1.0  # >1 flattens the language mix toward uniform

    def __post_init__(self):
        if not (0.0 <= self.ctc_weight <= 1.0 and 0.0 <= self.interctc_weight <= 1.0):
            raise ValueError("ctc_weight and interctc_weight must lie in [0, 1]")
        if self.encoder_variant not in ENCODER_VARIANTS:
            raise ValueError(f"encoder_variant must be one of {ENCODER_VARIANTS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.sampling_temperature < 1.0:
            raise ValueError("sampling_temperature must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if d.get("languages") is not None:
            d["languages"] = tuple(d["languages"])
        return cls(**d)


def multitask_loss(attn_loss, ctc_loss_final, ctc_loss_inter, alpha: float, beta: float, variant: str = "scctc"):
    """(1-a)*attn + a*((1-b)*ctc + b*inter); the plain encoder has no intermediate term.

    Works on floats or scalar tensors.
    """
    for name, v in (("attention", attn_loss), ("ctc", ctc_loss_final)) + (
        () if variant == "plain" else (("interctc", ctc_loss_inter),)
    ):
        val = v.data if isinstance(v, Tensor) else v
        if not np.all(np.isfinite(val)):
            raise FloatingPointError(f"non-finite {name} loss: {val}")

    def w(x, c):
        return x * c if isinstance(x, Tensor) else c * x

    if variant == "plain":
        return w(attn_loss, 1.0 - alpha) + w(ctc_loss_final, alpha)
    return w(attn_loss, 1.0 - alpha) + w(w(ctc_loss_final, 1.0 - beta) + w(ctc_loss_inter, beta), alpha)


@dataclass
class Batch:
    features: np.ndarray
    lengths: np.ndarray
    labels: list[list[int]]
    dec_in: np.ndarray
    dec_out: np.ndarray
    dec_mask: np.ndarray


def make_batch(utts: Sequence[Utterance], vocab: VocabSpec) -> Batch:
    T = max(u.num_frames for u in utts)
    F = utts[0].features.shape[1]
    feats = np.zeros((len(utts), T, F))
    for i, u in enumerate(utts):
        feats[i, : u.num_frames] = u.features
    labels = [u.label for u in utts]
    U = max(len(l) for l in labels) + 1
    dec_in = np.full((len(utts), U), vocab.eos_id)
    dec_out = np.full((len(utts), U), vocab.eos_id)
    mask = np.zeros((len(utts), U))
    for i, l in enumerate(labels):
        dec_in[i, : len(l) + 1] = [vocab.sos_id, *l]
        dec_out[i, : len(l) + 1] = [*l, vocab.eos_id]
        mask[i, : len(l) + 1] = 1.0
    lengths = np.array([u.num_frames for u in utts])
    return Batch(feats, lengths, labels, dec_in, dec_out, mask)


def batch_losses(W: ModelWeights, batch: Batch, variant: str, rng: np.random.Generator | None = None):
    """Batch-mean attention, final CTC and intermediate CTC losses as tape tensors."""
    blank = W.vocab.blank_id
    enc = encoder_forward(W, batch.features, batch.lengths, feedback=variant == "scctc", rng=rng)
    B = len(batch.labels)
    ctc = nx.scale(nx.total(ctc_loss_tensor(enc.ctc_log_probs, batch.lengths, batch.labels, blank)), 1.0 / B)
    inter = None
    if variant != "plain":
        inter = nx.scale(nx.total(ctc_loss_tensor(enc.inter_log_probs, batch.lengths, batch.labels, blank)), 1.0 / B)
    dec = decoder_forward(W, batch.dec_in, enc.hidden, batch.lengths, rng=rng)
    picked = nx.gather_lastdim(dec, batch.dec_out)
    attn = nx.scale(nx.total(nx.mul(picked, Tensor(batch.dec_mask))), -1.0 / B)
    return attn, ctc, inter


def loss_and_grads(W: ModelWeights, batch: Batch, cfg: TrainConfig, rng: np.random.Generator | None = None):
    """Scalar multi-task loss; populates ``.grad`` of every trainable parameter."""
    W.zero_grad()
    with nx.Tape() as tape:
        attn, ctc, inter = batch_losses(W, batch, cfg.encoder_variant, rng)
        loss = multitask_loss(attn, ctc, inter, cfg.ctc_weight, cfg.interctc_weight, cfg.encoder_variant)
    nx.backward(loss, tape)
    parts = {"attn": float(attn.data), "ctc": float(ctc.data)}
    if inter is not None:
        parts["inter"] = float(inter.data)
    return float(loss.data), parts


def bucketed_batches(utts: Sequence[Utterance], batch_size: int, rng: np.random.Generator) -> list[list[Utterance]]:
    """Length-sorted buckets (stable on id), visited in a seeded order."""
    ordered = sorted(utts, key=lambda u: (u.num_frames, u.id))
    batches = [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def resample_languages(utts: Sequence[Utterance], temperature: float, rng: np.random.Generator) -> list[Utterance]:
    """Draw an epoch with language shares proportional to n_l ** (1 / temperature).

    The epoch keeps the corpus size. Languages that get more than their own
    utterances reuse them all and top up with replacement.
    """
    if temperature == 1.0:
        return list(utts)
    by_lang: dict[int, list[Utterance]] = {}
    for u in utts:
        by_lang.setdefault(u.language, []).append(u)
    langs = sorted(by_lang)
    sizes = np.array([len(by_lang[l]) for l in langs], dtype=np.float64)
    share = sizes ** (1.0 / temperature)
    counts = np.maximum(1, np.round(share / share.sum() * len(utts)).astype(int))
    out: list[Utterance] = []
    for l, n in zip(langs, counts):
        pool = by_lang[l]
        if n <= len(pool):
            idx = rng.choice(len(pool), size=n, replace=False)
        else:
            idx = np.concatenate([np.arange(len(pool)), rng.integers(0, len(pool), size=n - len(pool))])
        out.extend(pool[i] for i in idx)
    return out


class RMSProp:
    """Momentum-free adaptive steps with linear warmup then cosine decay."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total = max(1, total_steps)
        self.warmup = max(1, int(round(cfg.warmup_fraction * self.total)))
        self.sq = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def lr(self) -> float:
        s, c = self.step_count + 1, self.cfg
        if s <= self.warmup:
            return c.learning_rate * s / self.warmup
        progress = (s - self.warmup) / max(1, self.total - self.warmup)
        floor = c.final_lr_fraction
        return c.learning_rate * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * min(1.0, progress))))

    def step(self) -> float:
        grads = {k: p.grad for k, p in self.params.items() if p.requires_grad and p.grad is not None}
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        clip = min(1.0, self.cfg.grad_clip / (norm + 1e-12)) if self.cfg.grad_clip > 0 else 1.0
        lr, rho = self.lr(), self.cfg.rms_decay
        for k, g in grads.items():
            g = g * clip
            self.sq[k] = rho * self.sq[k] + (1 - rho) * g * g
            # bias-corrected second moment so the first steps are not oversized
            v = self.sq[k] / (1 - rho ** (self.step_count + 1))
            self.params[k].data -= lr * g / (np.sqrt(v) + 1e-8)
        self.step_count += 1
        return norm


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_parts: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def init_weights(vocab: VocabSpec, encoder_cfg: EncoderConfig, train_cfg: TrainConfig) -> ModelWeights:
    with nx.precision(train_cfg.dtype):
        W = ModelWeights.initialize(encoder_cfg, vocab, seed=train_cfg.seed, variant=train_cfg.encoder_variant)
    if train_cfg.freeze_feedback:
        W["feedback.w"].data[...] = 0.0
        W["feedback.w"].requires_grad = False
    return W


def train(
    corpus: CorpusManifest | Sequence[Utterance],
    vocab: VocabSpec,
    encoder_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    weights: ModelWeights | None = None,
) -> tuple[ModelWeights, TrainLog]:
    """Train from scratch (or continue ``weights``); deterministic given the seed.

    The returned weights are always 64-bit, whatever ``train_cfg.dtype`` was.
    """
    with nx.precision(train_cfg.dtype):
        W, tlog = _train(corpus, vocab, encoder_cfg, train_cfg, weights)
    for p in W.params.values():
        p.data = p.data.astype(np.float64)
    return W, tlog


def _train(corpus, vocab, encoder_cfg, train_cfg, weights):
    utts = list(corpus.split("train") if isinstance(corpus, CorpusManifest) else corpus)
    if train_cfg.languages is not None:
        keep = {vocab.id(t) for t in train_cfg.languages}
        utts = [u for u in utts if u.language in keep]
    if not utts:
        raise ValueError("no training utterances")
    if weights is not None:
        W = weights.copy()
        for p in W.params.values():
            p.data = p.data.astype(train_cfg.dtype)
    else:
        W = init_weights(vocab, encoder_cfg, train_cfg)
    steps_per_epoch = len(bucketed_batches(resample_languages(utts, train_cfg.sampling_temperature, np.random.default_rng(0)),
                                           train_cfg.batch_size, np.random.default_rng(0)))
    opt = RMSProp(W.params, train_cfg, steps_per_epoch * train_cfg.epochs)
    drop_rng = np.random.default_rng([train_cfg.seed, zlib.crc32(b"dropout")]) if encoder_cfg.dropout > 0 else None
    tlog = TrainLog()
    start = time.perf_counter()
    last_good = W.copy()
    for epoch in range(train_cfg.epochs):
        rng = np.random.default_rng([train_cfg.seed, epoch])
        total, parts_sum, n = 0.0, {}, 0
        epoch_utts = resample_languages(utts, train_cfg.sampling_temperature, rng)
        for chunk in bucketed_batches(epoch_utts, train_cfg.batch_size, rng):
            batch = make_batch(chunk, vocab)
            try:
                loss, parts = loss_and_grads(W, batch, train_cfg, drop_rng)
            except FloatingPointError as e:
                raise TrainingDiverged(f"epoch {epoch + 1}: {e}", last_good) from e
            if not math.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch + 1}: loss is {loss}", last_good)
            opt.step()
            tlog.step_losses.append(loss)
            total += loss * len(chunk)
            n += len(chunk)
            for k, v in parts.items():
                parts_sum[k] = parts_sum.get(k, 0.0) + v * len(chunk)
        if not W.all_finite():
            raise TrainingDiverged(f"epoch {epoch + 1}: parameters became non-finite", last_good)
        last_good = W.copy()
        tlog.epoch_losses.append(total / n)
        tlog.epoch_parts.append({k: v / n for k, v in parts_sum.items()})
        log.info("epoch %d/%d loss %.4f %s", epoch + 1, train_cfg.epochs, total / n,
                 " ".join(f"{k}={v / n:.3f}" for k, v in parts_sum.items()))
    tlog.seconds = time.perf_counter() - start
    return W, tlog
