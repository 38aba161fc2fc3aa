"""Joint CTC/attention model: transformer encoder with an intermediate CTC head
whose posteriors are fed back into the upper layers, plus an autoregressive
attention decoder.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .prompting import PromptSpec, apply_prompt
from .vocab import PosteriorLattice, VocabSpec

ENCODER_VARIANTS = ("plain", "interctc", "scctc")


class NumericalError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    model_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    intermediate_layer_index: int = 2
    dropout: float = 0.0
    feature_dim: int = 16
    num_decoder_layers: int = 2

    def __post_init__(self):
        if not 1 <= self.intermediate_layer_index < self.num_layers:
            raise ValueError("intermediate_layer_index must satisfy 1 <= m < num_layers")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _param_shapes(cfg: EncoderConfig, vocab_size: int) -> list[tuple[str, tuple[int, ...]]]:
    D, F, V, H = cfg.model_dim, cfg.feature_dim, vocab_size, cfg.ff_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [("enc.in.w", (F, D)), ("enc.in.b", (D,))]

    def block(prefix: str, cross: bool) -> None:
        shapes.extend([(f"{prefix}.ln1.g", (D,)), (f"{prefix}.ln1.b", (D,))])
        shapes.extend((f"{prefix}.att.{n}", (D, D)) for n in "qkvo")
        if cross:
            shapes.extend([(f"{prefix}.lnx.g", (D,)), (f"{prefix}.lnx.b", (D,))])
            shapes.extend((f"{prefix}.xatt.{n}", (D, D)) for n in "qkvo")
        shapes.extend([
            (f"{prefix}.ln2.g", (D,)), (f"{prefix}.ln2.b", (D,)),
            (f"{prefix}.ff1.w", (D, H)), (f"{prefix}.ff1.b", (H,)),
            (f"{prefix}.ff2.w", (H, D)), (f"{prefix}.ff2.b", (D,)),
        ])

    for i in range(cfg.num_layers):
        block(f"enc.{i}", cross=False)
    shapes += [
        ("inter.ln.g", (D,)), ("inter.ln.b", (D,)),
        ("inter.w", (D, V)), ("inter.b", (V,)),
        ("feedback.w", (V, D)),
        ("enc.out.ln.g", (D,)), ("enc.out.ln.b", (D,)),
        ("ctc.w", (D, V)), ("ctc.b", (V,)),
        ("dec.emb", (V, D)),
    ]
    for i in range(cfg.num_decoder_layers):
        block(f"dec.{i}", cross=True)
    shapes += [("dec.out.ln.g", (D,)), ("dec.out.ln.b", (D,)), ("dec.out.w", (D, V)), ("dec.out.b", (V,))]
    return shapes


def _init_value(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    # one RNG stream per parameter name, so variants share identical values
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    if name.endswith(".g"):
        return np.ones(shape)
    if name.endswith(".b"):
        return np.zeros(shape)
    fan_in = shape[0]
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


@dataclass
class ModelWeights:
    """Named parameters in declaration order, with the config and vocab they belong to."""

    config: EncoderConfig
    vocab: VocabSpec
    params: dict[str, Tensor]
    variant: str = "scctc"

    def __post_init__(self):
        if self.variant not in ENCODER_VARIANTS:
            raise ValueError(f"variant must be one of {ENCODER_VARIANTS}")

    @classmethod
    def initialize(cls, config: EncoderConfig, vocab: VocabSpec, seed: int = 0, variant: str = "scctc") -> "ModelWeights":
        params = {
            name: Tensor(_init_value(name, shape, seed), requires_grad=True, name=name)
            for name, shape in _param_shapes(config, len(vocab))
        }
        return cls(config, vocab, params, variant)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def copy(self) -> "ModelWeights":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return ModelWeights(self.config, self.vocab, params, self.variant)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def all_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.params.values())

    # ------------------------------------------------------------- checkpoints
    MAGIC = b"LIDPCKPT"
    VERSION = 1

    def to_bytes(self) -> bytes:
        header = {
            "config": asdict(self.config),
            "vocab": self.vocab.to_dict(),
            "variant": self.variant,
            "params": [[k, list(v.shape)] for k, v in self.params.items()],
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        blocks = b"".join(np.ascontiguousarray(v.data, dtype="<f8").tobytes() for v in self.params.values())
        return self.MAGIC + struct.pack("<II", self.VERSION, len(hbytes)) + hbytes + blocks

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelWeights":
        if raw[:8] != cls.MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<II", raw[8:16])
        if version != cls.VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(raw[16 : 16 + hlen])
        offset = 16 + hlen
        params = {}
        for name, shape in header["params"]:
            n = int(np.prod(shape)) * 8
            if offset + n > len(raw):
                raise CheckpointError("checkpoint truncated")
            arr = np.frombuffer(raw[offset : offset + n], dtype="<f8").reshape(shape).astype(np.float64)
            params[name] = Tensor(arr, requires_grad=True, name=name)
            offset += n
        if offset != len(raw):
            raise CheckpointError("trailing bytes after parameter blocks")
        return cls(EncoderConfig.from_dict(header["config"]), VocabSpec.from_dict(header["vocab"]), params, header["variant"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelWeights":
        return cls.from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------------ building blocks


@lru_cache(maxsize=8)
def _positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    pe.setflags(write=False)
    return pe


def positional_encoding(length: int, dim: int) -> np.ndarray:
    return _positions(max(64, 1 << (length - 1).bit_length()), dim)[:length]


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = nx.matmul(x, w)
    return y if b is None else nx.add(y, b)


def _ln(x: Tensor, W: ModelWeights, prefix: str) -> Tensor:
    return nx.layer_norm(x, W[prefix + ".g"], W[prefix + ".b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, T, D = x.shape
    return nx.transpose(nx.reshape(x, (B, T, heads, D // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, d = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, T, H * d))


def attention(q_in: Tensor, kv_in: Tensor, W: ModelWeights, prefix: str, heads: int, mask: np.ndarray | None) -> Tensor:
    """Multi-head scaled dot-product attention; ``mask`` is True where attending is allowed."""
    q = _split_heads(nx.matmul(q_in, W[prefix + ".q"]), heads)
    k = _split_heads(nx.matmul(kv_in, W[prefix + ".k"]), heads)
    v = _split_heads(nx.matmul(kv_in, W[prefix + ".v"]), heads)
    d = q.shape[-1]
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / float(np.sqrt(d)))
    weights = nx.softmax_lastdim(scores, mask)
    return nx.matmul(_merge_heads(nx.matmul(weights, v)), W[prefix + ".o"])


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return nx.mul(x, Tensor(keep))


def _feed_forward(x: Tensor, W: ModelWeights, prefix: str) -> Tensor:
    h = nx.relu(linear(x, W[prefix + ".ff1.w"], W[prefix + ".ff1.b"]))
    return linear(h, W[prefix + ".ff2.w"], W[prefix + ".ff2.b"])


def _key_mask(lengths: Sequence[int], T: int) -> np.ndarray:
    valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    return valid[:, None, None, :]


def _check_finite(x: Tensor, where: str) -> None:
    if not np.isfinite(x.data).all():
        raise NumericalError(f"non-finite activations after {where}")


@dataclass
class EncoderOutput:
    """Batched encoder results. Lattices are (B, T, V) probabilities."""

    hidden: Tensor
    inter_log_probs: Tensor
    inter_probs: Tensor
    prompted_probs: np.ndarray
    ctc_log_probs: Tensor
    lengths: np.ndarray

    def utterance(self, b: int = 0) -> "EncodeResult":
        T = int(self.lengths[b])
        return EncodeResult(
            final_hidden=self.hidden.data[b, :T],
            intermediate_lattice=PosteriorLattice(self.inter_probs.data[b, :T]),
            prompted_lattice=PosteriorLattice(self.prompted_probs[b, :T]),
            final_ctc_log_probs=self.ctc_log_probs.data[b, :T],
        )


@dataclass
class EncodeResult:
    final_hidden: np.ndarray
    intermediate_lattice: PosteriorLattice
    prompted_lattice: PosteriorLattice
    final_ctc_log_probs: np.ndarray


def encoder_forward(
    W: ModelWeights,
    features: np.ndarray,
    lengths: Sequence[int] | None = None,
    *,
    feedback: bool = True,
    prompt: PromptSpec | None = None,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Run the encoder on padded (B, T, F) features.

    With ``feedback`` the (possibly prompted) intermediate posteriors are
    projected and added to the residual stream before layer m+1.
    """
    cfg = W.config
    feats = np.asarray(features, dtype=nx.default_dtype())
    if feats.ndim == 2:
        feats = feats[None]
    B, T, _ = feats.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if not np.isfinite(feats).all():
        raise NumericalError("non-finite input features")
    mask = _key_mask(lengths, T)

    x = nx.add(linear(Tensor(feats), W["enc.in.w"], W["enc.in.b"]), Tensor(positional_encoding(T, cfg.model_dim)))
    inter_logp = inter_p = prompted = None
    for i in range(cfg.num_layers):
        p = f"enc.{i}"
        h = _ln(x, W, p + ".ln1")
        x = nx.add(x, _dropout(attention(h, h, W, p + ".att", cfg.num_heads, mask), cfg.dropout, rng))
        x = nx.add(x, _dropout(_feed_forward(_ln(x, W, p + ".ln2"), W, p), cfg.dropout, rng))
        _check_finite(x, f"encoder layer {i + 1}")
        if i + 1 == cfg.intermediate_layer_index:
            logits = linear(_ln(x, W, "inter.ln"), W["inter.w"], W["inter.b"])
            inter_logp = nx.log_softmax_lastdim(logits)
            inter_p = nx.softmax_lastdim(logits)
            if prompt is None or prompt.mode == "none":
                prompted, fed = inter_p.data, inter_p
            else:
                prompted = apply_prompt(inter_p.data, prompt, W.vocab)
                fed = Tensor(prompted)
            if feedback:
                x = nx.add(x, nx.matmul(fed, W["feedback.w"]))
    hidden = _ln(x, W, "enc.out.ln")
    ctc_logp = nx.log_softmax_lastdim(linear(hidden, W["ctc.w"], W["ctc.b"]))
    return EncoderOutput(hidden, inter_logp, inter_p, prompted, ctc_logp, lengths)


def encode(features, weights: ModelWeights, cfg: EncoderConfig | None = None, prompt: PromptSpec | None = None) -> EncodeResult:
    """Self-conditioned encoding of one utterance (T x F)."""
    _check_cfg(weights, cfg)
    return encoder_forward(weights, features, feedback=True, prompt=prompt).utterance(0)


def encode_interctc_only(features, weights: ModelWeights, cfg: EncoderConfig | None = None) -> EncodeResult:
    """Same as :func:`encode` with the feedback addition skipped."""
    _check_cfg(weights, cfg)
    return encoder_forward(weights, features, feedback=False).utterance(0)


def encode_for_variant(features, weights: ModelWeights, prompt: PromptSpec | None = None) -> EncodeResult:
    if weights.variant == "scctc":
        return encode(features, weights, prompt=prompt)
    if prompt is not None and prompt.mode != "none":
        raise ValueError("encoder prompting requires the scctc variant (it acts through the feedback path)")
    return encode_interctc_only(features, weights)


def _check_cfg(weights: ModelWeights, cfg: EncoderConfig | None) -> None:
    if cfg is not None and cfg != weights.config:
        raise ValueError("config does not match the weights' config")


# ------------------------------------------------------------------------ decoder


def decoder_forward(
    W: ModelWeights,
    tokens: np.ndarray,
    memory: Tensor | np.ndarray,
    memory_lengths: Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Teacher-forced decoder over (N, U) token ids; returns (N, U, V) log-probs.

    ``memory`` is (N or 1, T, D) encoder output; a batch dimension of 1 is
    broadcast over all N prefixes.
    """
    cfg = W.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= len(W.vocab):
        raise ValueError("token id out of range")
    memory = memory if isinstance(memory, Tensor) else Tensor(memory)
    if memory.ndim == 2:
        memory = nx.reshape(memory, (1, *memory.shape))
    N, U = tokens.shape
    T = memory.shape[1]
    mem_mask = None if memory_lengths is None else _key_mask(memory_lengths, T)
    causal = np.tril(np.ones((U, U), dtype=bool))[None, None]

    y = nx.add(nx.embedding(W["dec.emb"], tokens), Tensor(positional_encoding(U, cfg.model_dim)))
    for i in range(cfg.num_decoder_layers):
        p = f"dec.{i}"
        h = _ln(y, W, p + ".ln1")
        y = nx.add(y, _dropout(attention(h, h, W, p + ".att", cfg.num_heads, causal), cfg.dropout, rng))
        y = nx.add(y, _dropout(attention(_ln(y, W, p + ".lnx"), memory, W, p + ".xatt", cfg.num_heads, mem_mask), cfg.dropout, rng))
        y = nx.add(y, _dropout(_feed_forward(_ln(y, W, p + ".ln2"), W, p), cfg.dropout, rng))
    return nx.log_softmax_lastdim(linear(_ln(y, W, "dec.out.ln"), W["dec.out.w"], W["dec.out.b"]))


def decoder_step(prefix: Sequence[int], encoder_out, weights: ModelWeights) -> np.ndarray:
    """Next-token log distribution given a prefix that starts with sos."""
    prefix = list(prefix)
    if not prefix or prefix[0] != weights.vocab.sos_id:
        raise ValueError("prefix must begin with the sos token")
    return decoder_forward(weights, np.array([prefix]), encoder_out).data[0, -1]


def decoder_step_batch(prefixes: np.ndarray, encoder_out, weights: ModelWeights) -> np.ndarray:
    """Like :func:`decoder_step` for N equal-length prefixes; returns (N, V)."""
    return decoder_forward(weights, prefixes, encoder_out).data[:, -1]
