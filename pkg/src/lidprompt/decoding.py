"""Joint CTC/attention beam search with optional decoder and encoder prompts."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ctc import CTCPrefixScorer, ctc_greedy_decode
from .model import EncodeResult, ModelWeights, decoder_step_batch, encode_for_variant
from .prompting import PromptMode, PromptSpec, apply_aggregation
from .vocab import VocabSpec

log = logging.getLogger(__name__)


class DecodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 4
    ctc_weight: float = 0.3
    max_len: int | None = None  # None: number of encoder frames
    decoder_prompt: int | None = None
    encoder_prompt: PromptSpec | None = None
    prompt_final_ctc: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")

    def validate(self, vocab: VocabSpec) -> None:
        if self.decoder_prompt is not None and self.decoder_prompt not in vocab.lid_ids:
            raise ValueError("decoder_prompt must be a language-ID token")
        if self.encoder_prompt is not None:
            self.encoder_prompt.validate(vocab)


@dataclass
class Hypothesis:
    tokens: list[int]
    attn_log_score: float = 0.0
    ctc_log_score: float = 0.0
    ctc_prefix_state: object = field(default=None, repr=False)
    combined: float = 0.0
    ended: bool = False
    truncated: bool = False

    @property
    def output(self) -> list[int]:
        """Tokens without sos and eos."""
        toks = self.tokens[1:]
        return toks[:-1] if self.ended else toks


def _combine(attn, ctc, lam: float):
    if lam == 0.0:
        return attn
    if lam == 1.0:
        return ctc
    return (1.0 - lam) * attn + lam * ctc


def _rank_key(h: Hypothesis):
    return (-h.combined, tuple(h.tokens))


def beam_search_encoded(enc: EncodeResult, weights: ModelWeights, cfg: DecodeConfig) -> Hypothesis:
    """Beam search over an already computed encoder result."""
    V = weights.vocab
    lam = cfg.ctc_weight
    ctc_lp = enc.final_ctc_log_probs
    if cfg.prompt_final_ctc and cfg.encoder_prompt is not None and cfg.encoder_prompt.mode is not PromptMode.NONE:
        target = cfg.encoder_prompt.target
        if target is None:
            target = min(cfg.encoder_prompt.targets)
        with np.errstate(divide="ignore"):
            ctc_lp = np.log(apply_aggregation(np.exp(ctc_lp), target, V.lid_ids))
    T = ctc_lp.shape[0]
    max_len = T if cfg.max_len is None else cfg.max_len
    use_ctc, use_attn = lam > 0.0, lam < 1.0
    scorer = CTCPrefixScorer(ctc_lp, V.blank_id) if use_ctc else None
    memory = enc.final_hidden[None]
    cands = np.array([k for k in range(len(V)) if k not in (V.blank_id, V.sos_id, V.eos_id)])

    beam = [Hypothesis([V.sos_id], ctc_prefix_state=scorer.initial_state() if use_ctc else None)]
    finished: list[Hypothesis] = []
    for step in range(max_len + 1):
        if use_attn:
            attn_all = decoder_step_batch(np.array([h.tokens for h in beam]), memory, weights)
        expanded: list[Hypothesis] = []
        for i, h in enumerate(beam):
            forced = cfg.decoder_prompt is not None and step == 0
            # a hypothesis holding max_len tokens may only end
            toks = np.array([cfg.decoder_prompt]) if forced else cands[:0] if step == max_len else cands
            a = attn_all[i] if use_attn else np.zeros(len(V))
            if use_ctc:
                psi, states = scorer.extend(h.ctc_prefix_state, toks)
            else:
                psi, states = np.zeros(len(toks)), [None] * len(toks)
            for j, k in enumerate(toks):
                na = h.attn_log_score + float(a[k])
                nc = float(psi[j])
                expanded.append(Hypothesis(h.tokens + [int(k)], na, nc, states[j], _combine(na, nc, lam)))
            if not forced:
                na = h.attn_log_score + float(a[V.eos_id])
                nc = scorer.final_score(h.ctc_prefix_state) if use_ctc else 0.0
                expanded.append(Hypothesis(h.tokens + [V.eos_id], na, nc, None, _combine(na, nc, lam), ended=True))
        expanded = [h for h in expanded if h.combined > -math.inf]
        if not expanded:
            if step == max_len:
                break  # eos impossible everywhere: the running beam is truncated
            if not finished:
                raise DecodeError("every hypothesis was pruned (all scores are -inf)")
            beam = []
            break
        expanded.sort(key=_rank_key)
        top = expanded[: cfg.beam_size]
        finished.extend(h for h in top if h.ended)
        beam = [h for h in top if not h.ended]
        if not beam:
            break
        best_done = max((h.combined for h in finished), default=-math.inf)
        # scores never increase as tokens are appended, so nothing running can win
        if best_done >= beam[0].combined:
            beam = []
            break
    if beam:
        log.warning("max_len=%d reached without eos; finalising %d hypotheses", max_len, len(beam))
        for h in beam:
            h.truncated = True
        finished.extend(beam)
    if not finished:
        raise DecodeError("beam search produced no hypothesis")
    return min(finished, key=_rank_key)


def joint_beam_search(features, weights: ModelWeights, cfg: DecodeConfig) -> tuple[Hypothesis, int | None]:
    """Encode (with the encoder prompt, if any) and run joint beam search.

    Returns the best hypothesis and the language ID it starts with, or None.
    """
    cfg.validate(weights.vocab)
    enc = encode_for_variant(features, weights, cfg.encoder_prompt)
    best = beam_search_encoded(enc, weights, cfg)
    out = best.output
    lid = out[0] if out and out[0] in weights.vocab.lid_ids else None
    return best, lid


def lid_from_ctc(final_ctc_log_probs, vocab: VocabSpec) -> int | None:
    """First language-ID token on the greedy CTC path."""
    label, _ = ctc_greedy_decode(final_ctc_log_probs, vocab.blank_id)
    return next((k for k in label if k in vocab.lid_ids), None)


def greedy_attention_decode(enc: EncodeResult, weights: ModelWeights, max_len: int | None = None) -> list[int]:
    """Argmax decoding with the attention decoder alone (lowest id wins ties)."""
    V = weights.vocab
    tokens = [V.sos_id]
    limit = enc.final_hidden.shape[0] if max_len is None else max_len
    memory = enc.final_hidden[None]
    for _ in range(limit + 1):
        lp = decoder_step_batch(np.array([tokens]), memory, weights)[0].copy()
        lp[[V.blank_id, V.sos_id]] = -np.inf
        if len(tokens) - 1 >= limit:
            return tokens[1:]
        k = int(np.argmax(lp))
        if k == V.eos_id:
            return tokens[1:]
        tokens.append(k)
    return tokens[1:]
