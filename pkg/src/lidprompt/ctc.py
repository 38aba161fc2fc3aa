"""CTC loss, collapsing, greedy decoding and prefix scoring, all in log space."""
from __future__ import annotations

import io
import itertools
import os
from typing import Iterable, Sequence, TextIO

import numpy as np

from . import numerics as nx

NEG_INF = -np.inf


class InfeasibleAlignmentError(ValueError):
    """The label cannot be aligned to the given number of frames."""


class EnumerationTooLargeError(ValueError):
    pass


def min_frames(label: Sequence[int]) -> int:
    """Frames needed to emit ``label``: one per token plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def _extend(label: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    ext[1::2] = label
    return ext


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    """``skip[s]`` is True when state ``s`` may be entered from ``s-2``."""
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return skip


def _validate(log_probs: np.ndarray, label: Sequence[int], blank: int) -> None:
    if blank in label:
        raise ValueError("label must not contain the blank id")
    if len(label) == 0:
        raise ValueError("label must be non-empty")
    if log_probs.shape[0] < min_frames(label):
        raise InfeasibleAlignmentError(
            f"label of length {len(label)} needs {min_frames(label)} frames, got {log_probs.shape[0]}"
        )


def ctc_loss(log_probs, label: Sequence[int], blank: int = 0) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``label`` and its gradient w.r.t. ``log_probs``.

    ``log_probs`` is a T x V matrix of per-frame log-probabilities.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    label = [int(k) for k in label]
    _validate(lp, label, blank)
    losses, grads = ctc_loss_batch(lp[None], [lp.shape[0]], [label], blank)
    return float(losses[0]), grads[0]


def ctc_loss_batch(
    log_probs: np.ndarray,
    lengths: Sequence[int],
    labels: Sequence[Sequence[int]],
    blank: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched forward-backward over padded B x T x V log-probabilities.

    Returns per-utterance losses (B,) and gradients (B, T, V); padded frames
    get zero gradient.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    B, T, V = lp.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    for b in range(B):
        _validate(lp[b, : lengths[b]], labels[b], blank)

    S = 2 * max(len(l) for l in labels) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    skip = np.zeros((B, S), dtype=bool)
    n_states = np.zeros(B, dtype=np.int64)
    for b, label in enumerate(labels):
        e = _extend(label, blank)
        ext[b, : len(e)] = e
        skip[b, : len(e)] = _skip_allowed(e, blank)
        n_states[b] = len(e)
    valid_state = np.arange(S)[None, :] < n_states[:, None]
    rows = np.arange(B)[:, None]
    # emit[b, t, s] = lp[b, t, ext[b, s]]
    emit = lp[rows[:, :, None], np.arange(T)[None, :, None], ext[:, None, :]]
    emit = np.where(valid_state[:, None, :], emit, NEG_INF)

    def shift(a, k):
        out = np.full_like(a, NEG_INF)
        out[:, k:] = a[:, :-k]
        return out

    def lshift(a, k):
        out = np.full_like(a, NEG_INF)
        out[:, :-k] = a[:, k:]
        return out

    skip_next = np.zeros_like(skip)
    skip_next[:, :-2] = skip[:, 2:]

    with np.errstate(invalid="ignore"):
        alpha = np.full((B, T, S), NEG_INF)
        alpha[:, 0, 0] = emit[:, 0, 0]
        alpha[:, 0, 1] = emit[:, 0, 1]
        for t in range(1, T):
            prev = alpha[:, t - 1]
            acc = np.logaddexp(prev, shift(prev, 1))
            acc = np.where(skip, np.logaddexp(acc, shift(prev, 2)), acc)
            alpha[:, t] = acc + emit[:, t]

        last = lengths - 1
        a_end = alpha[np.arange(B), last]
        end_a = a_end[np.arange(B), n_states - 1]
        end_b = a_end[np.arange(B), n_states - 2]
        loglik = np.logaddexp(end_a, end_b)

        beta = np.full((B, T, S), NEG_INF)
        init = np.full((B, S), NEG_INF)
        init[np.arange(B), n_states - 1] = 0.0
        init[np.arange(B), n_states - 2] = 0.0
        for t in range(T - 1, -1, -1):
            if t == T - 1:
                nxt = np.full((B, S), NEG_INF)
            else:
                nb = beta[:, t + 1]
                nxt = np.logaddexp(nb, lshift(nb, 1))
                nxt = np.where(skip_next, np.logaddexp(nxt, lshift(nb, 2)), nxt)
            is_last = (t == last)[:, None]
            nxt = np.where(is_last, init, nxt)
            beta[:, t] = np.where((t <= last)[:, None], nxt + emit[:, t], NEG_INF)

        # occupancy of state s at t, normalised by the total likelihood
        occ = alpha + beta - emit - loglik[:, None, None]
        occ = np.where(np.isfinite(occ), np.exp(occ), 0.0)

    grad = np.zeros_like(lp)
    for b in range(B):
        ns = n_states[b]
        np.add.at(grad[b].T, ext[b, :ns], occ[b, :, :ns].T)
    grad = -grad
    grad[np.arange(T)[None, :] >= lengths[:, None]] = 0.0
    return -loglik, grad


def ctc_loss_tensor(log_probs: nx.Tensor, lengths, labels, blank: int = 0) -> nx.Tensor:
    """Per-utterance CTC losses (B,) as a tape node over padded log-probs."""
    losses, grads = ctc_loss_batch(log_probs.data, lengths, labels, blank)
    grads = grads.astype(log_probs.data.dtype, copy=False)
    return nx.custom(losses, (log_probs,), lambda g: (grads * g[:, None, None],))


def collapse_alignment(alignment: Iterable[int], blank: int = 0) -> list[int]:
    out: list[int] = []
    prev = None
    for k in alignment:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def ctc_greedy_decode(matrix, blank: int = 0) -> tuple[list[int], list[int]]:
    """Per-frame argmax (lowest id wins ties), then collapse.

    Works on probabilities or log-probabilities alike.
    """
    alignment = [int(k) for k in np.argmax(np.asarray(matrix), axis=-1)]
    return collapse_alignment(alignment, blank), alignment


def brute_force_ctc_loss(log_probs, label: Sequence[int], blank: int = 0) -> float:
    """Exhaustive sum over all V**T alignments. Returns +inf when none collapse to ``label``."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    if T > 8 or V > 6:
        raise EnumerationTooLargeError(f"enumeration bound is T<=8, V<=6; got T={T}, V={V}")
    target = [int(k) for k in label]
    scores = []
    for path in itertools.product(range(V), repeat=T):
        if collapse_alignment(path, blank) == target:
            scores.append(lp[np.arange(T), path].sum())
    if not scores:
        return float("inf")
    return float(-np.logaddexp.reduce(np.array(scores)))


# -------------------------------------------------------------- prefix scoring


class CTCPrefixScorer:
    """Incremental CTC prefix probabilities for joint decoding.

    A state is ``(r_nonblank, r_blank, last_token)`` where the two arrays hold,
    per frame, the log-probability of having emitted the prefix with the
    path ending in a non-blank or blank symbol.
    """

    def __init__(self, log_probs, blank: int = 0):
        self.lp = np.asarray(log_probs, dtype=np.float64)
        self.blank = blank
        self.T = self.lp.shape[0]

    def initial_state(self):
        r_b = np.cumsum(self.lp[:, self.blank])
        r_n = np.full(self.T, NEG_INF)
        return r_n, r_b, None

    def final_score(self, state) -> float:
        """log P(output == prefix)."""
        r_n, r_b, _ = state
        return float(np.logaddexp(r_n[-1], r_b[-1]))

    def extend(self, state, tokens: Sequence[int]):
        """Prefix log-probabilities and new states for each candidate token."""
        r_n_prev, r_b_prev, last = state
        tokens = np.asarray(tokens, dtype=np.int64)
        C = len(tokens)
        x = self.lp[:, tokens]  # T x C
        total_prev = np.logaddexp(r_n_prev, r_b_prev)
        phi = np.repeat(total_prev[:, None], C, axis=1)
        if last is not None:
            same = tokens == last
            phi[:, same] = r_b_prev[:, None]
        r_n = np.full((self.T, C), NEG_INF)
        r_b = np.full((self.T, C), NEG_INF)
        if last is None:
            r_n[0] = x[0]
        psi = r_n[0].copy()
        for t in range(1, self.T):
            r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + x[t]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + self.lp[t, self.blank]
            psi = np.logaddexp(psi, phi[t - 1] + x[t])
        states = [(r_n[:, i], r_b[:, i], int(tokens[i])) for i in range(C)]
        return psi, states


def ctc_prefix_score(log_probs, prefix: Sequence[int], blank: int = 0) -> float:
    """log P(the CTC output starts with ``prefix``)."""
    scorer = CTCPrefixScorer(log_probs, blank)
    state = scorer.initial_state()
    if len(prefix) == 0:
        return 0.0
    score = 0.0
    for k in prefix:
        if k == blank:
            raise ValueError("prefix must be blank-free")
        psi, states = scorer.extend(state, [k])
        score, state = float(psi[0]), states[0]
    return score


# -------------------------------------------------------------- lattice dumps


def write_lattice(probs, fh: TextIO | str | os.PathLike) -> None:
    """Write ``T V`` then T rows of V shortest-round-trip decimals."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("lattice must be a T x V matrix")
    if not hasattr(fh, "write"):
        with open(fh, "w", encoding="ascii") as f:
            write_lattice(probs, f)
        return
    T, V = probs.shape
    fh.write(f"{T} {V}\n")
    for row in probs:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_lattice(fh: TextIO | str | os.PathLike) -> np.ndarray:
    if not hasattr(fh, "read"):
        with open(fh, encoding="ascii") as f:
            return read_lattice(f)
    header = fh.readline().split()
    if len(header) != 2:
        raise ValueError("lattice header must be 'T V'")
    T, V = int(header[0]), int(header[1])
    rows = []
    for _ in range(T):
        parts = fh.readline().split()
        if len(parts) != V:
            raise ValueError(f"lattice row has {len(parts)} values, expected {V}")
        rows.append([float(p) for p in parts])
    return np.array(rows, dtype=np.float64).reshape(T, V)


def lattice_to_string(probs) -> str:
    buf = io.StringIO()
    write_lattice(probs, buf)
    return buf.getvalue()
