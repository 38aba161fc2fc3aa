"""Inference-time surgery on the intermediate posterior lattice.

Each operator takes a (T, V) row-stochastic matrix, or a batch (..., T, V),
and returns a new array; inputs are never modified in place. Sums over
language-ID columns always run in ascending token-id order so results do
not depend on the platform's reduction order.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .vocab import PosteriorLattice, VocabSpec


class PromptError(ValueError):
    pass


class PromptMode(str, enum.Enum):
    NONE = "none"
    REPLACEMENT = "replacement"
    AGGREGATION = "aggregation"
    PREFIX = "prefix"
    SOFT = "soft"


@dataclass(frozen=True)
class PromptSpec:
    """Prompt mode plus its target: one LID id, or a set of them for ``soft``."""

    mode: PromptMode = PromptMode.NONE
    target: int | None = None
    targets: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "mode", PromptMode(self.mode))
        object.__setattr__(self, "targets", frozenset(int(k) for k in self.targets))
        if self.mode is PromptMode.SOFT:
            if not self.targets:
                raise PromptError("soft prompting needs a non-empty target set")
        elif self.mode is not PromptMode.NONE and self.target is None:
            raise PromptError(f"{self.mode.value} prompting needs a target language id")

    @classmethod
    def none(cls) -> "PromptSpec":
        return cls(PromptMode.NONE)

    def validate(self, vocab: VocabSpec) -> None:
        ids = self.targets if self.mode is PromptMode.SOFT else ({self.target} if self.target is not None else set())
        bad = set(ids) - vocab.lid_ids
        if bad:
            raise PromptError(f"prompt targets {sorted(bad)} are not language-ID tokens")

    def describe(self, vocab: VocabSpec | None = None) -> str:
        name = (lambda i: vocab.tokens[i]) if vocab else str
        if self.mode is PromptMode.NONE:
            return "none"
        if self.mode is PromptMode.SOFT:
            return f"soft[{','.join(name(i) for i in sorted(self.targets))}]"
        return f"{self.mode.value}[{name(self.target)}]"


def _check_target(k_target: int, lid_ids: Iterable[int]) -> list[int]:
    lids = sorted(int(k) for k in lid_ids)
    if int(k_target) not in lids:
        raise PromptError(f"target {k_target} is not a language-ID token")
    return lids


def _ordered_sum(probs: np.ndarray, ids: list[int]) -> np.ndarray:
    acc = np.zeros(probs.shape[:-1])
    for k in ids:
        acc = acc + probs[..., k]
    return acc


def _one_hot(k: int, size: int) -> np.ndarray:
    row = np.zeros(size)
    row[k] = 1.0
    return row


def apply_replacement(probs, k_target: int, lid_ids: Iterable[int]) -> np.ndarray:
    """Overwrite every frame whose argmax is a language ID with a one-hot at ``k_target``."""
    p = np.asarray(probs, dtype=np.float64)
    lids = _check_target(k_target, lid_ids)
    hit = np.isin(np.argmax(p, axis=-1), lids)
    out = p.copy()
    out[hit] = _one_hot(int(k_target), p.shape[-1])
    return out


def apply_aggregation(probs, k_target: int, lid_ids: Iterable[int]) -> np.ndarray:
    """Move all language-ID mass of every frame onto ``k_target``."""
    p = np.asarray(probs, dtype=np.float64)
    lids = _check_target(k_target, lid_ids)
    mass = _ordered_sum(p, lids)
    out = p.copy()
    out[..., lids] = 0.0
    out[..., int(k_target)] = mass
    return out


def apply_prefix(probs, k_target: int, lid_ids: Iterable[int] | None = None) -> np.ndarray:
    """Make the first frame a one-hot at ``k_target``; later frames are untouched."""
    p = np.asarray(probs, dtype=np.float64)
    if lid_ids is not None:
        _check_target(k_target, lid_ids)
    if p.shape[-2] < 1:
        raise PromptError("prefix prompting needs at least one frame")
    out = p.copy()
    out[..., 0, :] = _one_hot(int(k_target), p.shape[-1])
    return out


def apply_soft(probs, k_targets: Iterable[int], lid_ids: Iterable[int]) -> np.ndarray:
    """Renormalise language-ID mass onto a candidate subset.

    Candidates keep their relative proportions and absorb the mass of the
    excluded languages. When every candidate has zero probability but some
    language-ID mass exists, that mass is split evenly over the candidates.
    """
    p = np.asarray(probs, dtype=np.float64)
    targets = sorted({int(k) for k in k_targets})
    if not targets:
        raise PromptError("soft prompting needs a non-empty target set")
    lids = sorted(int(k) for k in lid_ids)
    if not set(targets) <= set(lids):
        raise PromptError(f"soft targets {targets} are not all language-ID tokens")
    lid_mass = _ordered_sum(p, lids)
    tgt_mass = _ordered_sum(p, targets)
    degenerate = tgt_mass <= 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(degenerate, 0.0, lid_mass / np.where(degenerate, 1.0, tgt_mass))
    out = p.copy()
    out[..., lids] = 0.0
    even = lid_mass / len(targets)
    for k in targets:
        out[..., k] = np.where(degenerate, even, p[..., k] * factor)
    return out


def apply_prompt(lattice, spec: PromptSpec | None, vocab: VocabSpec):
    """Dispatch on ``spec.mode``. Accepts an array or a :class:`PosteriorLattice`
    and returns the same kind."""
    wrapped = isinstance(lattice, PosteriorLattice)
    p = lattice.probs if wrapped else np.asarray(lattice, dtype=np.float64)
    if spec is None or spec.mode is PromptMode.NONE:
        return lattice
    spec.validate(vocab)
    lids = vocab.sorted_lid_ids
    if spec.mode is PromptMode.REPLACEMENT:
        out = apply_replacement(p, spec.target, lids)
    elif spec.mode is PromptMode.AGGREGATION:
        out = apply_aggregation(p, spec.target, lids)
    elif spec.mode is PromptMode.PREFIX:
        out = apply_prefix(p, spec.target, lids)
    else:
        out = apply_soft(p, spec.targets, lids)
    return PosteriorLattice(out) if wrapped else out


def parse_prompt(mode: str, vocab: VocabSpec, target: str | None = None, targets: str | None = None) -> PromptSpec:
    """Build a spec from token strings, e.g. ``parse_prompt("soft", v, targets="<l0>,<l1>")``."""
    mode = PromptMode(mode.lower())
    if mode is PromptMode.SOFT:
        names = [t for t in (targets or target or "").split(",") if t]
        spec = PromptSpec(mode, targets=frozenset(vocab.ids(names)))
    elif mode is PromptMode.NONE:
        spec = PromptSpec.none()
    else:
        if not target:
            raise PromptError(f"--target is required for {mode.value}")
        spec = PromptSpec(mode, target=vocab.id(target))
    spec.validate(vocab)
    return spec
