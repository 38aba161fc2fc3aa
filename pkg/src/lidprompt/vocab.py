from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BLANK = "<blank>"
SOS = "<sos>"
EOS = "<eos>"


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class VocabSpec:
    """Token inventory with the language-ID subset marked out."""

    tokens: tuple[str, ...]
    blank_id: int
    sos_id: int
    eos_id: int
    lid_ids: frozenset[int]
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "lid_ids", frozenset(int(i) for i in self.lid_ids))
        n = len(self.tokens)
        if len(set(self.tokens)) != n:
            raise VocabError("duplicate token strings")
        specials = {self.blank_id, self.sos_id, self.eos_id}
        for i in specials | set(self.lid_ids):
            if not 0 <= i < n:
                raise VocabError(f"token index {i} out of range for vocab of size {n}")
        if not self.lid_ids:
            raise VocabError("lid_ids must be non-empty")
        if specials & self.lid_ids:
            raise VocabError("blank/sos/eos cannot be language-ID tokens")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, lid_tokens: Sequence[str], chars: Sequence[str]) -> "VocabSpec":
        """Layout: blank, sos, eos, LID tokens, then characters."""
        tokens = [BLANK, SOS, EOS, *lid_tokens, *chars]
        lids = range(3, 3 + len(lid_tokens))
        return cls(tuple(tokens), 0, 1, 2, frozenset(lids))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def sorted_lid_ids(self) -> list[int]:
        return sorted(self.lid_ids)

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabError(f"unknown token {token!r}") from None

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def strip_lid(self, ids: Sequence[int]) -> list[int]:
        return [i for i in ids if i not in self.lid_ids]

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "blank_id": self.blank_id,
            "sos_id": self.sos_id,
            "eos_id": self.eos_id,
            "lid_ids": sorted(self.lid_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VocabSpec":
        return cls(tuple(d["tokens"]), d["blank_id"], d["sos_id"], d["eos_id"], frozenset(d["lid_ids"]))


@dataclass
class PosteriorLattice:
    """Per-frame token distributions, shape (T, V), rows on the simplex."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError(f"lattice must be 2-D, got shape {self.probs.shape}")

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    def is_stochastic(self, tol: float = 1e-8) -> bool:
        p = self.probs
        return bool(np.all(p >= 0) and np.all(np.abs(p.sum(axis=-1) - 1.0) <= tol))
