"""Deterministic synthetic multilingual corpus.

All languages draw their sounds from one shared phone inventory. Each
language uses a subset of the phones, spells every phone with its own
character (so orthographies overlap only partly), and colours each phone
with a language-specific accent vector. An utterance repeats each phone's
prototype for a few frames, pads it with silence and adds Gaussian noise.

A confusable language uses exactly its partner's phones, spells them
differently, and has its accent pulled toward the partner's by a mixing
coefficient. Telling the two apart is hard, and picking the wrong one
yields the wrong characters for otherwise well-recognised sounds.

On disk a corpus is a directory holding ``manifest.jsonl`` (one header line,
then one record per utterance) and ``features.bin`` (little-endian float32
frames, concatenated in manifest order).
"""
from __future__ import annotations

import hashlib
import json
import string
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .vocab import VocabSpec

TIERS = ("high", "middle", "low", "exlow")
SPLITS = ("train", "dev", "test")
FORMAT = "lidprompt-corpus"
VERSION = 1
MANIFEST = "manifest.jsonl"
FEATURES = "features.bin"


class CorpusConfigError(ValueError):
    pass


class CorpusLoadError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    num_languages: int = 5
    tier_sizes: dict = field(default_factory=lambda: {"high": 2000, "middle": 500, "low": 100, "exlow": 20})
    language_tiers: tuple | None = None
    dev_per_language: int = 20
    test_per_language: int = 60
    inventory_size: int = 20
    num_phones: int = 12
    chars_per_language: int = 8
    accent: float = 0.5
    feature_dim: int = 16
    noise: float = 0.3
    confusability: float = 0.5
    confusable_pairs: tuple | None = None
    respelled_phones: int | None = None  # confusable language: phones spelled unlike the partner (None: all)
    min_chars: int = 3
    max_chars: int = 10
    min_frames_per_char: int = 3
    max_frames_per_char: int = 6
    silence_frames: int = 2
    max_leading_silence: int = 4

    def resolved_tiers(self) -> list[str]:
        if self.language_tiers is not None:
            tiers = list(self.language_tiers)
        else:
            present = [t for t in TIERS if t in self.tier_sizes]
            if self.num_languages < len(present):
                raise CorpusConfigError(
                    f"{self.num_languages} languages cannot cover {len(present)} tiers"
                )
            counts = [1] * len(present)
            for i in range(self.num_languages - len(present)):
                counts[(1 + i) % len(present)] += 1
            tiers = [t for t, c in zip(present, counts) for _ in range(c)]
        if len(tiers) != self.num_languages:
            raise CorpusConfigError("language_tiers must list one tier per language")
        unknown = set(tiers) - set(self.tier_sizes)
        if unknown:
            raise CorpusConfigError(f"tiers without a size: {sorted(unknown)}")
        return tiers

    def resolved_pairs(self) -> list[tuple[int, int, float]]:
        """(confusable language, partner, mixing) triples."""
        if self.confusable_pairs is not None:
            return [(int(a), int(b), float(m)) for a, b, m in self.confusable_pairs]
        if self.confusability <= 0:
            return []
        tiers = self.resolved_tiers()
        if "exlow" in tiers and "low" in tiers:
            return [(tiers.index("exlow"), tiers.index("low"), float(self.confusability))]
        return []

    def validate(self) -> None:
        if self.num_languages < 2:
            raise CorpusConfigError("need at least two languages")
        for tier, n in self.tier_sizes.items():
            if tier not in TIERS:
                raise CorpusConfigError(f"unknown tier {tier!r}")
            if int(n) < 1:
                raise CorpusConfigError(f"tier {tier!r} needs at least one training utterance")
        tiers = self.resolved_tiers()
        for tier in self.tier_sizes:
            if tier not in tiers:
                raise CorpusConfigError(f"tier {tier!r} has no language")
        if not 1 <= self.chars_per_language <= min(self.inventory_size, self.num_phones):
            raise CorpusConfigError("chars_per_language exceeds the phone or character inventory")
        if self.inventory_size > 26:
            raise CorpusConfigError("inventory_size is limited to 26 letters")
        if not 1 <= self.silence_frames <= self.max_leading_silence:
            raise CorpusConfigError("need 1 <= silence_frames <= max_leading_silence")
        if not 1 <= self.min_chars <= self.max_chars:
            raise CorpusConfigError("bad utterance length range")
        if self.min_frames_per_char < 2:
            # 2 frames per char plus silence keeps T >= 2 * len(label) + 1
            raise CorpusConfigError("min_frames_per_char must be >= 2")
        if self.min_frames_per_char > self.max_frames_per_char:
            raise CorpusConfigError("bad frames-per-char range")
        for a, b, mu in self.resolved_pairs():
            if a == b or not (0 <= a < self.num_languages and 0 <= b < self.num_languages):
                raise CorpusConfigError(f"bad confusable pair ({a}, {b})")
            if not 0.0 <= mu < 1.0:
                raise CorpusConfigError("confusability must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tier_sizes"] = {t: int(self.tier_sizes[t]) for t in TIERS if t in self.tier_sizes}
        d["language_tiers"] = self.resolved_tiers()
        d["confusable_pairs"] = [list(p) for p in self.resolved_pairs()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for key in ("language_tiers", "confusable_pairs"):
            if d.get(key) is not None:
                d[key] = tuple(tuple(x) if isinstance(x, list) else x for x in d[key])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class LanguageProfile:
    lid_token: str
    tier: str
    char_tokens: list[str]
    unigram_weights: list[float]
    prototype_vectors: list[list[float]]
    confusability_partner: tuple[int, float] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusability_partner"] = list(self.confusability_partner) if self.confusability_partner else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LanguageProfile":
        d = dict(d)
        if d.get("confusability_partner") is not None:
            d["confusability_partner"] = tuple(d["confusability_partner"])
        return cls(**d)


@dataclass
class Utterance:
    id: str
    language: int  # LID token id
    text: list[int]  # without the LID prefix
    tier: str
    features: np.ndarray  # (T, F) float32

    @property
    def label(self) -> list[int]:
        return [self.language, *self.text]

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class CorpusManifest:
    seed: int
    config: CorpusConfig
    languages: list[LanguageProfile]
    vocab: VocabSpec
    splits: dict[str, list[Utterance]]
    version: int = VERSION

    def split(self, name: str) -> list[Utterance]:
        return self.splits[name]

    @property
    def lid_ids(self) -> list[int]:
        return [self.vocab.id(lang.lid_token) for lang in self.languages]

    def tier_of(self, lid: int) -> str:
        return self.languages[self.lid_ids.index(lid)].tier

    def language_index(self, lid: int) -> int:
        return self.lid_ids.index(lid)

    def confusable_pairs(self) -> list[tuple[int, int]]:
        """(confusable language, partner) as LID token ids."""
        ids = self.lid_ids
        return [(ids[i], ids[int(p[0])]) for i, lang in enumerate(self.languages)
                if (p := lang.confusability_partner) is not None]


def _rng(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode())])


def _build_languages(cfg: CorpusConfig, seed: int) -> list[LanguageProfile]:
    inventory = list(string.ascii_lowercase[: cfg.inventory_size])
    tiers = cfg.resolved_tiers()
    shared = _rng(seed, "phones").normal(size=(cfg.num_phones, cfg.feature_dim))
    shared /= np.linalg.norm(shared, axis=1, keepdims=True)
    partner_of = {a: (b, mu) for a, b, mu in cfg.resolved_pairs()}

    phones, accents, spelling = {}, {}, {}
    order = sorted(range(cfg.num_languages), key=lambda i: i in partner_of)
    for i in order:
        rng = _rng(seed, f"language/{i}")
        accent = rng.normal(size=(cfg.num_phones, cfg.feature_dim)) / np.sqrt(cfg.feature_dim)
        if i in partner_of:
            b, mu = partner_of[i]
            phones[i] = phones[b]
            accents[i] = (1.0 - mu) * accent + mu * accents[b]
            # respell some (default: all) shared phones with characters the partner does not use there
            n = len(phones[i])
            k = n if cfg.respelled_phones is None else min(n, cfg.respelled_phones)
            letters = spelling[b].copy()
            which = np.sort(rng.choice(n, size=k, replace=False))
            pool = [c for c in inventory if c not in set(spelling[b])]
            letters[which] = rng.choice(pool, size=k, replace=False)
            spelling[i] = letters
        else:
            phones[i] = np.sort(rng.choice(cfg.num_phones, size=cfg.chars_per_language, replace=False))
            accents[i] = accent
            spelling[i] = rng.choice(inventory, size=cfg.chars_per_language, replace=False)

    langs = []
    for i in range(cfg.num_languages):
        rng = _rng(seed, f"unigram/{i}")
        protos = shared[phones[i]] + cfg.accent * accents[i][phones[i]]
        order_by_char = np.argsort(spelling[i])
        weights = rng.dirichlet(np.full(len(phones[i]), 2.0))
        partner = (partner_of[i][0], partner_of[i][1]) if i in partner_of else None
        langs.append(LanguageProfile(
            f"<l{i}>",
            tiers[i],
            [str(c) for c in spelling[i][order_by_char]],
            weights.tolist(),
            protos[order_by_char].tolist(),
            partner,
        ))
    return langs


def build_vocab(languages: Sequence[LanguageProfile]) -> VocabSpec:
    chars = sorted({c for lang in languages for c in lang.char_tokens})
    return VocabSpec.build([lang.lid_token for lang in languages], chars)


def _synthesize(cfg: CorpusConfig, lang: LanguageProfile, rng: np.random.Generator) -> tuple[list[str], np.ndarray]:
    n = int(rng.integers(cfg.min_chars, cfg.max_chars + 1))
    picks = rng.choice(len(lang.char_tokens), size=n, p=np.asarray(lang.unigram_weights))
    protos = np.asarray(lang.prototype_vectors)
    durations = rng.integers(cfg.min_frames_per_char, cfg.max_frames_per_char + 1, size=n)
    lead = int(rng.integers(cfg.silence_frames, cfg.max_leading_silence + 1))
    clean = np.concatenate([
        np.zeros((lead, cfg.feature_dim)),
        np.repeat(protos[picks], durations, axis=0),
        np.zeros((cfg.silence_frames, cfg.feature_dim)),
    ])
    feats = clean + rng.normal(scale=cfg.noise, size=clean.shape)
    return [lang.char_tokens[k] for k in picks], feats.astype(np.float32)


def generate_corpus(config: CorpusConfig | None = None, seed: int = 0) -> CorpusManifest:
    cfg = config or CorpusConfig()
    cfg.validate()
    languages = _build_languages(cfg, seed)
    vocab = build_vocab(languages)
    splits: dict[str, list[Utterance]] = {s: [] for s in SPLITS}
    for i, lang in enumerate(languages):
        lid = vocab.id(lang.lid_token)
        counts = {
            "train": int(cfg.tier_sizes[lang.tier]),
            "dev": cfg.dev_per_language,
            "test": cfg.test_per_language,
        }
        for split in SPLITS:
            for j in range(counts[split]):
                uid = f"{split}-l{i}-{j:05d}"
                chars, feats = _synthesize(cfg, lang, _rng(seed, uid))
                splits[split].append(Utterance(uid, lid, vocab.ids(chars), lang.tier, feats))
    return CorpusManifest(seed, cfg, languages, vocab, splits)


# ---------------------------------------------------------------------- storage


def _header(manifest: CorpusManifest, digest: str, nbytes: int) -> dict:
    return {
        "format": FORMAT,
        "version": manifest.version,
        "seed": manifest.seed,
        "config": manifest.config.to_dict(),
        "languages": [lang.to_dict() for lang in manifest.languages],
        "vocab": manifest.vocab.to_dict(),
        "feature_file": FEATURES,
        "feature_bytes": nbytes,
        "feature_sha256": digest,
    }


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_corpus(manifest: CorpusManifest, path) -> Path:
    """Write ``manifest.jsonl`` and ``features.bin`` into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blobs, records, offset = [], [], 0
    for split in SPLITS:
        for u in manifest.splits.get(split, []):
            raw = np.ascontiguousarray(u.features, dtype="<f4").tobytes()
            records.append({
                "id": u.id,
                "split": split,
                "language": manifest.vocab.tokens[u.language],
                "text": manifest.vocab.decode(u.text),
                "tier": u.tier,
                "offset": offset,
                "frames": int(u.features.shape[0]),
                "dim": int(u.features.shape[1]),
            })
            blobs.append(raw)
            offset += len(raw)
    data = b"".join(blobs)
    (root / FEATURES).write_bytes(data)
    lines = [_dumps(_header(manifest, hashlib.sha256(data).hexdigest(), len(data)))]
    lines += [_dumps(r) for r in records]
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def load_corpus(path) -> CorpusManifest:
    root = Path(path)
    try:
        lines = (root / MANIFEST).read_text(encoding="utf-8").splitlines()
        data = (root / FEATURES).read_bytes()
    except OSError as e:
        raise CorpusLoadError(str(e)) from e
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:] if line]
    except (IndexError, json.JSONDecodeError) as e:
        raise CorpusLoadError(f"malformed manifest: {e}") from e
    if header.get("format") != FORMAT:
        raise CorpusLoadError("not a lidprompt corpus manifest")
    if header.get("version") != VERSION:
        raise CorpusLoadError(f"unsupported manifest version {header.get('version')}")
    if len(data) != header["feature_bytes"]:
        raise CorpusLoadError("feature store size does not match the manifest")
    if hashlib.sha256(data).hexdigest() != header["feature_sha256"]:
        raise CorpusLoadError("feature store checksum mismatch")

    vocab = VocabSpec.from_dict(header["vocab"])
    languages = [LanguageProfile.from_dict(d) for d in header["languages"]]
    splits: dict[str, list[Utterance]] = {s: [] for s in SPLITS}
    expected, seen = 0, set()
    for r in records:
        nbytes = r["frames"] * r["dim"] * 4
        if r["offset"] != expected or r["frames"] < 1 or r["offset"] + nbytes > len(data):
            raise CorpusLoadError(f"record {r.get('id')!r} has an inconsistent offset/length")
        if r["id"] in seen:
            raise CorpusLoadError(f"duplicate utterance id {r['id']!r}")
        seen.add(r["id"])
        feats = np.frombuffer(data, dtype="<f4", count=r["frames"] * r["dim"], offset=r["offset"])
        feats = feats.reshape(r["frames"], r["dim"]).astype(np.float32)
        splits[r["split"]].append(
            Utterance(r["id"], vocab.id(r["language"]), vocab.ids(r["text"]), r["tier"], feats)
        )
        expected += nbytes
    if expected != len(data):
        raise CorpusLoadError("feature store has bytes not covered by the manifest")
    return CorpusManifest(header["seed"], CorpusConfig.from_dict(header["config"]), languages, vocab, splits, header["version"])
