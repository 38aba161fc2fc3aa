import json

import numpy as np
import pytest

from lidprompt.corpus import (
    CorpusConfig,
    CorpusConfigError,
    CorpusLoadError,
    generate_corpus,
    load_corpus,
    save_corpus,
)
from lidprompt.ctc import min_frames


def corpus_files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_generation_is_deterministic(tiny_corpus_cfg):
    a = generate_corpus(tiny_corpus_cfg, seed=3)
    b = generate_corpus(tiny_corpus_cfg, seed=3)
    for split in ("train", "dev", "test"):
        for u, v in zip(a.split(split), b.split(split), strict=True):
            assert u.id == v.id and u.text == v.text
            np.testing.assert_array_equal(u.features, v.features)
    c = generate_corpus(tiny_corpus_cfg, seed=4)
    assert any(not np.array_equal(u.features, v.features) for u, v in zip(a.split("train"), c.split("train")))


def test_default_config_shape():
    cfg = CorpusConfig()
    assert cfg.resolved_tiers() == ["high", "middle", "middle", "low", "exlow"]
    assert cfg.resolved_pairs() == [(4, 3, 0.5)]
    assert CorpusConfig(confusability=0.0).resolved_pairs() == []


def test_tier_counts_labels_and_feasibility(tiny_corpus_cfg):
    c = generate_corpus(tiny_corpus_cfg, seed=0)
    assert len(c.lid_ids) == 3 and set(c.lid_ids) == set(c.vocab.lid_ids)
    sizes = tiny_corpus_cfg.tier_sizes
    for lid in c.lid_ids:
        tier = c.tier_of(lid)
        train = [u for u in c.split("train") if u.language == lid]
        assert len(train) == sizes[tier]
        assert sum(u.language == lid for u in c.split("test")) == tiny_corpus_cfg.test_per_language
    ids = [u.id for s in ("train", "dev", "test") for u in c.split(s)]
    assert len(ids) == len(set(ids))
    for s in ("train", "dev", "test"):
        for u in c.split(s):
            assert u.label[0] == u.language
            assert not set(u.text) & c.vocab.lid_ids
            assert u.num_frames >= 2 * len(u.label) + 1
            assert u.num_frames >= min_frames(u.label)


def test_language_profiles_are_valid():
    c = generate_corpus(CorpusConfig(tier_sizes={"high": 2, "middle": 2, "low": 2, "exlow": 2},
                                     dev_per_language=0, test_per_language=1), seed=0)
    for lang in c.languages:
        assert abs(sum(lang.unigram_weights) - 1) < 1e-12 and min(lang.unigram_weights) >= 0
        assert np.all(np.isfinite(lang.prototype_vectors))
    exlow, low = c.languages[4], c.languages[3]
    assert exlow.confusability_partner == (3, 0.5)
    assert c.confusable_pairs() == [(c.lid_ids[4], c.lid_ids[3])]
    # the confusable language spells the partner's sounds differently
    assert exlow.char_tokens != low.char_tokens


def test_noiseless_frames_recover_the_text():
    cfg = CorpusConfig(num_languages=3, tier_sizes={"high": 10, "low": 10}, dev_per_language=0,
                       test_per_language=0, noise=0.0, confusability=0.0)
    c = generate_corpus(cfg, seed=1)
    for u in c.split("train"):
        lang = c.languages[c.language_index(u.language)]
        protos = np.asarray(lang.prototype_vectors)
        # silence frames are exactly zero; every other frame sits on a prototype
        voiced = u.features[np.abs(u.features).sum(axis=1) > 0]
        nearest = np.argmin(((voiced[:, None, :] - protos[None]) ** 2).sum(-1), axis=1)
        chars = [lang.char_tokens[k] for k in nearest]
        # back-to-back repeats of a character are indistinguishable frame runs, so compare collapsed
        ref = c.vocab.decode(u.text)
        collapsed = [ch for i, ch in enumerate(chars) if i == 0 or ch != chars[i - 1]]
        ref_collapsed = [ch for i, ch in enumerate(ref) if i == 0 or ch != ref[i - 1]]
        assert collapsed == ref_collapsed
        assert len(voiced) >= cfg.min_frames_per_char * len(ref)


def test_config_errors():
    with pytest.raises(CorpusConfigError):
        generate_corpus(CorpusConfig(num_languages=1))
    with pytest.raises(CorpusConfigError):
        generate_corpus(CorpusConfig(num_languages=3))  # four tiers, three languages
    with pytest.raises(CorpusConfigError):
        generate_corpus(CorpusConfig(tier_sizes={"high": 0, "low": 1}, num_languages=2))
    with pytest.raises(CorpusConfigError):
        generate_corpus(CorpusConfig(min_frames_per_char=1))
    with pytest.raises(CorpusConfigError):
        generate_corpus(CorpusConfig(confusable_pairs=((0, 0, 0.5),)))


def test_save_load_save_is_byte_identical(tiny_corpus_cfg, tmp_path):
    c = generate_corpus(tiny_corpus_cfg, seed=2)
    save_corpus(c, tmp_path / "a")
    loaded = load_corpus(tmp_path / "a")
    save_corpus(loaded, tmp_path / "b")
    assert corpus_files(tmp_path / "a") == corpus_files(tmp_path / "b")
    for u, v in zip(c.split("test"), loaded.split("test")):
        np.testing.assert_array_equal(u.features, v.features)
    assert loaded.vocab == c.vocab and loaded.config.to_dict() == c.config.to_dict()


def test_manifest_is_line_delimited_json(tiny_corpus_cfg, tmp_path):
    c = generate_corpus(tiny_corpus_cfg, seed=2)
    save_corpus(c, tmp_path)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["version"] == 1 and len(header["languages"]) == 3
    assert len(lines) - 1 == sum(len(c.split(s)) for s in ("train", "dev", "test"))


def _rewrite_record(path, index, **changes):
    lines = (path / "manifest.jsonl").read_text().splitlines()
    rec = json.loads(lines[index])
    rec.update(changes)
    lines[index] = json.dumps(rec, sort_keys=True, separators=(",", ":"))
    (path / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def test_corrupted_length_field_is_rejected(tiny_corpus_cfg, tmp_path):
    save_corpus(generate_corpus(tiny_corpus_cfg, seed=2), tmp_path)
    rec = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[3])
    _rewrite_record(tmp_path, 3, frames=rec["frames"] + 1)
    with pytest.raises(CorpusLoadError):
        load_corpus(tmp_path)


def test_truncated_or_tampered_features_are_rejected(tiny_corpus_cfg, tmp_path):
    save_corpus(generate_corpus(tiny_corpus_cfg, seed=2), tmp_path)
    feats = tmp_path / "features.bin"
    raw = feats.read_bytes()
    feats.write_bytes(raw[:-4])
    with pytest.raises(CorpusLoadError):
        load_corpus(tmp_path)
    flipped = bytearray(raw)
    flipped[10] ^= 0xFF
    feats.write_bytes(bytes(flipped))
    with pytest.raises(CorpusLoadError, match="checksum"):
        load_corpus(tmp_path)


def test_version_mismatch_is_rejected(tiny_corpus_cfg, tmp_path):
    save_corpus(generate_corpus(tiny_corpus_cfg, seed=2), tmp_path)
    _rewrite_record(tmp_path, 0, version=99)
    with pytest.raises(CorpusLoadError, match="version"):
        load_corpus(tmp_path)


def test_missing_directory_is_a_load_error(tmp_path):
    with pytest.raises(CorpusLoadError):
        load_corpus(tmp_path / "nope")
