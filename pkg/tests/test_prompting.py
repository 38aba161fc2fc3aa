from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidprompt.ctc import ctc_greedy_decode, lattice_to_string, read_lattice
from lidprompt.prompting import (
    PromptError,
    PromptMode,
    PromptSpec,
    apply_aggregation,
    apply_prefix,
    apply_prompt,
    apply_replacement,
    apply_soft,
    parse_prompt,
)
from lidprompt.vocab import PosteriorLattice

from .conftest import random_lattice

GOLDEN = Path(__file__).parent / "golden"

# toy layout for the worked rows: blank, a, en, ja, zh
LIDS = [2, 3, 4]
EN, JA, ZH = LIDS


def row(*values):
    return np.array([values], dtype=np.float64)


def test_replacement_examples():
    lids = [2, 3]
    np.testing.assert_array_equal(apply_replacement(row(0.1, 0.1, 0.5, 0.3), EN, lids), row(0, 0, 1, 0))
    unchanged = row(0.6, 0.1, 0.2, 0.1)
    np.testing.assert_array_equal(apply_replacement(unchanged, JA, lids), unchanged)
    # a frame that prefers the wrong language is overwritten with the right one
    np.testing.assert_array_equal(apply_replacement(row(0.1, 0.1, 0.3, 0.5), EN, lids), row(0, 0, 1, 0))


def test_replacement_argmax_tie_takes_lowest_id():
    # blank ties with en: blank wins, so the row is left alone
    p = row(0.4, 0.2, 0.4, 0.0)
    np.testing.assert_array_equal(apply_replacement(p, JA, [2, 3]), p)


def test_aggregation_examples():
    lids = [2, 3]
    np.testing.assert_allclose(apply_aggregation(row(0.5, 0.2, 0.1, 0.2), EN, lids), row(0.5, 0.2, 0.3, 0.0))
    zero = row(0.7, 0.3, 0.0, 0.0)
    np.testing.assert_array_equal(apply_aggregation(zero, EN, lids), zero)


def test_prefix_examples(rng):
    p = random_lattice(rng, 6, 5)
    out = apply_prefix(p, JA, LIDS)
    np.testing.assert_array_equal(out[0], np.eye(5)[JA])
    np.testing.assert_array_equal(out[1:], p[1:])
    p[0] = np.eye(5)[JA]
    np.testing.assert_array_equal(apply_prefix(p, JA, LIDS), p)
    with pytest.raises(PromptError):
        apply_prefix(np.zeros((0, 5)), JA)


def test_soft_examples():
    # blank, en, ja, zh
    lids = [1, 2, 3]
    out = apply_soft(row(0.4, 0.2, 0.1, 0.3), {1, 2}, lids)
    np.testing.assert_allclose(out, row(0.4, 0.4, 0.2, 0.0), atol=1e-15)
    p = row(0.4, 0.2, 0.1, 0.3)
    np.testing.assert_allclose(apply_soft(p, set(lids), lids), p, atol=1e-15)


def test_soft_degenerate_denominator_spreads_evenly():
    out = apply_soft(row(0.4, 0.0, 0.0, 0.6), {1, 2}, [1, 2, 3])
    np.testing.assert_allclose(out, row(0.4, 0.3, 0.3, 0.0))
    zero = row(1.0, 0.0, 0.0, 0.0)
    np.testing.assert_array_equal(apply_soft(zero, {1, 2}, [1, 2, 3]), zero)


def test_invalid_targets():
    p = random_lattice(np.random.default_rng(0), 3, 5)
    with pytest.raises(PromptError):
        apply_replacement(p, 1, LIDS)
    with pytest.raises(PromptError):
        apply_aggregation(p, 0, LIDS)
    with pytest.raises(PromptError):
        apply_prefix(p, 1, LIDS)
    with pytest.raises(PromptError):
        apply_soft(p, set(), LIDS)
    with pytest.raises(PromptError):
        apply_soft(p, {EN, 1}, LIDS)
    with pytest.raises(PromptError):
        PromptSpec(PromptMode.SOFT)
    with pytest.raises(PromptError):
        PromptSpec(PromptMode.AGGREGATION)


def test_operators_do_not_mutate_input(rng):
    p = random_lattice(rng, 5, 5)
    before = p.copy()
    apply_replacement(p, EN, LIDS)
    apply_aggregation(p, EN, LIDS)
    apply_prefix(p, EN, LIDS)
    apply_soft(p, {EN, ZH}, LIDS)
    np.testing.assert_array_equal(p, before)


def _lattices(n=1000, seed=42):
    rng = np.random.default_rng(seed)
    return [random_lattice(rng, 1, 6, sparse=bool(i % 2)) for i in range(n)]


OPS = {
    "replacement": lambda p: apply_replacement(p, EN, LIDS),
    "aggregation": lambda p: apply_aggregation(p, EN, LIDS),
    "prefix": lambda p: apply_prefix(p, EN, LIDS),
    "soft": lambda p: apply_soft(p, {EN, ZH}, LIDS),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_simplex_preserved_and_idempotent(name):
    op = OPS[name]
    for p in _lattices():
        out = op(p)
        assert np.all(out >= 0)
        assert np.abs(out.sum(axis=-1) - 1).max() <= 1e-8
        np.testing.assert_allclose(op(out), out, rtol=0, atol=1e-15)


def test_replacement_and_prefix_are_exactly_stochastic(rng):
    p = random_lattice(rng, 50, 6, sparse=True)
    for out in (apply_replacement(p, EN, LIDS), apply_prefix(p, EN, LIDS)):
        changed = np.any(out != p, axis=1)
        assert np.all(out[changed].sum(axis=1) == 1.0)


@pytest.mark.parametrize("name", ["aggregation", "soft"])
def test_mass_conservation(name):
    op = OPS[name]
    non_lid = [0, 1, 5]
    for p in _lattices():
        out = op(p)
        np.testing.assert_array_equal(out[:, non_lid], p[:, non_lid])
        assert abs(out[:, LIDS].sum() - p[:, LIDS].sum()) <= 1e-15


def test_locality(rng):
    p = random_lattice(rng, 40, 6, sparse=True)
    changed = np.any(apply_prefix(p, ZH, LIDS) != p, axis=1)
    assert changed[1:].sum() == 0
    # rows already one-hot at the target are the only ones allowed to survive replacement
    hit = np.isin(np.argmax(p, axis=1), LIDS) & (p[:, EN] < 1.0)
    changed = np.any(apply_replacement(p, EN, LIDS) != p, axis=1)
    np.testing.assert_array_equal(changed, hit)


def test_soft_singleton_equals_aggregation():
    worst = 0.0
    for p in _lattices():
        for k in LIDS:
            worst = max(worst, np.abs(apply_soft(p, {k}, LIDS) - apply_aggregation(p, k, LIDS)).max())
    assert worst <= 1e-12


def test_aggregation_on_one_hot_target_row_is_identity():
    p = np.eye(6)[[EN, EN, 0]]
    np.testing.assert_array_equal(apply_aggregation(p, EN, LIDS), p)


def test_replacement_and_aggregation_agree_on_sparse_lattices():
    rng = np.random.default_rng(3)
    for _ in range(200):
        # near one-hot rows: one dominant entry with 0.97 mass
        idx = rng.integers(0, 6, size=12)
        p = np.full((12, 6), 0.006)
        p[np.arange(12), idx] = 0.97
        a, _ = ctc_greedy_decode(apply_replacement(p, JA, LIDS))
        b, _ = ctc_greedy_decode(apply_aggregation(p, JA, LIDS))
        assert a == b


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1), st.sampled_from(LIDS))
def test_batched_input_matches_per_lattice(T, seed, k):
    rng = np.random.default_rng(seed)
    batch = np.stack([random_lattice(rng, T, 6) for _ in range(3)])
    for op in (apply_replacement, apply_aggregation, apply_prefix):
        out = op(batch, k, LIDS)
        for b in range(3):
            np.testing.assert_array_equal(out[b], op(batch[b], k, LIDS))


def test_apply_prompt_dispatch(small_vocab, rng):
    v = small_vocab
    p = random_lattice(rng, 5, len(v))
    assert apply_prompt(p, PromptSpec.none(), v) is p
    assert apply_prompt(p, None, v) is p
    en = v.id("<en>")
    np.testing.assert_array_equal(
        apply_prompt(p, PromptSpec("aggregation", target=en), v),
        apply_aggregation(p, en, v.lid_ids),
    )
    wrapped = apply_prompt(PosteriorLattice(p), PromptSpec("prefix", target=en), v)
    assert isinstance(wrapped, PosteriorLattice) and wrapped.is_stochastic()
    with pytest.raises(PromptError):
        apply_prompt(p, PromptSpec("replacement", target=v.id("a")), v)


def test_parse_prompt(small_vocab):
    v = small_vocab
    spec = parse_prompt("soft", v, targets="<en>,<zh>")
    assert spec.targets == {v.id("<en>"), v.id("<zh>")}
    assert spec.describe(v) == "soft[<en>,<zh>]"
    assert parse_prompt("none", v).mode is PromptMode.NONE
    with pytest.raises(PromptError):
        parse_prompt("prefix", v)
    with pytest.raises(PromptError):
        parse_prompt("aggregation", v, target="a")


@pytest.mark.parametrize(
    "name, mode, target, targets",
    [
        ("replacement_en", "replacement", "<en>", None),
        ("aggregation_en", "aggregation", "<en>", None),
        ("prefix_ja", "prefix", "<ja>", None),
        ("soft_en_ja", "soft", None, "<en>,<ja>"),
    ],
)
def test_golden_files(small_vocab, name, mode, target, targets):
    p = read_lattice(GOLDEN / "input.lat")
    out = apply_prompt(p, parse_prompt(mode, small_vocab, target, targets), small_vocab)
    assert lattice_to_string(out) == (GOLDEN / f"{name}.lat").read_text()
