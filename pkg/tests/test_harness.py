from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidprompt.ctc import ctc_greedy_decode
from lidprompt.decoding import lid_from_ctc
from lidprompt.harness import (
    ROWS_BY_ID,
    GridConfigError,
    GridRow,
    GridSpec,
    compute_cer,
    compute_lid_accuracy,
    corpus_cer,
    evaluate_checkpoint,
    levenshtein,
    merge_reports,
    run_experiment_grid,
)
from lidprompt.model import ModelWeights, encode

seqs = st.lists(st.integers(0, 3), max_size=6)


def recursive_edit_distance(a, b):
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def test_cer_worked_examples():
    assert compute_cer([1, 9, 3], [1, 2, 3]) == (1, 3)
    assert corpus_cer([compute_cer([1, 9, 3], [1, 2, 3])]) == pytest.approx(100 / 3)
    assert compute_cer([], [1, 2, 3]) == (3, 3)
    assert corpus_cer([compute_cer([], [1, 2, 3])]) == 100.0
    # an empty reference scores zero only for an empty hypothesis
    assert corpus_cer([compute_cer([], [])]) == 0.0
    assert corpus_cer([compute_cer([4], [])]) == float("inf")
    # language tokens never count as errors
    assert compute_cer([7, 1, 2], [8, 1, 2], lid_ids=[7, 8]) == (0, 2)
    # pooled, not averaged per utterance
    assert corpus_cer([(1, 1), (0, 9)]) == 10.0


@settings(max_examples=300, deadline=None)
@given(seqs, seqs, seqs)
def test_levenshtein_is_a_metric(a, b, c):
    d = levenshtein(a, b)
    assert d == recursive_edit_distance(tuple(a), tuple(b))
    assert d == levenshtein(b, a)
    assert (d == 0) == (a == b)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))
    assert levenshtein(a, c) <= d + levenshtein(b, c)


def test_lid_accuracy():
    acc = compute_lid_accuracy([3, None, 4, 4], [3, 3, 4, 3], ["high", "high", "low", "low"])
    assert acc == {"high": 50.0, "low": 50.0}
    with pytest.raises(ValueError):
        compute_lid_accuracy([3], [3, 4], ["high", "high"])


def test_encoder_prompting_on_non_scctc_rows_is_rejected():
    with pytest.raises(GridConfigError):
        GridRow("x", "interctc", True, True, "aggregation")
    with pytest.raises(GridConfigError):
        GridSpec(rows=("a", "zz"))
    spec = GridSpec.from_dict({"rows": ["d", "h"], "beam_size": 2, "ignored": True})
    assert [r.row_id for r in spec.table_rows()] == ["d", "h"]


def test_row_table_matches_the_design():
    assert ROWS_BY_ID["a"] == GridRow("a", "plain", False, False)
    assert ROWS_BY_ID["j"] == GridRow("j", "scctc", True, True, "aggregation")
    assert ROWS_BY_ID["l"] == GridRow("l", "scctc", True, False, "soft")


def test_training_beats_an_untrained_model(trained_toy):
    corpus, W, _ = trained_toy
    test = corpus.split("test")[:40]
    fresh = ModelWeights.initialize(W.config, corpus.vocab, seed=0)

    def cer(weights):
        pairs = []
        for u in test:
            hyp, _ = ctc_greedy_decode(encode(u.features, weights).final_ctc_log_probs)
            pairs.append(compute_cer(hyp, u.text, corpus.vocab.lid_ids))
        return corpus_cer(pairs)

    assert cer(W) < 0.75 * cer(fresh)
    lids = [lid_from_ctc(encode(u.features, W).final_ctc_log_probs, corpus.vocab) for u in test]
    assert np.mean([p == u.language for p, u in zip(lids, test)]) > 0.5


def test_grid_marks_missing_checkpoints_absent(trained_toy, tmp_path):
    corpus, W, _ = trained_toy
    spec = GridSpec(rows=("b", "d", "h", "j"), max_per_language=5, beam_size=2,
                    soft_targets=tuple(corpus.vocab.tokens[k] for k in corpus.lid_ids))
    report = run_experiment_grid(corpus, spec, {"scctc": W, "plain": tmp_path / "missing.ckpt"}, seed=0)
    b = report.cell("b")
    assert b.absent and "plain" in b.reason
    d = report.cell("d")
    assert not d.absent and d.num_utterances == 10 and set(d.tier_cer) == {"high"}
    assert not report.cell("l", block="soft").absent
    text = report.to_text()
    assert "absent" in text and "(j)" in text


def test_report_is_byte_identical_across_runs(trained_toy, tmp_path):
    corpus, W, _ = trained_toy
    spec = GridSpec(rows=("d", "j"), max_per_language=4, beam_size=2, soft_block=False)
    for name in ("a", "b"):
        rep = merge_reports([run_experiment_grid(corpus, spec, {"scctc": W}, seed=s) for s in (0, 1)])
        rep.write(tmp_path / name)
    for f in ("report.txt", "report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert b'"seeds": [\n    0,\n    1\n  ]' in (tmp_path / "a" / "report.json").read_bytes()


def test_seed_average(trained_toy):
    corpus, W, _ = trained_toy
    spec = GridSpec(rows=("d",), max_per_language=3, beam_size=1, soft_block=False)
    one = run_experiment_grid(corpus, spec, {"scctc": W})
    merged = merge_reports([one, one])
    assert merged.cell("d").tier_cer == one.cell("d").tier_cer
    with pytest.raises(ValueError):
        merge_reports([])


def test_evaluate_checkpoint_summary(trained_toy):
    corpus, W, _ = trained_toy
    out = evaluate_checkpoint(W, corpus.split("test")[:6], decoder_prompt=True, encoder_prompt="replacement")
    assert out["num_utterances"] == 6
    assert np.isfinite(out["avg_cer"]) and out["lid_accuracy"]["high"] == 100.0
