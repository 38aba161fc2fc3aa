"""Metrics, the experiment grid and its report."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import TIERS, CorpusManifest, Utterance
from .decoding import DecodeConfig, joint_beam_search, lid_from_ctc
from .model import CheckpointError, ModelWeights, encode_for_variant
from .prompting import PromptMode, PromptSpec
from .vocab import VocabSpec

log = logging.getLogger(__name__)


class GridConfigError(ValueError):
    pass


# ------------------------------------------------------------------ metrics


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance between two token sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def compute_cer(hyp: Sequence[int], ref: Sequence[int], lid_ids: Iterable[int] = ()) -> tuple[int, int]:
    """(edits, reference length) after dropping language-ID tokens from both sides."""
    lids = set(lid_ids)
    h = [k for k in hyp if k not in lids]
    r = [k for k in ref if k not in lids]
    return levenshtein(h, r), len(r)


def corpus_cer(pairs: Iterable[tuple[int, int]]) -> float:
    """Pooled CER in percent: total edits over total reference length."""
    edits = ref = 0
    for e, n in pairs:
        edits += e
        ref += n
    if ref == 0:
        return 0.0 if edits == 0 else float("inf")
    return 100.0 * edits / ref


def compute_lid_accuracy(predictions: Sequence[int | None], references: Sequence[int],
                         tiers: Sequence[str]) -> dict[str, float]:
    """Exact-match LID accuracy (%) per tier; a missing prediction counts as wrong."""
    hits: dict[str, list[int]] = {}
    for p, r, t in zip(predictions, references, tiers, strict=True):
        hits.setdefault(t, []).append(int(p is not None and p == r))
    return {t: 100.0 * float(np.mean(v)) for t, v in hits.items()}


# ------------------------------------------------------------------ the grid


@dataclass(frozen=True)
class GridRow:
    row_id: str
    variant: str
    joint: bool
    decoder_prompt: bool
    encoder_prompt: str = "none"

    def __post_init__(self):
        mode = PromptMode(self.encoder_prompt)
        if mode is not PromptMode.NONE and self.variant != "scctc":
            raise GridConfigError(
                f"row {self.row_id}: encoder prompting needs the scctc variant, got {self.variant}"
            )


GRID_ROWS = (
    GridRow("a", "plain", False, False),
    GridRow("b", "plain", True, False),
    GridRow("c", "interctc", True, False),
    GridRow("d", "scctc", True, False),
    GridRow("e", "plain", False, True),
    GridRow("f", "plain", True, True),
    GridRow("g", "interctc", True, True),
    GridRow("h", "scctc", True, True),
    GridRow("i", "scctc", True, True, "replacement"),
    GridRow("j", "scctc", True, True, "aggregation"),
    GridRow("k", "scctc", True, True, "prefix"),
)
SOFT_ROWS = (
    GridRow("d", "scctc", True, False),
    GridRow("l", "scctc", True, False, "soft"),
)
ROWS_BY_ID = {r.row_id: r for r in GRID_ROWS} | {"l": SOFT_ROWS[1]}


@dataclass(frozen=True)
class GridSpec:
    rows: tuple[str, ...] = tuple(r.row_id for r in GRID_ROWS)
    soft_targets: tuple[str, ...] | None = None  # LID tokens; None: the corpus's confusable pairs
    soft_block: bool = True
    beam_size: int = 4
    ctc_weight: float = 0.3
    split: str = "test"
    max_per_language: int | None = None

    def __post_init__(self):
        unknown = [r for r in self.rows if r not in ROWS_BY_ID]
        if unknown:
            raise GridConfigError(f"unknown grid rows {unknown}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridSpec":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for key in ("rows", "soft_targets"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def table_rows(self) -> list[GridRow]:
        return [ROWS_BY_ID[r] for r in self.rows]


@dataclass
class CellResult:
    row_id: str
    block: str  # "main" or "soft"
    absent: bool = False
    reason: str = ""
    tier_cer: dict[str, float] = field(default_factory=dict)
    language_cer: dict[str, float] = field(default_factory=dict)
    avg_cer: float = float("nan")
    lid_accuracy: dict[str, float] = field(default_factory=dict)
    num_utterances: int = 0


def soft_target_ids(corpus: CorpusManifest, spec: GridSpec) -> list[int]:
    vocab = corpus.vocab
    if spec.soft_targets is not None:
        ids = vocab.ids(list(spec.soft_targets))
        bad = [t for t, i in zip(spec.soft_targets, ids) if i not in vocab.lid_ids]
        if bad:
            raise GridConfigError(f"soft targets {bad} are not language-ID tokens")
        return sorted(ids)
    pairs = corpus.confusable_pairs()
    if not pairs:
        raise GridConfigError("corpus has no confusable pair; set soft_targets explicitly")
    return sorted({k for a, b in pairs for k in (a, b)})


def select_utterances(utts: Sequence[Utterance], per_language: int | None) -> list[Utterance]:
    if per_language is None:
        return list(utts)
    seen: dict[int, int] = {}
    out = []
    for u in utts:
        if seen.get(u.language, 0) < per_language:
            out.append(u)
            seen[u.language] = seen.get(u.language, 0) + 1
    return out


def evaluate_cell(
    weights: ModelWeights,
    utts: Sequence[Utterance],
    row: GridRow,
    spec: GridSpec,
    soft_targets: Sequence[int] = (),
    block: str = "main",
) -> CellResult:
    """Decode every utterance under one grid configuration."""
    if weights.variant != row.variant:
        raise GridConfigError(f"row {row.row_id} needs a {row.variant} model, got {weights.variant}")
    vocab = weights.vocab
    lam = spec.ctc_weight if row.joint else 0.0
    mode = PromptMode(row.encoder_prompt)
    pairs_by_tier: dict[str, list] = {}
    pairs_by_lang: dict[str, list] = {}
    preds, refs, tiers = [], [], []
    for u in utts:
        if mode is PromptMode.SOFT:
            prompt = PromptSpec(mode, targets=frozenset(soft_targets))
        elif mode is PromptMode.NONE:
            prompt = None
        else:
            prompt = PromptSpec(mode, target=u.language)
        cfg = DecodeConfig(
            beam_size=spec.beam_size,
            ctc_weight=lam,
            decoder_prompt=u.language if row.decoder_prompt else None,
            encoder_prompt=prompt,
        )
        best, lid = joint_beam_search(u.features, weights, cfg)
        pair = compute_cer(best.output, u.text, vocab.lid_ids)
        pairs_by_tier.setdefault(u.tier, []).append(pair)
        pairs_by_lang.setdefault(vocab.tokens[u.language], []).append(pair)
        preds.append(lid)
        refs.append(u.language)
        tiers.append(u.tier)
    lang_cer = {k: corpus_cer(v) for k, v in sorted(pairs_by_lang.items())}
    return CellResult(
        row_id=row.row_id,
        block=block,
        tier_cer={t: corpus_cer(pairs_by_tier[t]) for t in TIERS if t in pairs_by_tier},
        language_cer=lang_cer,
        avg_cer=float(np.mean(list(lang_cer.values()))) if lang_cer else float("nan"),
        lid_accuracy={t: v for t, v in sorted(compute_lid_accuracy(preds, refs, tiers).items(), key=lambda kv: TIERS.index(kv[0]))},
        num_utterances=len(utts),
    )


def ctc_lid_accuracy(weights: ModelWeights, utts: Sequence[Utterance]) -> dict[str, float]:
    """LID accuracy per tier from greedy decoding of the final CTC head."""
    preds = [lid_from_ctc(encode_for_variant(u.features, weights).final_ctc_log_probs, weights.vocab) for u in utts]
    acc = compute_lid_accuracy(preds, [u.language for u in utts], [u.tier for u in utts])
    return {t: acc[t] for t in TIERS if t in acc}


def _load(checkpoint) -> ModelWeights | None:
    if checkpoint is None or isinstance(checkpoint, ModelWeights):
        return checkpoint
    try:
        return ModelWeights.load(checkpoint)
    except (OSError, CheckpointError) as e:
        log.warning("checkpoint %s unavailable: %s", checkpoint, e)
        return None


@dataclass
class ExperimentReport:
    """Cells for one or more seeds, plus seed-averaged values."""

    seeds: list[int]
    runs: list[list[CellResult]]
    soft_targets: list[str] = field(default_factory=list)

    def averaged(self) -> list[CellResult]:
        out = []
        for cells in zip(*self.runs):
            first = cells[0]
            present = [c for c in cells if not c.absent]
            if not present:
                out.append(CellResult(first.row_id, first.block, absent=True, reason=first.reason))
                continue

            def mean_map(attr):
                keys = getattr(present[0], attr).keys()
                return {k: float(np.mean([getattr(c, attr)[k] for c in present])) for k in keys}

            out.append(CellResult(
                row_id=first.row_id,
                block=first.block,
                tier_cer=mean_map("tier_cer"),
                language_cer=mean_map("language_cer"),
                avg_cer=float(np.mean([c.avg_cer for c in present])),
                lid_accuracy=mean_map("lid_accuracy"),
                num_utterances=first.num_utterances,
            ))
        return out

    def cell(self, row_id: str, block: str = "main", averaged: bool = True) -> CellResult:
        cells = self.averaged() if averaged else self.runs[0]
        for c in cells:
            if c.row_id == row_id and c.block == block:
                return c
        raise KeyError((row_id, block))

    # ---------------------------------------------------------------- output

    def to_dict(self) -> dict:
        def clean(c: CellResult) -> dict:
            d = asdict(c)
            for k, v in list(d.items()):
                if isinstance(v, float):
                    d[k] = None if np.isnan(v) else round(v, 6)
                elif isinstance(v, dict):
                    d[k] = {kk: round(vv, 6) for kk, vv in v.items()}
            return d

        return {
            "seeds": list(self.seeds),
            "soft_targets": list(self.soft_targets),
            "runs": [[clean(c) for c in run] for run in self.runs],
            "averaged": [clean(c) for c in self.averaged()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        cells = self.averaged()
        tiers = [t for t in TIERS if any(t in c.tier_cer for c in cells)]
        lines = [f"CER (%) averaged over seeds {', '.join(map(str, self.seeds))}", ""]
        header = f"{'row':<4}{'encoder':<10}{'joint':<7}{'dec':<5}{'enc prompt':<13}" + "".join(
            f"{t:>8}" for t in tiers) + f"{'avg':>8}"
        for block, title in (("main", "Prompting grid"), ("soft", f"Soft prompting over {', '.join(self.soft_targets)}")):
            rows = [c for c in cells if c.block == block]
            if not rows:
                continue
            head = header
            if block == "soft":
                present = next((c for c in rows if not c.absent), None)
                langs = list(present.language_cer) if present else []
                head = f"{'row':<4}{'encoder':<10}{'joint':<7}{'dec':<5}{'enc prompt':<13}" + "".join(
                    f"{k:>8}" for k in langs) + f"{'avg':>8}"
            lines += [title, head, "-" * len(head)]
            for c in rows:
                r = ROWS_BY_ID[c.row_id]
                lead = f"({c.row_id}) {r.variant:<10}{'yes' if r.joint else '-':<7}{'yes' if r.decoder_prompt else '-':<5}{r.encoder_prompt:<13}"
                if c.absent:
                    lines.append(lead + "  absent: " + c.reason)
                    continue
                if block == "soft":
                    vals = "".join(f"{c.language_cer[k]:>8.1f}" for k in c.language_cer)
                    lines.append(lead + vals + f"{c.avg_cer:>8.1f}")
                else:
                    vals = "".join(f"{c.tier_cer[t]:>8.1f}" if t in c.tier_cer else f"{'':>8}" for t in tiers)
                    lines.append(lead + vals + f"{c.avg_cer:>8.1f}")
            lines.append("")
        lines += ["LID accuracy (%)", f"{'row':<6}" + "".join(f"{t:>8}" for t in tiers)]
        for c in cells:
            if c.block == "main" and not c.absent and not ROWS_BY_ID[c.row_id].decoder_prompt:
                lines.append(f"({c.row_id}){'':<3}" + "".join(f"{c.lid_accuracy.get(t, float('nan')):>8.1f}" for t in tiers))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.to_text())
        (out / "report.json").write_text(self.to_json())


def run_experiment_grid(
    corpus: CorpusManifest,
    spec: GridSpec,
    checkpoints: Mapping[str, ModelWeights | str | Path | None],
    seed: int = 0,
) -> ExperimentReport:
    """Evaluate every configured cell for one seed's checkpoints (variant -> weights or path)."""
    utts = select_utterances(corpus.split(spec.split), spec.max_per_language)
    models = {v: _load(checkpoints.get(v)) for v in ("plain", "interctc", "scctc")}
    cells: list[CellResult] = []
    for row in spec.table_rows():
        W = models[row.variant]
        if W is None:
            cells.append(CellResult(row.row_id, "main", absent=True, reason=f"no {row.variant} checkpoint"))
            continue
        log.info("grid cell (%s)", row.row_id)
        cells.append(evaluate_cell(W, utts, row, spec))
    soft_names: list[str] = []
    if spec.soft_block:
        targets = soft_target_ids(corpus, spec)
        soft_names = [corpus.vocab.tokens[k] for k in targets]
        subset = [u for u in utts if u.language in targets]
        for row in SOFT_ROWS:
            W = models[row.variant]
            if W is None:
                cells.append(CellResult(row.row_id, "soft", absent=True, reason=f"no {row.variant} checkpoint"))
                continue
            log.info("soft cell (%s)", row.row_id)
            cells.append(evaluate_cell(W, subset, row, spec, targets, block="soft"))
    return ExperimentReport([seed], [cells], soft_names)


def merge_reports(reports: Sequence[ExperimentReport]) -> ExperimentReport:
    if not reports:
        raise ValueError("nothing to merge")
    return ExperimentReport(
        [s for r in reports for s in r.seeds],
        [run for r in reports for run in r.runs],
        reports[0].soft_targets,
    )


def evaluate_checkpoint(
    weights: ModelWeights,
    utts: Sequence[Utterance],
    decode: DecodeConfig | None = None,
    decoder_prompt: bool = False,
    encoder_prompt: str = "none",
    soft_targets: Sequence[int] = (),
) -> dict:
    """Per-tier CER and LID accuracy for one checkpoint under one decode setup (the ``eval`` command)."""
    decode = decode or DecodeConfig()
    row = GridRow("eval", weights.variant, decode.ctc_weight > 0, decoder_prompt, encoder_prompt)
    spec = GridSpec(beam_size=decode.beam_size, ctc_weight=decode.ctc_weight)
    cell = evaluate_cell(weights, utts, row, spec, soft_targets)
    return {
        "tier_cer": cell.tier_cer,
        "language_cer": cell.language_cer,
        "avg_cer": cell.avg_cer,
        "lid_accuracy": cell.lid_accuracy,
        "num_utterances": cell.num_utterances,
    }
