"""Command line entry point: ``lidprompt {gen-data,train,eval,grid,lattice-op}``.

Every subcommand takes ``--config FILE.json``; flags given on the command line
override the matching config keys (dashes become underscores).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import CorpusConfig, generate_corpus, load_corpus, save_corpus
from .ctc import read_lattice, write_lattice
from .decoding import DecodeConfig
from .harness import (
    GridSpec,
    evaluate_checkpoint,
    merge_reports,
    run_experiment_grid,
    select_utterances,
    soft_target_ids,
)
from .model import EncoderConfig, ModelWeights
from .prompting import PromptMode, apply_prompt, parse_prompt
from .training import TrainConfig, train
from .vocab import VocabSpec

class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def _merged(args: argparse.Namespace) -> dict:
    """Config file values overridden by explicitly given flags."""
    cfg = _load_config(args.config)
    for k, v in vars(args).items():
        if k in ("config", "command", "func", "verbose") or v is None:
            continue
        cfg[k] = v
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _write_json(obj, out) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    cfg = _merged(args)
    _require(cfg, "seed", "out")
    corpus_cfg = CorpusConfig.from_dict(cfg.get("corpus", cfg))
    manifest = generate_corpus(corpus_cfg, seed=int(cfg["seed"]))
    path = save_corpus(manifest, cfg["out"])
    n = sum(len(v) for v in manifest.splits.values())
    print(f"wrote {n} utterances to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    enc = dict(cfg.get("encoder", {}))
    tr = dict(cfg.get("train", {}))
    top = {k: v for k, v in cfg.items() if k not in ("encoder", "train")}
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "command", "func", "verbose")}
    top.update({k: flags.pop(k) for k in ("corpus", "out", "log") if k in flags})
    if "variant" in flags:
        tr["encoder_variant"] = flags.pop("variant")
    tr.update(flags)
    if "seed" in top:
        tr.setdefault("seed", top["seed"])
    _require(tr, "seed")
    _require(top, "corpus", "out")
    corpus = load_corpus(top["corpus"])
    enc.setdefault("feature_dim", corpus.config.feature_dim)
    W, tlog = train(corpus, corpus.vocab, EncoderConfig.from_dict(enc), TrainConfig.from_dict(tr))
    W.save(top["out"])
    print(f"trained {W.variant} for {len(tlog.epoch_losses)} epochs in {tlog.seconds:.1f}s; "
          f"final loss {tlog.epoch_losses[-1]:.4f}; saved {top['out']}")
    if top.get("log"):
        _write_json({"epoch_losses": tlog.epoch_losses, "epoch_parts": tlog.epoch_parts,
                     "seconds": tlog.seconds}, top["log"])
    return 0


def cmd_eval(args) -> int:
    cfg = _merged(args)
    _require(cfg, "checkpoint", "corpus")
    W = ModelWeights.load(cfg["checkpoint"])
    corpus = load_corpus(cfg["corpus"])
    utts = select_utterances(corpus.split(cfg.get("split", "test")), cfg.get("max_per_language"))
    mode = cfg.get("encoder_prompt", "none")
    soft = []
    if PromptMode(mode) is PromptMode.SOFT:
        targets = cfg.get("soft_targets")
        spec = GridSpec(soft_targets=tuple(targets.split(",")) if isinstance(targets, str) else targets)
        soft = soft_target_ids(corpus, spec)
    decode = DecodeConfig(beam_size=int(cfg.get("beam_size", 4)), ctc_weight=float(cfg.get("ctc_weight", 0.3)))
    metrics = evaluate_checkpoint(W, utts, decode, bool(cfg.get("decoder_prompt", False)), mode, soft)
    _write_json(metrics, cfg.get("out"))
    return 0


def cmd_grid(args) -> int:
    cfg = _merged(args)
    _require(cfg, "corpus", "out")
    grid = dict(cfg.get("grid", {}))
    for k in ("beam_size", "ctc_weight", "max_per_language", "split"):
        if k in cfg:
            grid[k] = cfg[k]
    if "rows" in cfg:
        grid["rows"] = cfg["rows"].split(",") if isinstance(cfg["rows"], str) else cfg["rows"]
    if "soft_targets" in cfg:
        st = cfg["soft_targets"]
        grid["soft_targets"] = st.split(",") if isinstance(st, str) else st
    if cfg.get("no_soft"):
        grid["soft_block"] = False
    spec = GridSpec.from_dict(grid)

    runs: dict[int, dict[str, str]] = {}
    for r in cfg.get("runs", []):
        runs.setdefault(int(r["seed"]), {}).update(r.get("checkpoints", {}))
    for item in cfg.get("checkpoint") or []:
        # SEED:VARIANT=PATH
        try:
            head, path = item.split("=", 1)
            seed, variant = head.split(":", 1)
            runs.setdefault(int(seed), {})[variant] = path
        except ValueError:
            raise UsageError(f"--checkpoint expects SEED:VARIANT=PATH, got {item!r}") from None
    if not runs:
        raise UsageError("no checkpoints given (use --checkpoint or a 'runs' list in the config)")
    corpus = load_corpus(cfg["corpus"])
    report = merge_reports([run_experiment_grid(corpus, spec, runs[s], seed=s) for s in sorted(runs)])
    report.write(cfg["out"])
    sys.stdout.write(report.to_text())
    return 0


def _vocab_for_lattice(cfg: dict) -> VocabSpec:
    if cfg.get("vocab"):
        d = _load_config(cfg["vocab"])
        return VocabSpec.from_dict(d.get("vocab", d))
    if cfg.get("checkpoint"):
        return ModelWeights.load(cfg["checkpoint"]).vocab
    if cfg.get("corpus"):
        return load_corpus(cfg["corpus"]).vocab
    raise UsageError("lattice-op needs --vocab, --checkpoint or --corpus to know the LID tokens")


def cmd_lattice_op(args) -> int:
    cfg = _merged(args)
    _require(cfg, "mode")
    vocab = _vocab_for_lattice(cfg)
    spec = parse_prompt(cfg["mode"], vocab, cfg.get("target"), cfg.get("targets"))
    src = cfg.get("input", "-")
    probs = read_lattice(sys.stdin if src == "-" else src)
    if probs.shape[1] != len(vocab):
        raise UsageError(f"lattice has {probs.shape[1]} columns but the vocabulary has {len(vocab)} tokens")
    out = apply_prompt(probs, spec, vocab)
    dst = cfg.get("output", "-")
    write_lattice(out, sys.stdout if dst == "-" else dst)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lidprompt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, argument_default=None)
        sp.add_argument("--config", help="JSON config file; flags override its keys")
        sp.set_defaults(func=func)
        return sp

    g = add("gen-data", cmd_gen_data, "generate a synthetic multilingual corpus")
    g.add_argument("--seed", type=int, help="corpus seed (required here or in the config)")
    g.add_argument("--out", help="output directory")

    t = add("train", cmd_train, "train a model on a corpus")
    t.add_argument("--corpus", help="corpus directory")
    t.add_argument("--out", help="checkpoint file to write")
    t.add_argument("--seed", type=int, help="training seed (required here or in the config)")
    t.add_argument("--variant", choices=["plain", "interctc", "scctc"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--dtype", choices=["float32", "float64"])
    t.add_argument("--sampling-temperature", type=float)
    t.add_argument("--log", help="write per-epoch losses as JSON")

    e = add("eval", cmd_eval, "decode a split and report CER and LID accuracy")
    e.add_argument("--checkpoint")
    e.add_argument("--corpus")
    e.add_argument("--split", choices=["train", "dev", "test"])
    e.add_argument("--beam-size", type=int)
    e.add_argument("--ctc-weight", type=float, help="joint decoding weight; 0 disables the CTC scorer")
    e.add_argument("--decoder-prompt", action="store_true", default=None, help="force the true LID as first token")
    e.add_argument("--encoder-prompt", choices=[m.value for m in PromptMode])
    e.add_argument("--soft-targets", help="comma separated LID tokens for soft prompting")
    e.add_argument("--max-per-language", type=int)
    e.add_argument("--out", help="metrics JSON file (default: stdout)")

    r = add("grid", cmd_grid, "evaluate the experiment grid and write a report")
    r.add_argument("--corpus")
    r.add_argument("--checkpoint", action="append", metavar="SEED:VARIANT=PATH")
    r.add_argument("--rows", help="comma separated row ids")
    r.add_argument("--beam-size", type=int)
    r.add_argument("--ctc-weight", type=float)
    r.add_argument("--max-per-language", type=int)
    r.add_argument("--soft-targets")
    r.add_argument("--no-soft", action="store_true", default=None, help="skip the soft prompting block")
    r.add_argument("--out", help="report directory")

    lo = add("lattice-op", cmd_lattice_op, "apply an encoder prompt to a lattice dump")
    lo.add_argument("--mode", choices=[m.value for m in PromptMode if m is not PromptMode.NONE])
    lo.add_argument("--target", help="LID token, e.g. <en>")
    lo.add_argument("--targets", help="comma separated LID tokens (soft mode)")
    lo.add_argument("--vocab", help="JSON vocabulary file")
    lo.add_argument("--checkpoint", help="take the vocabulary from a checkpoint")
    lo.add_argument("--corpus", help="take the vocabulary from a corpus directory")
    lo.add_argument("--input", help="lattice dump to read (default: stdin)")
    lo.add_argument("--output", help="where to write the result (default: stdout)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (ValueError, OSError) as e:
        print(f"lidprompt {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
