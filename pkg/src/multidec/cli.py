"""Command line entry point: ``multidec {gen-data,train,train-lm,decode,eval}``.

Exit codes: 0 success, 2 configuration error, 3 data/file error,
4 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config, data, metrics
from .config import ConfigError
from .data import DatasetFormatError, TaskSpec
from .lm import LmConfig, LmTrainConfig, load_lm, lm_train, save_lm
from .models import CheckpointError, ModelConfig, Seq2SeqModel, config_for, load_checkpoint, save_checkpoint
from .search import DecodeConfig, decode_corpus
from .train import DivergenceError, TrainConfig, train_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

log = logging.getLogger("multidec")


class DataError(RuntimeError):
    pass


@dataclass
class DataConfig:
    """Split sizes and seed; lives in the ``[task]`` section next to TaskSpec fields."""

    seed: int = 0
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    shift_offset: int = 1000


def _split_task(mapping: dict) -> tuple[dict, dict]:
    names = {f.name for f in dataclasses.fields(DataConfig)}
    return ({k: v for k, v in mapping.items() if k not in names},
            {k: v for k, v in mapping.items() if k in names})


def load_config(path) -> dict:
    """Parse a config file into typed objects (missing sections get defaults)."""
    raw = config.read_sections(path) if path else {}
    task, data_part = _split_task(raw.get("task", {}))
    return {
        "task": config.from_mapping(TaskSpec, task, "task"),
        "data": config.from_mapping(DataConfig, data_part, "task"),
        "model": raw.get("model", {}),
        "train": config.from_mapping(TrainConfig, raw.get("train", {}), "train"),
        "decode": config.from_mapping(DecodeConfig, raw.get("decode", {}), "decode"),
        "lm": raw.get("lm", {}),
    }


def _config_comment(sections: dict) -> str:
    """Config as ``# [section] key=value`` comment lines."""
    lines = []
    for name, obj in sections.items():
        for line in config.to_text(obj).splitlines():
            lines.append(f"# [{name}] {line}")
    return "\n".join(lines) + "\n"


def _read_split(path):
    try:
        return data.read_dataset(path)
    except FileNotFoundError:
        raise DataError(f"dataset file not found: {path}") from None


def _override(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return obj
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# --- gen-data -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    dcfg = _override(cfg["data"], seed=args.seed)
    spec = cfg["task"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = data.gen_splits(spec, dcfg.seed, dcfg.n_train, dcfg.n_dev, dcfg.n_test,
                             domain_shift=args.domain_shift, shift_offset=dcfg.shift_offset)
    shifted = spec.shifted(dcfg.shift_offset)
    for name, examples in splits.items():
        split_spec = shifted if name in ("test_shift", "lm_shift") else spec
        data.write_dataset(out / f"{name}.mdds", examples, split_spec)
        frames = sum(len(e.x) for e in examples)
        lens = [len(e.y_b) for e in examples]
        print(f"{name}\tutterances={len(examples)}\tframes={frames}\t"
              f"intermediate_len={np.mean(lens):.2f}\tvocab_b={split_spec.vocab_b}\tvocab_c={split_spec.vocab_c}")
    (out / "config.ini").write_text("[task]\n" + config.to_text(spec) + config.to_text(dcfg))
    return EXIT_OK


# --- train --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    spec, train_set = _read_split(Path(args.data) / "train.mdds")
    _, dev_set = _read_split(Path(args.data) / "dev.mdds")
    tcfg = _override(cfg["train"], epochs=args.epochs, seed=args.seed)
    model_map = dict(cfg["model"])
    if args.arch:
        model_map["arch"] = args.arch
    model_map.setdefault("seed", str(tcfg.seed))
    base = config.from_mapping(ModelConfig, model_map, "model")
    try:
        mcfg = config_for(spec, **{f.name: getattr(base, f.name) for f in dataclasses.fields(base)
                                   if f.name not in ("feat_dim", "vocab_b", "vocab_c")})
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from None
    if args.limit:
        train_set = train_set[: args.limit]
        dev_set = dev_set[: args.limit]
    model = Seq2SeqModel(mcfg)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log.tsv")
    with open(log_path, "w") as fh:
        fh.write(_config_comment({"model": mcfg, "train": tcfg}))

        def emit(line):
            fh.write(line + "\n")
            fh.flush()
            log.info(line)

        result = train_model(model, train_set, dev_set, tcfg, log=emit)
    save_checkpoint(model, args.out)
    print(f"best_epoch={result.best_epoch}\tcheckpoint={args.out}\tlog={log_path}")
    return EXIT_OK


def cmd_train_lm(args) -> int:
    cfg = load_config(args.config)
    spec, examples = _read_split(Path(args.data) / f"{args.split}.mdds")
    held = None
    if args.held_out:
        _, held_ex = _read_split(Path(args.data) / f"{args.held_out}.mdds")
        held = [e.y_b for e in held_ex]
    lm_map = dict(cfg["lm"])
    train_keys = {f.name for f in dataclasses.fields(LmTrainConfig)}
    tmap = {k: v for k, v in lm_map.items() if k in train_keys}
    mmap = {k: v for k, v in lm_map.items() if k not in train_keys}
    mmap["vocab"] = str(spec.vocab_b)
    lcfg = config.from_mapping(LmConfig, mmap, "lm")
    ltcfg = _override(config.from_mapping(LmTrainConfig, tmap, "lm"), epochs=args.epochs, seed=args.seed)
    model, curve = lm_train([e.y_b for e in examples], lcfg, ltcfg, held,
                            log=lambda ep, ppl: log.info("lm epoch %d perplexity %.4f", ep, ppl))
    save_lm(model, args.out)
    for ep, ppl in enumerate(curve, 1):
        print(f"{ep}\t{ppl:.6g}")
    return EXIT_OK


# --- decode -------------------------------------------------------------------------

HYP_COLUMNS = ("uid", "y_b", "y_c", "asr_score", "st_score", "score")


def _toks(seq) -> str:
    return " ".join(str(t) for t in seq)


def write_hypotheses(path, results, uids, header: str) -> None:
    lines = [header.rstrip("\n"), "\t".join(HYP_COLUMNS)]
    for uid, r in sorted(zip(uids, results), key=lambda p: p[0]):
        lines.append("\t".join([uid, _toks(r.y_b), _toks(r.y_c), repr(float(r.asr_score)), repr(float(r.st_score)), repr(float(r.score))]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_hypotheses(path) -> dict:
    """uid -> dict of the hypothesis columns."""
    rows = {}
    head = None
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if head is None:
            head = parts
            if tuple(head) != HYP_COLUMNS:
                raise DataError(f"{path}: unexpected hypothesis header {head}")
            continue
        if len(parts) != len(head):
            raise DataError(f"{path}: malformed row {line!r}")
        row = dict(zip(head, parts))
        row["y_b"] = [int(t) for t in row["y_b"].split()]
        row["y_c"] = [int(t) for t in row["y_c"].split()]
        for k in ("asr_score", "st_score", "score"):
            row[k] = float(row[k])
        rows[row["uid"]] = row
    return rows


def cmd_decode(args) -> int:
    cfg = load_config(args.config)
    dcfg = _override(cfg["decode"], beam_asr=args.beam_asr, beam_st=args.beam_st, ctc_weight=args.ctc_weight,
                     lm_weight=args.lm_weight, length_penalty_asr=args.length_penalty_asr,
                     length_penalty_st=args.length_penalty_st, nbest=args.nbest, workers=args.workers,
                     oracle=True if args.oracle else None)
    if dcfg.lm_weight > 0 and not args.lm:
        raise ConfigError("lm_weight > 0 requests LM fusion but no --lm checkpoint was given")
    if args.lm and dcfg.lm_weight == 0:
        raise ConfigError("--lm given but lm_weight is 0; set --lm-weight")
    try:
        model = load_checkpoint(args.checkpoint, expect_arch=args.arch)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.checkpoint}") from None
    if dcfg.oracle and not model.is_multidec:
        raise ConfigError("--oracle needs a multidec or multidec_sa checkpoint")
    lm = load_lm(args.lm) if args.lm else None
    spec, examples = _read_split(args.data)
    if spec.vocab_b != model.config.vocab_b or spec.vocab_c != model.config.vocab_c:
        raise DataError(f"dataset vocabularies ({spec.vocab_b}, {spec.vocab_c}) do not match the checkpoint "
                        f"({model.config.vocab_b}, {model.config.vocab_c})")
    results = decode_corpus(model, examples, dcfg, lm)
    header = _config_comment({"model": model.config, "decode": dcfg})
    header += f"# checkpoint={Path(args.checkpoint).name} lm={Path(args.lm).name if args.lm else 'none'}\n"
    write_hypotheses(args.out, results, [e.uid for e in examples], header)
    trunc = sum(r.diagnostics["asr_truncated"] or r.diagnostics["st_truncated"] for r in results)
    if trunc:
        log.warning("%d utterance(s) hit the maximum decoding length without eos", trunc)
    print(f"decoded={len(results)}\tout={args.out}")
    return EXIT_OK


# --- eval ---------------------------------------------------------------------------


def evaluate(hyps: dict, examples) -> dict:
    """Report blocks: overall BLEU, intermediate WER with S/I/D, WER-bucketed BLEU."""
    ref_ids = [e.uid for e in examples]
    missing = sorted(set(ref_ids) - set(hyps))
    extra = sorted(set(hyps) - set(ref_ids))
    if missing or extra:
        raise DataError(f"utterance ids differ: missing from hypotheses {missing[:10]}, "
                        f"not in dataset {extra[:10]}")
    refs_b = [e.y_b for e in examples]
    refs_c = [e.y_c for e in examples]
    hyp_b = [hyps[u]["y_b"] for u in ref_ids]
    hyp_c = [hyps[u]["y_c"] for u in ref_ids]
    w = metrics.corpus_wer(refs_b, hyp_b)
    report = {
        "overall": {"utterances": len(examples), "bleu": metrics.corpus_bleu(refs_c, hyp_c)},
        "intermediate_wer": {"wer": w["wer"], "substitutions": w["sub"], "insertions": w["ins"],
                             "deletions": w["del"], "ref_tokens": w["ref_tokens"]},
    }
    per_utt = [metrics.wer(r, h) for r, h in zip(refs_b, hyp_b)]
    buckets = metrics.bucketed_report(per_utt, list(zip(refs_c, hyp_c)))
    for name, _, _ in metrics.BUCKETS:
        if name in buckets:
            report[f"bucket {name}"] = buckets[name]
    return report


def cmd_eval(args) -> int:
    _, examples = _read_split(args.data)
    try:
        hyps = read_hypotheses(args.hyps)
    except FileNotFoundError:
        raise DataError(f"hypothesis file not found: {args.hyps}") from None
    report = evaluate(hyps, examples)
    source = [l[2:] for l in Path(args.hyps).read_text().splitlines() if l.startswith("# ")]
    text = metrics.format_report(report)
    if source:
        text += "\n".join(f"# {l}" for l in source) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multidec", description="Synthetic two-stage sequence transduction toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train/dev/test dataset files")
    g.add_argument("--config")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--domain-shift", action="store_true",
                   help="also write test_shift and lm_shift splits from a different Markov chain")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on DATA/train.mdds")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="directory written by gen-data")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--arch", choices=("baseline", "multidec", "multidec_sa"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--limit", type=int, help="use only the first N train/dev utterances")
    t.add_argument("--log", help="training log path (default: <out>.log.tsv)")
    t.set_defaults(func=cmd_train)

    l = sub.add_parser("train-lm", help="train an intermediate-alphabet LM")
    l.add_argument("--config")
    l.add_argument("--data", required=True)
    l.add_argument("--split", default="train", help="split whose intermediate sequences form the corpus")
    l.add_argument("--held-out", help="split used for perplexity (default: training corpus)")
    l.add_argument("--out", required=True)
    l.add_argument("--epochs", type=int)
    l.add_argument("--seed", type=int)
    l.set_defaults(func=cmd_train_lm)

    d = sub.add_parser("decode", help="decode a dataset file")
    d.add_argument("--config")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True, help="dataset file")
    d.add_argument("--out", required=True, help="hypotheses file")
    d.add_argument("--arch", choices=("baseline", "multidec", "multidec_sa"), help="require this architecture")
    d.add_argument("--beam-asr", type=int)
    d.add_argument("--beam-st", type=int)
    d.add_argument("--ctc-weight", type=float)
    d.add_argument("--lm-weight", type=float)
    d.add_argument("--length-penalty-asr", type=float)
    d.add_argument("--length-penalty-st", type=float)
    d.add_argument("--lm", help="LM checkpoint for shallow fusion")
    d.add_argument("--oracle", action="store_true", help="teacher-force true intermediates (no stage-one search)")
    d.add_argument("--nbest", type=int)
    d.add_argument("--workers", type=int)
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="score a hypotheses file against a dataset")
    e.add_argument("--hyps", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="also write the report here")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
