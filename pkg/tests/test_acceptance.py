"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Trained models, LMs and decode outputs are cached under ``.acceptance_cache``
(override with MULTIDEC_ACCEPTANCE_CACHE). Models are keyed by architecture,
seed, noise and epochs; decodes also by a fingerprint of the inference code.
Delete the directory to recompute everything from scratch (several CPU hours).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import subprocess
import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from multidec import metrics
from multidec.cli import evaluate, main
from multidec.data import TaskSpec, dataset_bytes, gen_splits, parse_dataset
from multidec.lm import LmConfig, LmTrainConfig, lm_train, load_lm, save_lm
from multidec.models import Seq2SeqModel, checkpoint_bytes, config_for, load_checkpoint, save_checkpoint
from multidec.search import DecodeConfig, decode_corpus
from multidec.train import TrainConfig, train_model

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("MULTIDEC_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
SEEDS = (0, 1, 2)
EASY, HARD = 0.3, 0.8
CONV_EPOCHS = 60
HARD_EPOCHS = 40
LP_GRID = (0.0, 0.5, 1.0)
INFERENCE_SOURCES = ("search.py", "models.py", "nn.py", "tensor.py", "ctc.py", "kernels.py", "_pykernels.py",
                     "_ckernels.pyx", "lm.py", "data.py")

VERDICTS: list[str] = []


def verdict(label: str, ok: bool, detail: str) -> bool:
    VERDICTS.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
    return ok


def fmt(xs) -> str:
    return "[" + ", ".join(f"{x:.2f}" for x in xs) + "]"


@lru_cache(maxsize=None)
def code_fingerprint() -> str:
    src = ROOT / "src" / "multidec"
    h = hashlib.sha1()
    for name in INFERENCE_SOURCES:
        h.update((src / name).read_bytes())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------- cached artifacts


@lru_cache(maxsize=None)
def splits(noise: float, seed: int) -> dict:
    return gen_splits(TaskSpec(noise=noise), seed, domain_shift=True)


@lru_cache(maxsize=None)
def trained(arch: str, seed: int, noise: float, epochs: int):
    """Model trained on the default task split for ``seed``; returns (model, metadata)."""
    path = CACHE / f"{arch}_s{seed}_n{noise}_e{epochs}.ckpt"
    meta_path = path.with_suffix(".json")
    if path.exists() and meta_path.exists():
        return load_checkpoint(path, expect_arch=arch), json.loads(meta_path.read_text())
    sp = splits(noise, seed)
    model = Seq2SeqModel(config_for(TaskSpec(noise=noise), arch=arch, seed=seed))
    start = time.perf_counter()
    res = train_model(model, sp["train"], sp["dev"], TrainConfig(epochs=epochs, seed=seed))
    meta = {"seconds": time.perf_counter() - start, "epochs": epochs, "best_epoch": res.best_epoch,
            "dev_loss": [row["dev_loss"] for row in res.history]}
    CACHE.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path)
    meta_path.write_text(json.dumps(meta))
    return model, meta


@lru_cache(maxsize=None)
def language_model(seed: int, noise: float, source: str):
    """LM over the intermediate sequences of ``source`` (``train`` or ``lm_shift``)."""
    path = CACHE / f"lm_{source}_s{seed}_n{noise}.ckpt"
    if path.exists():
        return load_lm(path)
    sp = splits(noise, seed)
    model, _ = lm_train([e.y_b for e in sp[source]], LmConfig(vocab=TaskSpec().vocab_b, seed=seed),
                        LmTrainConfig(epochs=10, seed=seed))
    CACHE.mkdir(parents=True, exist_ok=True)
    save_lm(model, path)
    return model


def decoded(arch, seed, noise, epochs, split, cfg: DecodeConfig, lm_source=None) -> dict:
    """Decode a split; returns the hypotheses keyed by uid (cli.evaluate format)."""
    key = json.dumps([arch, seed, noise, epochs, split, dataclasses.astuple(cfg), lm_source, code_fingerprint()])
    path = CACHE / "decodes" / (hashlib.sha1(key.encode()).hexdigest()[:20] + ".json")
    if path.exists():
        return json.loads(path.read_text())
    model, _ = trained(arch, seed, noise, epochs)
    lm = language_model(seed, noise, lm_source) if lm_source else None
    examples = splits(noise, seed)[split]
    results = decode_corpus(model, examples, cfg, lm)
    hyps = {e.uid: {"y_b": [int(t) for t in r.y_b], "y_c": [int(t) for t in r.y_c]} for e, r in zip(examples, results)}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(hyps))
    return hyps


def scores(hyps: dict, examples) -> tuple[float, float]:
    rep = evaluate(hyps, examples)
    return rep["intermediate_wer"]["wer"], rep["overall"]["bleu"]


def tuned_wer(arch, seed, noise, epochs, lm_weight, ctc_weight, lm_source, test_split, test_lm_source):
    """Pick the ASR length penalty on dev, then report test WER with it."""
    dev = splits(noise, seed)["dev"]
    best = min(LP_GRID, key=lambda a: (scores(decoded(arch, seed, noise, epochs, "dev", DecodeConfig(
        lm_weight=lm_weight, ctc_weight=ctc_weight, length_penalty_asr=a), lm_source), dev)[0], a))
    cfg = DecodeConfig(lm_weight=lm_weight, ctc_weight=ctc_weight, length_penalty_asr=best)
    wer, _ = scores(decoded(arch, seed, noise, epochs, test_split, cfg, test_lm_source), splits(noise, seed)[test_split])
    return wer, best


# ---------------------------------------------------------------- 1-3: unit-test gates


def run_subset(args: list[str]) -> tuple[bool, float, str]:
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *args],
                          cwd=ROOT, capture_output=True, text=True)
    secs = time.perf_counter() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    return proc.returncode == 0, secs, summary


def test_criterion_1_gradient_suite():
    ok, secs, summary = run_subset(["tests/test_tensor.py", "tests/test_nn.py", "tests/test_models.py",
                                    "tests/test_ctc.py", "-k", "gradient"])
    assert verdict("criterion 1 (gradient suite, 10 seeds, float64)", ok and secs < 120,
                   f"{summary}; {secs:.0f}s (limit 120s)")


def test_criterion_2_search_exactness():
    ok, secs, summary = run_subset(["tests/test_search.py", "-k", "exhaustive or beam_one_equals_greedy"])
    assert verdict("criterion 2 (search exactness)", ok and secs < 60, f"{summary}; {secs:.0f}s (limit 60s)")


def test_criterion_3_ctc_oracle():
    ok, secs, summary = run_subset(["tests/test_ctc.py", "-k", "enumeration or partition or cumulative"])
    assert verdict("criterion 3 (CTC oracle)", ok and secs < 60, f"{summary}; {secs:.0f}s (limit 60s)")


# ---------------------------------------------------------------- 4: convergence


def test_criterion_4_convergence():
    wers, bleus, mins, ok = [], [], [], True
    for seed in SEEDS:
        _, meta = trained("multidec", seed, EASY, CONV_EPOCHS)
        wer, bleu = scores(decoded("multidec", seed, EASY, CONV_EPOCHS, "test", DecodeConfig()), splits(EASY, seed)["test"])
        wers.append(wer)
        bleus.append(bleu)
        mins.append(meta["seconds"] / 60)
        ok &= wer <= 5.0 and bleu >= 85.0 and meta["seconds"] <= 1200 and meta["epochs"] <= 60
    assert verdict("criterion 4 (convergence, sigma=0.3, 60 epochs)", ok,
                   f"test WER {fmt(wers)} (<=5), BLEU {fmt(bleus)} (>=85), train minutes {fmt(mins)} (<=20)")


def test_dev_loss_falls_by_epoch_30():
    pairs = []
    for seed in SEEDS:
        _, meta = trained("multidec", seed, EASY, CONV_EPOCHS)
        pairs.append((meta["dev_loss"][29], meta["dev_loss"][0]))
    ok = all(late < first for late, first in pairs)
    assert verdict("example (dev loss epoch 30 < epoch 1, sigma=0.3)", ok,
                   ", ".join(f"{late:.3f} < {first:.3f}" for late, first in pairs))


def test_perfect_asr_oracle_agreement():
    """Where the searched intermediate equals the reference, oracle and searched BLEU agree within 0.5."""
    diffs = []
    for seed in SEEDS:
        test = splits(EASY, seed)["test"]
        searched = decoded("multidec", seed, EASY, CONV_EPOCHS, "test", DecodeConfig())
        oracle = decoded("multidec", seed, EASY, CONV_EPOCHS, "test", DecodeConfig(oracle=True))
        exact = [e for e in test if searched[e.uid]["y_b"] == e.y_b]
        refs = [e.y_c for e in exact]
        diffs.append(abs(metrics.corpus_bleu(refs, [searched[e.uid]["y_c"] for e in exact])
                         - metrics.corpus_bleu(refs, [oracle[e.uid]["y_c"] for e in exact])))
    assert verdict("example (0% WER subset: oracle vs searched BLEU)", max(diffs) <= 0.5, f"|diff| {fmt(diffs)} (<=0.5)")


# ---------------------------------------------------------------- 5-9: hard variant


def test_criterion_5_beam_size_trend():
    w1, w16, b1, b16 = [], [], [], []
    for seed in SEEDS:
        test = splits(HARD, seed)["test"]
        for beam, ws, bs in ((1, w1, b1), (16, w16, b16)):
            wer, bleu = scores(decoded("multidec", seed, HARD, HARD_EPOCHS, "test", DecodeConfig(beam_asr=beam)), test)
            ws.append(wer)
            bs.append(bleu)
    ok = np.mean(w16) <= np.mean(w1) and np.mean(b16) >= np.mean(b1)
    assert verdict("criterion 5 (beam 16 vs 1, sigma=0.8)", ok,
                   f"mean WER {np.mean(w16):.2f} vs {np.mean(w1):.2f}, mean BLEU {np.mean(b16):.2f} vs {np.mean(b1):.2f}")


def test_criterion_6_oracle_bound():
    searched, oracle = [], []
    for seed in SEEDS:
        test = splits(HARD, seed)["test"]
        searched.append(scores(decoded("multidec", seed, HARD, HARD_EPOCHS, "test", DecodeConfig()), test)[1])
        oracle.append(scores(decoded("multidec", seed, HARD, HARD_EPOCHS, "test", DecodeConfig(oracle=True)), test)[1])
    ok = all(o >= s for o, s in zip(oracle, searched))
    assert verdict("criterion 6 (oracle BLEU >= searched, every seed)", ok, f"oracle {fmt(oracle)}, searched {fmt(searched)}")


def test_criterion_7_fusion_gains():
    none, lm, both, lps = [], [], [], []
    for seed in SEEDS:
        for lw, cw, out in ((0.0, 0.0, none), (0.2, 0.0, lm), (0.2, 0.3, both)):
            src = "train" if lw else None
            wer, lp = tuned_wer("multidec", seed, HARD, HARD_EPOCHS, lw, cw, src, "test", src)
            out.append(wer)
            lps.append(lp)
    ok = np.mean(lm) <= np.mean(none) and np.mean(both) - np.mean(lm) <= 0.2
    assert verdict("criterion 7 (LM fusion 0.2, + CTC 0.3)", ok,
                   f"mean WER none {np.mean(none):.2f}, lm {np.mean(lm):.2f}, lm+ctc {np.mean(both):.2f}; "
                   f"dev-chosen length penalties {lps}")


def test_criterion_8_error_propagation():
    means, lines = {}, []
    for arch in ("multidec", "multidec_sa"):
        bleus = []
        for seed in SEEDS:
            test = splits(HARD, seed)["test"]
            rep = evaluate(decoded(arch, seed, HARD, HARD_EPOCHS, "test", DecodeConfig()), test)
            bleus.append(rep["overall"]["bleu"])
            buckets = {k[len("bucket "):]: v for k, v in rep.items() if k.startswith("bucket ")}
            assert sum(v["count"] for v in buckets.values()) == len(test)
            lines.append(f"{arch}/{seed} " + " ".join(f"{k}:{v['count']}@{v['bleu']:.1f}" for k, v in buckets.items()))
        means[arch] = float(np.mean(bleus))
    three = [name for name, _, _ in metrics.BUCKETS] == ["<40%", "[40,80)%", ">=80%"]
    ok = means["multidec_sa"] >= means["multidec"] and three
    assert verdict("criterion 8 (multidec_sa vs multidec BLEU)", ok,
                   f"mean BLEU sa {means['multidec_sa']:.2f} vs {means['multidec']:.2f}; buckets " + "; ".join(lines))


def test_criterion_9_domain_shift():
    none, lm, lps, raw_none, raw_lm = [], [], [], [], []
    for seed in SEEDS:
        # length penalty chosen on the in-domain dev set (with the in-domain LM for the fusion arm)
        w0, a0 = tuned_wer("multidec", seed, HARD, HARD_EPOCHS, 0.0, 0.0, None, "test_shift", None)
        w1, a1 = tuned_wer("multidec", seed, HARD, HARD_EPOCHS, 0.2, 0.0, "train", "test_shift", "lm_shift")
        none.append(w0)
        lm.append(w1)
        lps += [a0, a1]
        shift = splits(HARD, seed)["test_shift"]
        raw_none.append(scores(decoded("multidec", seed, HARD, HARD_EPOCHS, "test_shift", DecodeConfig()), shift)[0])
        raw_lm.append(scores(decoded("multidec", seed, HARD, HARD_EPOCHS, "test_shift", DecodeConfig(lm_weight=0.2),
                                     "lm_shift"), shift)[0])
    ok = np.mean(lm) < np.mean(none)
    assert verdict("criterion 9 (shifted LM fusion on shifted test)", ok,
                   f"mean WER fused {np.mean(lm):.2f} vs none {np.mean(none):.2f} (dev-chosen penalties {lps}); "
                   f"at penalty 0: fused {np.mean(raw_lm):.2f} vs none {np.mean(raw_none):.2f}")


# ---------------------------------------------------------------- 10: persistence and determinism

PIPELINE_CONFIG = """\
[task]
noise=0.5
n_train=120
n_dev=20
n_test=20

[model]
d=16
heads=2
ffn_dim=32
enc_asr_layers=1
dec_asr_layers=1
enc_st_layers=1
dec_st_layers=1

[train]
epochs=2
batch_size=16
warmup=20

[lm]
d=16
heads=2
ffn_dim=32
layers=1
epochs=2
"""


def run_pipeline(root: Path) -> None:
    root.mkdir(parents=True)
    cfg = root / "config.ini"
    cfg.write_text(PIPELINE_CONFIG)
    data = root / "data"
    steps = [
        ["gen-data", "--config", cfg, "--out", data, "--domain-shift"],
        ["train", "--config", cfg, "--data", data, "--out", root / "model.ckpt", "--arch", "multidec_sa"],
        ["train-lm", "--config", cfg, "--data", data, "--out", root / "lm.ckpt"],
        ["decode", "--config", cfg, "--checkpoint", root / "model.ckpt", "--data", data / "test.mdds",
         "--out", root / "hyps.tsv", "--lm", root / "lm.ckpt", "--lm-weight", "0.2", "--ctc-weight", "0.3"],
        ["eval", "--hyps", root / "hyps.tsv", "--data", data / "test.mdds", "--out", root / "report.txt"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv


def test_criterion_10_persistence_and_determinism(tmp_path):
    problems = []
    model, _ = trained("multidec", 0, HARD, HARD_EPOCHS)
    raw = checkpoint_bytes(model, model.config, "seq2seq")
    save_checkpoint(model, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    if checkpoint_bytes(back, back.config, "seq2seq") != raw or (tmp_path / "a.ckpt").read_bytes() != raw:
        problems.append("checkpoint bytes changed")
    if any(p.data.tobytes() != q.data.tobytes() for p, q in zip(model.parameters(), back.parameters())):
        problems.append("checkpoint parameters changed")
    spec = TaskSpec(noise=HARD)
    test = splits(HARD, 0)["test"]
    blob = dataset_bytes(test, spec)
    spec2, test2 = parse_dataset(blob)
    if spec2 != spec or not all(a.same_as(b) for a, b in zip(test, test2)) or dataset_bytes(test2, spec2) != blob:
        problems.append("dataset round trip differs")
    run_pipeline(tmp_path / "run1")
    run_pipeline(tmp_path / "run2")
    files = sorted(p.relative_to(tmp_path / "run1") for p in (tmp_path / "run1").rglob("*") if p.is_file())
    for rel in files:
        if (tmp_path / "run1" / rel).read_bytes() != (tmp_path / "run2" / rel).read_bytes():
            problems.append(f"{rel} differs between reruns")
    assert verdict("criterion 10 (round trips, pipeline rerun)", not problems,
                   "; ".join(problems) or f"checkpoint, dataset and {len(files)} pipeline files identical")
