"""Epoch loop: bucketed batches, Noam-scheduled Adam, dev monitoring, best-dev weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import spec_mask
from .metrics import corpus_bleu, corpus_wer
from .models import Seq2SeqModel, grad_norms, make_batch
from .optim import Adam
from .search import greedy_batch
from .tensor import RngContext

# columns of the per-epoch training log (tab separated, one header line)
LOG_COLUMNS = (
    "epoch", "step", "lr", "train_loss", "dev_loss", "dev_ctc", "dev_asr", "dev_st",
    "dev_wer", "dev_bleu", "gn_enc_asr", "gn_ctc", "gn_dec_asr", "gn_enc_st", "gn_dec_st",
)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr_factor: float = 2.0
    warmup: int = 400
    grad_clip: float = 5.0
    seed: int = 0
    specaug: bool = False
    time_masks: int = 2
    feat_masks: int = 1
    mask_widths: tuple[int, ...] = (4, 2)
    dev_decode: bool = True
    keep_best: bool = True

    def __post_init__(self):
        for name in ("epochs", "batch_size", "warmup"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.lr_factor <= 0:
            raise ValueError(f"lr_factor: must be > 0, got {self.lr_factor}")


def batches(examples, batch_size: int, rng: RngContext) -> list[list[int]]:
    """Shuffled, length-bucketed batches of example indices.

    Pools of 8 batches are sorted by frame count before cutting so padding
    stays small; batch order is shuffled again afterwards.
    """
    order = rng.permutation(len(examples))
    pool = 8 * batch_size
    out = []
    for s in range(0, len(order), pool):
        chunk = sorted(order[s : s + pool], key=lambda i: (len(examples[i].x), i))
        out += [chunk[k : k + batch_size] for k in range(0, len(chunk), batch_size)]
    return [out[i] for i in rng.permutation(len(out))]


def evaluate_loss(model: Seq2SeqModel, examples, batch_size: int = 100) -> dict:
    """Example-weighted mean of each loss component over a corpus."""
    model.eval()
    sums: dict[str, float] = {}
    with T.no_grad():
        for s in range(0, len(examples), batch_size):
            chunk = examples[s : s + batch_size]
            out = model.forward_train(make_batch([e.x for e in chunk], [e.y_b for e in chunk], [e.y_c for e in chunk]))
            for k, v in out.loss_values().items():
                sums[k] = sums.get(k, 0.0) + v * len(chunk)
    return {k: v / len(examples) for k, v in sums.items()}


def evaluate_greedy(model: Seq2SeqModel, examples) -> dict:
    y_b, y_c = greedy_batch(model, examples)
    return {
        "wer": corpus_wer([e.y_b for e in examples], y_b)["wer"],
        "bleu": corpus_bleu([e.y_c for e in examples], y_c),
    }


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


@dataclass
class TrainResult:
    history: list
    best_epoch: int


def train_model(model: Seq2SeqModel, train_set, dev_set, cfg: TrainConfig, log=None) -> TrainResult:
    """Train in place. ``log`` receives each formatted TSV line (header first).

    With ``keep_best`` the parameters of the epoch with the lowest dev loss are
    restored at the end.
    """
    rng = RngContext(cfg.seed)
    params = model.parameters()
    opt = Adam(params, model.config.d, cfg.lr_factor, cfg.warmup, grad_clip=cfg.grad_clip)
    history = []
    best = (math.inf, 0, None)
    if log is not None:
        log("\t".join(LOG_COLUMNS))
    for epoch in range(1, cfg.epochs + 1):
        model.train(True, rng)
        losses = []
        norms: dict[str, list] = {}
        for idx in batches(train_set, cfg.batch_size, rng):
            xs = [train_set[i].x for i in idx]
            if cfg.specaug:
                xs = [spec_mask(x, cfg.time_masks, cfg.feat_masks, tuple(cfg.mask_widths), rng.generator) for x in xs]
            batch = make_batch(xs, [train_set[i].y_b for i in idx], [train_set[i].y_c for i in idx])
            out = model.forward_train(batch)
            loss = out.total.item()
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, step {opt.step_count + 1}: "
                    f"{out.loss_values()}; lower lr_factor or raise warmup",
                    epoch, opt.step_count + 1,
                )
            opt.zero_grad()
            out.total.backward()
            for k, v in grad_norms(model).items():
                norms.setdefault(k, []).append(v)
            opt.step()
            losses.append(loss)
        row = {"epoch": epoch, "step": opt.step_count, "lr": opt.lr, "train_loss": float(np.mean(losses))}
        dev = evaluate_loss(model, dev_set)
        row.update({"dev_loss": dev["total"], "dev_ctc": dev["ctc"], "dev_asr": dev["asr"], "dev_st": dev["st"]})
        if cfg.dev_decode:
            g = evaluate_greedy(model, dev_set)
            row.update({"dev_wer": g["wer"], "dev_bleu": g["bleu"]})
        else:
            row.update({"dev_wer": float("nan"), "dev_bleu": float("nan")})
        for k in ("enc_asr", "ctc", "dec_asr", "enc_st", "dec_st"):
            row[f"gn_{k}"] = float(np.mean(norms[k])) if k in norms else 0.0
        history.append(row)
        if log is not None:
            log("\t".join(_fmt(row[c]) for c in LOG_COLUMNS))
        if row["dev_loss"] < best[0]:
            best = (row["dev_loss"], epoch, [p.data.copy() for p in params] if cfg.keep_best else None)
    if cfg.keep_best and best[2] is not None:
        for p, saved in zip(params, best[2]):
            p.data = saved
    model.eval()
    return TrainResult(history, best[1])


def parse_log(text: str) -> list[dict]:
    lines = [l for l in text.splitlines() if l.strip() and not l.startswith("#")]
    head = lines[0].split("\t")
    return [dict(zip(head, (float(v) for v in l.split("\t")))) for l in lines[1:]]
