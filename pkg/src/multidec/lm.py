"""Causal transformer language model over the intermediate alphabet."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .models import CheckpointError, assign_parameters, checkpoint_bytes, checkpoint_config, parse_checkpoint, teacher_forcing, token_nll
from .nn import BlockConfig, Embedding, EncoderBlock, LayerNorm, Linear, Module, causal_mask
from .optim import Adam
from .tensor import RngContext, Tensor
from .tokens import FIRST_CONTENT, SOS


def _default_dropout():
    return {"attn": 0.1, "ffn": 0.1, "resid": 0.1}


@dataclass
class LmConfig:
    vocab: int = 20
    d: int = 32
    heads: int = 4
    ffn_dim: int = 128
    layers: int = 2
    dropout: dict[str, float] = field(default_factory=_default_dropout)
    eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.vocab <= FIRST_CONTENT:
            raise ValueError(f"vocab: must exceed the {FIRST_CONTENT} reserved ids")
        self.block()

    def block(self) -> BlockConfig:
        return BlockConfig(self.d, self.heads, self.ffn_dim, dict(self.dropout), self.eps)


@dataclass
class LmTrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_factor: float = 1.0
    warmup: int = 200
    grad_clip: float = 5.0
    seed: int = 0


class LmModel(Module):
    """Embedding, causal self-attention blocks, output projection."""

    def __init__(self, cfg: LmConfig):
        self.config = cfg
        rng = RngContext(cfg.seed)
        bcfg = cfg.block()
        self.embed = Embedding(cfg.vocab, cfg.d, rng)
        self.blocks = [EncoderBlock(bcfg, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.d, cfg.eps)
        self.out = Linear(cfg.d, cfg.vocab, rng)

    @property
    def vocab(self) -> int:
        return self.config.vocab

    def logp(self, prefixes: np.ndarray) -> Tensor:
        """(n, l) token ids -> (n, l, V) next-token log-probabilities."""
        y = self.embed(prefixes)
        mask = causal_mask(prefixes.shape[1])[None]
        for blk in self.blocks:
            y = blk(y, None, mask)
        return T.log_softmax(self.out(self.norm(y)))

    def score_step(self, prefixes) -> np.ndarray:
        """Next-token log-distribution after each (n, l) prefix."""
        prefixes = np.atleast_2d(np.asarray(prefixes, dtype=np.int64))
        if prefixes.shape[1] == 0:
            raise ValueError("empty prefix; scoring starts from sos")
        if np.any(prefixes[:, 0] != SOS):
            raise ValueError("prefixes must start with sos")
        with T.no_grad():
            return self.logp(prefixes)[:, -1].data


def lm_score_step(model: LmModel, prefix) -> np.ndarray:
    return model.score_step(np.asarray(prefix, dtype=np.int64)[None])[0]


def _check_corpus(corpus, vocab: int) -> None:
    for i, seq in enumerate(corpus):
        if any(t < FIRST_CONTENT or t >= vocab for t in seq):
            raise ValueError(f"sentence {i}: token outside the content range [{FIRST_CONTENT}, {vocab})")


def perplexity(model: LmModel, corpus, batch_size: int = 256) -> float:
    """exp of the mean per-token NLL, eos included."""
    model.eval()
    nll = 0.0
    count = 0
    with T.no_grad():
        for i in range(0, len(corpus), batch_size):
            chunk = corpus[i : i + batch_size]
            inp, tgt, mask = teacher_forcing(chunk)
            lp = model.logp(inp).data.astype(np.float64)
            picked = np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
            nll -= float((picked * mask).sum())
            count += int(mask.sum())
    return math.exp(nll / count)


def lm_train(corpus, cfg: LmConfig, train_cfg: LmTrainConfig | None = None, held_out=None, log=None):
    """Fit an LM; returns ``(model, per-epoch held-out perplexity)``.

    ``held_out`` defaults to the training corpus itself.
    """
    train_cfg = train_cfg or LmTrainConfig()
    corpus = [list(s) for s in corpus]
    if not corpus:
        raise ValueError("empty LM corpus")
    _check_corpus(corpus, cfg.vocab)
    held_out = corpus if held_out is None else [list(s) for s in held_out]
    _check_corpus(held_out, cfg.vocab)
    model = LmModel(cfg)
    opt = Adam(model.parameters(), cfg.d, train_cfg.lr_factor, train_cfg.warmup, grad_clip=train_cfg.grad_clip)
    rng = RngContext(train_cfg.seed)
    curve = []
    for epoch in range(train_cfg.epochs):
        model.train(True, rng)
        order = rng.permutation(len(corpus))
        for i in range(0, len(order), train_cfg.batch_size):
            batch = [corpus[j] for j in order[i : i + train_cfg.batch_size]]
            inp, tgt, mask = teacher_forcing(batch)
            loss = token_nll(model.logp(inp), tgt, mask)
            opt.zero_grad()
            loss.backward()
            opt.step()
        curve.append(perplexity(model, held_out))
        if log is not None:
            log(epoch + 1, curve[-1])
    model.eval()
    return model, curve


def save_lm(model: LmModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, model.config, "lm"))


def load_lm(path) -> LmModel:
    kind, text, params = parse_checkpoint(Path(path).read_bytes())
    if kind != "lm":
        raise CheckpointError(f"{path} holds a {kind!r} checkpoint, not a language model")
    cfg = checkpoint_config(LmConfig, text, path)
    dtype = next(iter(params.values())).dtype
    with T.precision(dtype):
        model = LmModel(cfg)
    assign_parameters(model, params)
    return model.eval()
