"""Transformer building blocks on top of :mod:`multidec.tensor`.

All blocks are pre-norm residual: ``x + drop(sublayer(norm(x)))``. Masks are
plain boolean numpy arrays where True means "may attend".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import RngContext, Tensor

# embeddings are drawn from normal(0, d ** EMBED_INIT_POWER)
EMBED_INIT_POWER = -0.5

DROPOUT_SITES = ("attn", "ffn", "resid")


class LengthError(ValueError):
    """Input sequence too short for the operation."""


@dataclass
class BlockConfig:
    d: int = 32
    heads: int = 4
    ffn_dim: int = 128
    dropout: dict = field(default_factory=lambda: {"attn": 0.0, "ffn": 0.0, "resid": 0.0})
    eps: float = 1e-5
    # which memory the multi-source decoder attends first: "transcript" or "speech"
    source_order: str = "transcript"

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"attention dim {self.d} not divisible by {self.heads} heads")
        for site, p in self.dropout.items():
            if site not in DROPOUT_SITES:
                raise ValueError(f"unknown dropout site {site!r}")
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout {site}={p} outside [0, 1)")
        if self.source_order not in ("transcript", "speech"):
            raise ValueError(f"source_order must be 'transcript' or 'speech', got {self.source_order!r}")

    def p(self, site: str) -> float:
        return self.dropout.get(site, 0.0)


class Module:
    """Minimal parameter container; parameters are discovered by attribute walk."""

    training = False
    rng: RngContext | None = None

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_") or name == "rng":
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for name, value in vars(self).items():
            if isinstance(value, Module) and name != "rng":
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True, rng: RngContext | None = None):
        for m in self.modules():
            m.training = mode
            if rng is not None:
                m.rng = rng
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _param(array) -> Tensor:
    return Tensor(array, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngContext, bias: bool = True):
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.weight = _param(rng.uniform((d_in, d_out), bound))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = _param(np.ones(d))
        self.bias = _param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def padding_mask(lengths, max_len: int) -> np.ndarray:
    """``(B, max_len)`` boolean, True on real (non-padded) positions."""
    return np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]


def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Reference ``softmax(q k^T / sqrt(d_head))`` for a single head, in numpy."""
    scores = q @ k.T / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


class MultiHeadAttention(Module):
    def __init__(self, cfg: BlockConfig, rng: RngContext):
        self.cfg = cfg
        self.q = Linear(cfg.d, cfg.d, rng)
        self.k = Linear(cfg.d, cfg.d, rng)
        self.v = Linear(cfg.d, cfg.d, rng)
        self.o = Linear(cfg.d, cfg.d, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        h = self.cfg.heads
        return x.reshape(B, L, h, self.cfg.d // h).transpose(0, 2, 1, 3)

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None) -> Tensor:
        """``q_in`` is (B, Lq, d), ``kv_in`` is (B, Lk, d); mask broadcasts to (B, Lq, Lk)."""
        cfg = self.cfg
        if q_in.shape[-1] != cfg.d or kv_in.shape[-1] != cfg.d:
            raise T.ShapeError(f"attention inputs must have last dim {cfg.d}")
        B, Lq, _ = q_in.shape
        Lk = kv_in.shape[1]
        q = self._split(self.q(q_in))
        k = self._split(self.k(kv_in))
        v = self._split(self.v(kv_in))
        scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(cfg.d // cfg.heads))
        if mask is not None:
            mask = np.broadcast_to(mask, (B, Lq, Lk))[:, None, :, :]
        weights = T.softmax(scores, mask)
        weights = T.dropout(weights, cfg.p("attn"), self.rng, self.training)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Lq, cfg.d)
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, cfg: BlockConfig, rng: RngContext):
        self.cfg = cfg
        self.w1 = Linear(cfg.d, cfg.ffn_dim, rng)
        self.w2 = Linear(cfg.ffn_dim, cfg.d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.dropout(T.relu(self.w1(x)), self.cfg.p("ffn"), self.rng, self.training)
        return self.w2(h)


class EncoderBlock(Module):
    def __init__(self, cfg: BlockConfig, rng: RngContext):
        self.cfg = cfg
        self.norm1 = LayerNorm(cfg.d, cfg.eps)
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.d, cfg.eps)
        self.ffn = FeedForward(cfg, rng)

    def _resid(self, x: Tensor, branch: Tensor) -> Tensor:
        return x + T.dropout(branch, self.cfg.p("resid"), self.rng, self.training)

    def __call__(self, x: Tensor, pad_mask: np.ndarray | None, attn_mask: np.ndarray | None = None) -> Tensor:
        """``pad_mask`` is (B, T) True on real frames; ``attn_mask`` (broadcastable
        to (B, T, T)) replaces it when given, e.g. a causal mask."""
        if attn_mask is not None:
            mask = attn_mask
        else:
            mask = None if pad_mask is None else pad_mask[:, None, :]
        h = self.norm1(x)
        x = self._resid(x, self.attn(h, h, mask))
        return self._resid(x, self.ffn(self.norm2(x)))


class DecoderBlock(EncoderBlock):
    """Causal self-attention, cross-attention over one memory, feed-forward."""

    def __init__(self, cfg: BlockConfig, rng: RngContext):
        super().__init__(cfg, rng)
        self.norm_src = LayerNorm(cfg.d, cfg.eps)
        self.src_attn = MultiHeadAttention(cfg, rng)

    def __call__(self, y: Tensor, mem: Tensor, causal: np.ndarray, mem_mask: np.ndarray | None) -> Tensor:
        h = self.norm1(y)
        y = self._resid(y, self.attn(h, h, causal))
        mm = None if mem_mask is None else mem_mask[:, None, :]
        y = self._resid(y, self.src_attn(self.norm_src(y), mem, mm))
        return self._resid(y, self.ffn(self.norm2(y)))


class MultiSourceDecoderBlock(EncoderBlock):
    """Causal self-attention, then serial cross-attention over two memories.

    ``mem_a`` is the transcript-side memory and ``mem_b`` the speech-side one;
    ``cfg.source_order`` picks which is attended first.
    """

    def __init__(self, cfg: BlockConfig, rng: RngContext):
        super().__init__(cfg, rng)
        self.norm_a = LayerNorm(cfg.d, cfg.eps)
        self.attn_a = MultiHeadAttention(cfg, rng)
        self.norm_b = LayerNorm(cfg.d, cfg.eps)
        self.attn_b = MultiHeadAttention(cfg, rng)

    def __call__(self, y, mem_a, mem_b, causal, mask_a=None, mask_b=None) -> Tensor:
        h = self.norm1(y)
        y = self._resid(y, self.attn(h, h, causal))
        steps = [(self.norm_a, self.attn_a, mem_a, mask_a), (self.norm_b, self.attn_b, mem_b, mask_b)]
        if self.cfg.source_order == "speech":
            steps.reverse()
        for norm, attn, mem, mask in steps:
            mm = None if mask is None else mask[:, None, :]
            y = self._resid(y, attn(norm(y), mem, mm))
        return self._resid(y, self.ffn(self.norm2(y)))


def subsampled_length(n_frames: int, stages: int) -> int:
    """Output length of ``stages`` stride-2 convolutions: ceil(n / 2**stages).

    Each stage uses kernel 3, stride 2 and one zero frame of padding on each
    side, so a stage maps length n to ceil(n / 2).
    """
    for _ in range(stages):
        n_frames = (n_frames + 1) // 2
    return n_frames


class ConvSubsample(Module):
    """Stack of time convolutions (kernel 3, stride 2, pad 1) with ReLU.

    The first stage projects the feature dimension to ``d``. Inputs must have
    at least ``2 ** stages`` frames.
    """

    kernel = 3

    def __init__(self, feat_dim: int, d: int, rng: RngContext, stages: int = 2):
        self.stages = stages
        self.convs = [Linear((feat_dim if i == 0 else d) * self.kernel, d, rng) for i in range(stages)]

    def min_frames(self) -> int:
        return 2 ** self.stages

    def __call__(self, x: Tensor, lengths=None) -> Tensor:
        """``x`` is (B, T, f) with zeros past each utterance's end.

        With ``lengths`` given, outputs past each utterance's subsampled length
        are zeroed after every stage, so padding never leaks into real frames.
        """
        n = x.shape[1]
        if n < self.min_frames():
            raise LengthError(f"{n} frames is shorter than the minimum {self.min_frames()}")
        for conv in self.convs:
            n = x.shape[1]
            out_len = (n + 1) // 2
            idx = 2 * np.arange(out_len)[:, None] + np.arange(self.kernel)[None, :]
            xp = T.pad(x, 1, 1, 1)
            win = T.take(xp, idx, axis=1)  # (B, out_len, k, c)
            B, _, k, c = win.shape
            x = T.relu(conv(win.reshape(B, out_len, k * c)))
            if lengths is not None:
                lengths = [(m + 1) // 2 for m in lengths]
                keep = np.broadcast_to(padding_mask(lengths, out_len)[..., None], x.shape)
                x = x * Tensor(keep.astype(x.dtype))
        return x


def sinusoid_table(length: int, d: int) -> np.ndarray:
    """PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(p / 10000^(2i/d))."""
    pos = np.arange(length)[:, None]
    rate = np.power(10000.0, -np.arange(0, d, 2) / d)[None, :]
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[:, : d // 2])
    return table


class PositionalEncoding:
    def __init__(self, d: int):
        self.d = d
        self._table = sinusoid_table(64, d)

    def __call__(self, length: int, dtype) -> np.ndarray:
        if length > len(self._table):
            self._table = sinusoid_table(2 * length, self.d)
        return self._table[:length].astype(dtype)


class Embedding(Module):
    """Token lookup scaled by sqrt(d), plus sinusoidal positions."""

    def __init__(self, vocab: int, d: int, rng: RngContext):
        self.vocab = vocab
        self.d = d
        self.table = _param(rng.normal((vocab, d), d ** EMBED_INIT_POWER))
        self._pos = PositionalEncoding(d)

    def __call__(self, tokens) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab):
            raise IndexError(f"token id outside vocabulary of size {self.vocab}")
        e = T.scale(T.take(self.table, tokens, axis=0), math.sqrt(self.d))
        return e + Tensor(self._pos(tokens.shape[-1], e.dtype))
