"""The three architectures and their joint training loss.

``baseline``     ASR encoder; ASR decoder and ST decoder both attend the speech encoder.
``multidec``     ASR sub-net, then an ST encoder over the ASR decoder's hidden
                 states and an ST decoder over that encoder.
``multidec_sa``  as ``multidec``, with an ST decoder that additionally attends
                 the speech encoder (two serial cross-attentions).

The hidden intermediate of a step is the ASR decoder's output after its final
layer norm, i.e. exactly the vector the output projection consumes. The state
that predicts eos is part of the sequence handed to the ST encoder, so a
sequence of L intermediate tokens yields L + 1 states.
"""

from __future__ import annotations

import dataclasses
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config, tokens
from .config import ConfigError
from . import tensor as T
from .ctc import ctc_loss
from .nn import (
    BlockConfig,
    ConvSubsample,
    DecoderBlock,
    Embedding,
    EncoderBlock,
    LayerNorm,
    Linear,
    Module,
    MultiSourceDecoderBlock,
    PositionalEncoding,
    causal_mask,
    padding_mask,
    subsampled_length,
)
from .tensor import RngContext, Tensor
from .tokens import EOS, PAD, SOS

ARCHS = ("baseline", "multidec", "multidec_sa")


def _default_dropout():
    return {"attn": 0.1, "ffn": 0.1, "resid": 0.1}


@dataclass
class ModelConfig:
    arch: str = "multidec"
    feat_dim: int = 8
    d: int = 32
    heads: int = 4
    ffn_dim: int = 128
    enc_asr_layers: int = 4
    dec_asr_layers: int = 2
    enc_st_layers: int = 2
    dec_st_layers: int = 2
    vocab_b: int = 20
    vocab_c: int = 20
    subsample_stages: int = 1
    dropout: dict[str, float] = field(default_factory=_default_dropout)
    # overrides applied to the ST decoder only
    st_dropout: dict[str, float] = field(default_factory=dict)
    mtl_alpha: float = 0.3
    asr_weight: float = 0.5
    st_pos_reinject: bool = False
    source_order: str = "transcript"
    eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch: expected one of {ARCHS}, got {self.arch!r}")
        for name in ("mtl_alpha", "asr_weight"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}: must lie in [0, 1], got {v}")
        if self.subsample_stages < 0:
            raise ValueError("subsample_stages: must be >= 0")
        for name in ("vocab_b", "vocab_c"):
            if getattr(self, name) <= tokens.FIRST_CONTENT:
                raise ValueError(f"{name}: must exceed the {tokens.FIRST_CONTENT} reserved ids")
        self.block(self.dropout)
        self.block({**self.dropout, **self.st_dropout})

    def block(self, dropout: dict) -> BlockConfig:
        return BlockConfig(self.d, self.heads, self.ffn_dim, dict(dropout), self.eps, self.source_order)


@dataclass
class Batch:
    """Padded mini-batch. ``x`` is (B, T, f) with zero frames past each length."""

    x: np.ndarray
    x_lens: np.ndarray
    y_b: list
    y_c: list

    @property
    def size(self) -> int:
        return len(self.x_lens)


def make_batch(xs, y_bs, y_cs) -> Batch:
    lens = np.array([len(x) for x in xs])
    f = xs[0].shape[1]
    out = np.zeros((len(xs), lens.max(), f), dtype=T.get_default_dtype())
    for i, x in enumerate(xs):
        out[i, : len(x)] = x
    return Batch(out, lens, [list(y) for y in y_bs], [list(y) for y in y_cs])


def teacher_forcing(seqs):
    """Decoder inputs ``[sos] + y``, targets ``y + [eos]``, and the target mask."""
    L = max(len(s) for s in seqs) + 1
    inp = np.full((len(seqs), L), PAD, dtype=np.int64)
    tgt = np.full((len(seqs), L), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        inp[i, 0] = SOS
        inp[i, 1 : len(s) + 1] = s
        tgt[i, : len(s)] = s
        tgt[i, len(s)] = EOS
    return inp, tgt, tgt != PAD


def token_nll(logp: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over unmasked target tokens."""
    picked = T.pick(logp, targets)
    w = Tensor(mask.astype(logp.dtype))
    return T.scale(T.total(picked * w), -1.0 / max(int(mask.sum()), 1))


@dataclass
class Memory:
    """Encoder output with its (B, T) validity mask."""

    h: Tensor
    mask: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def repeat(self, n: int) -> "Memory":
        """Tile a single-utterance memory for ``n`` hypotheses (no gradient)."""
        return Memory(Tensor(np.repeat(self.h.data, n, axis=0)), np.repeat(self.mask, n, axis=0))


@dataclass
class ForwardOutput:
    asr_logp: Tensor | None
    st_logp: Tensor | None
    ctc_logp: Tensor | None
    asr_states: Tensor | None
    losses: dict = field(default_factory=dict)

    @property
    def total(self) -> Tensor:
        return self.losses["total"]

    def loss_values(self) -> dict:
        return {k: float(v.data) for k, v in self.losses.items()}


class Encoder(Module):
    def __init__(self, n_layers: int, cfg: BlockConfig, rng: RngContext):
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(n_layers)]
        self.norm = LayerNorm(cfg.d, cfg.eps)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x)


class Decoder(Module):
    """Token decoder; ``states`` are the post-norm outputs fed to ``out``."""

    def __init__(self, n_layers: int, vocab: int, cfg: BlockConfig, rng: RngContext, multi_source: bool = False):
        self.embed = Embedding(vocab, cfg.d, rng)
        block = MultiSourceDecoderBlock if multi_source else DecoderBlock
        self.blocks = [block(cfg, rng) for _ in range(n_layers)]
        self.norm = LayerNorm(cfg.d, cfg.eps)
        self.out = Linear(cfg.d, vocab, rng)
        self.multi_source = multi_source

    def states(self, prefix: np.ndarray, mem: Memory, mem_b: Memory | None = None) -> Tensor:
        y = self.embed(prefix)
        causal = causal_mask(prefix.shape[1])[None]
        for blk in self.blocks:
            if self.multi_source:
                y = blk(y, mem.h, mem_b.h, causal, mem.mask, mem_b.mask)
            else:
                y = blk(y, mem.h, causal, mem.mask)
        return self.norm(y)

    def logp(self, states: Tensor) -> Tensor:
        return T.log_softmax(self.out(states))


class SpeechEncoder(Module):
    def __init__(self, cfg: ModelConfig, bcfg: BlockConfig, rng: RngContext):
        self.conv = ConvSubsample(cfg.feat_dim, cfg.d, rng, cfg.subsample_stages) if cfg.subsample_stages else None
        self.proj = None if cfg.subsample_stages else Linear(cfg.feat_dim, cfg.d, rng)
        self.encoder = Encoder(cfg.enc_asr_layers, bcfg, rng)
        self._pos = PositionalEncoding(cfg.d)
        self.stages = cfg.subsample_stages

    def __call__(self, x: np.ndarray, x_lens) -> Memory:
        xt = Tensor(x)
        h = self.conv(xt, x_lens) if self.conv is not None else T.relu(self.proj(xt))
        lens = np.array([subsampled_length(int(n), self.stages) for n in x_lens])
        mask = padding_mask(lens, h.shape[1])
        h = h + Tensor(self._pos(h.shape[1], h.dtype))
        return Memory(self.encoder(h, mask), mask)


class Seq2SeqModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = RngContext(cfg.seed)
        base = cfg.block(cfg.dropout)
        st = cfg.block({**cfg.dropout, **cfg.st_dropout})
        self.enc_asr = SpeechEncoder(cfg, base, rng)
        self.ctc_out = Linear(cfg.d, cfg.vocab_b, rng)
        self.dec_asr = Decoder(cfg.dec_asr_layers, cfg.vocab_b, base, rng)
        if cfg.arch != "baseline":
            self.enc_st = Encoder(cfg.enc_st_layers, base, rng)
            self._st_pos = PositionalEncoding(cfg.d)
        self.dec_st = Decoder(cfg.dec_st_layers, cfg.vocab_c, st, rng, multi_source=cfg.arch == "multidec_sa")

    @property
    def arch(self) -> str:
        return self.config.arch

    @property
    def is_multidec(self) -> bool:
        return self.arch != "baseline"

    # -- sub-network pieces ------------------------------------------------

    def encode_speech(self, x: np.ndarray, x_lens) -> Memory:
        return self.enc_asr(x, x_lens)

    def ctc_logp(self, mem: Memory) -> Tensor:
        return T.log_softmax(self.ctc_out(mem.h))

    def asr_states(self, mem: Memory, prefix: np.ndarray) -> Tensor:
        return self.dec_asr.states(prefix, mem)

    def encode_intermediates(self, states: Tensor, lengths) -> Memory:
        """ST encoder over ASR decoder states; ``lengths`` count states (L_B + 1)."""
        if not self.is_multidec:
            raise TypeError("the baseline architecture has no ST encoder")
        mask = padding_mask(lengths, states.shape[1])
        if self.config.st_pos_reinject:
            states = states + Tensor(self._st_pos(states.shape[1], states.dtype))
        return Memory(self.enc_st(states, mask), mask)

    def st_logp(self, prefix: np.ndarray, st_mem: Memory, speech_mem: Memory | None) -> Tensor:
        if self.arch == "multidec_sa":
            states = self.dec_st.states(prefix, st_mem, speech_mem)
        else:
            states = self.dec_st.states(prefix, st_mem)
        return self.dec_st.logp(states)

    # -- training ------------------------------------------------------------

    def forward_train(self, batch: Batch) -> ForwardOutput:
        cfg = self.config
        speech = self.encode_speech(batch.x, batch.x_lens)
        ctc_lp = self.ctc_logp(speech)
        ctc_nll = ctc_loss(ctc_lp, batch.y_b, tokens.BLANK, speech.lengths)
        n_b = sum(len(y) for y in batch.y_b)
        l_ctc = T.scale(T.total(ctc_nll), 1.0 / n_b)

        inp_b, tgt_b, m_b = teacher_forcing(batch.y_b)
        states = self.asr_states(speech, inp_b)
        asr_lp = self.dec_asr.logp(states)
        l_asr = token_nll(asr_lp, tgt_b, m_b)

        inp_c, tgt_c, m_c = teacher_forcing(batch.y_c)
        if self.is_multidec:
            st_mem = self.encode_intermediates(states, m_b.sum(axis=1))
            st_lp = self.st_logp(inp_c, st_mem, speech)
        else:
            st_lp = self.st_logp(inp_c, speech, None)
        l_st = token_nll(st_lp, tgt_c, m_c)

        a, w = cfg.mtl_alpha, cfg.asr_weight
        asr_part = T.scale(l_ctc, a) + T.scale(l_asr, 1.0 - a)
        total = T.scale(asr_part, w) + T.scale(l_st, 1.0 - w)
        losses = {"ctc": l_ctc, "asr": l_asr, "st": l_st, "total": total}
        return ForwardOutput(asr_lp, st_lp, ctc_lp, states, losses)

    def forward_oracle(self, x: np.ndarray, y_b) -> tuple[Tensor, Memory, Memory]:
        """Teacher-force the ASR decoder on ground truth for one utterance.

        Returns the oracle states (1, L_B + 1, d), the ST memory built from
        them and the speech memory.
        """
        if not self.is_multidec:
            raise TypeError("oracle intermediates need a multidec or multidec_sa model")
        speech = self.encode_speech(x[None], [len(x)])
        inp, _, m = teacher_forcing([list(y_b)])
        states = self.asr_states(speech, inp)
        return states, self.encode_intermediates(states, m.sum(axis=1)), speech

    # -- incremental decoding ----------------------------------------------------

    def decode_step_asr(self, speech: Memory, prefixes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Next-token log-distribution and hidden state for each prefix.

        ``speech`` is a single-utterance memory; ``prefixes`` is (n, l) and
        starts with sos. Returns ((n, V_B) log-probs, (n, d) states).
        """
        prefixes = _check_prefixes(prefixes)
        mem = speech.repeat(len(prefixes)) if speech.h.shape[0] == 1 else speech
        states = self.asr_states(mem, prefixes)[:, -1]
        return self.dec_asr.logp(states).data, states.data

    def decode_step_st(self, st_mem: Memory, speech: Memory | None, prefixes: np.ndarray) -> np.ndarray:
        prefixes = _check_prefixes(prefixes)
        if self.arch == "multidec_sa":
            if speech is None:
                raise ValueError("multidec_sa decoding needs the speech memory")
        elif speech is not None and self.arch == "multidec":
            raise ValueError("multidec's ST decoder does not take the speech memory")
        n = len(prefixes)
        st = st_mem.repeat(n) if st_mem.h.shape[0] == 1 and n > 1 else st_mem
        sp = speech.repeat(n) if speech is not None and speech.h.shape[0] == 1 and n > 1 else speech
        return self.st_logp(prefixes, st, sp)[:, -1].data

    def submodules(self) -> dict[str, Module]:
        out = {"enc_asr": self.enc_asr, "ctc": self.ctc_out, "dec_asr": self.dec_asr, "dec_st": self.dec_st}
        if self.is_multidec:
            out["enc_st"] = self.enc_st
        return out


def _check_prefixes(prefixes) -> np.ndarray:
    prefixes = np.atleast_2d(np.asarray(prefixes, dtype=np.int64))
    if prefixes.shape[1] == 0:
        raise ValueError("empty prefix; decoding starts from sos")
    if np.any(prefixes[:, 0] != SOS):
        raise ValueError("prefixes must start with sos")
    return prefixes


def grad_norms(model: Seq2SeqModel) -> dict[str, float]:
    out = {}
    for name, mod in model.submodules().items():
        sq = sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in mod.parameters() if p.grad is not None)
        out[name] = sq ** 0.5
    return out


# --- checkpoints --------------------------------------------------------------
# little-endian:
#   magic "MDCK" | u32 version | u32 len + utf8 header ("kind=<kind>\n" + config lines) |
#   u32 n_params | n x [u16 len + utf8 name | u8 dtype bytes (4|8) | u8 ndim |
#                       u32[ndim] shape | payload] | u32 crc32(all previous bytes)

CKPT_MAGIC = b"MDCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(module: Module, cfg, kind: str) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    header = (f"kind={kind}\n" + config.to_text(cfg)).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    params = list(module.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        arr = p.data
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", arr.dtype.itemsize, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def parse_checkpoint(raw: bytes):
    """Return (kind, header text, {name: array})."""
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic number {raw[:4]!r}: not a multidec checkpoint")
    if len(raw) < 12:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError(f"checkpoint truncated at byte offset {len(body)}")
        out = body[pos : pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file truncated or corrupt)")
    (n_head,) = struct.unpack("<I", take(4))
    header = take(n_head).decode()
    kind_line, _, cfg_text = header.partition("\n")
    kind = kind_line.partition("=")[2]
    (n_params,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(n_params):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode()
        size, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = {4: np.dtype("<f4"), 8: np.dtype("<f8")}.get(size)
        if dtype is None:
            raise CheckpointError(f"parameter {name}: unknown dtype tag {size}")
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(take(size * count), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if pos != len(body):
        raise CheckpointError(f"unexpected trailing data at byte offset {pos}")
    return kind, cfg_text, params


def assign_parameters(module: Module, params: dict) -> None:
    own = dict(module.named_parameters())
    missing = set(own) - set(params)
    extra = set(params) - set(own)
    if missing or extra:
        raise CheckpointError(f"parameter names differ from config: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
    for name, p in own.items():
        if params[name].shape != p.shape:
            raise CheckpointError(f"parameter {name}: shape {params[name].shape} does not match config {p.shape}")
        p.data = params[name].copy()


def save_checkpoint(model: Seq2SeqModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, model.config, "seq2seq"))


def checkpoint_config(cls, text: str, path):
    try:
        return config.from_text(cls, text)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: invalid stored config: {exc}") from None


def load_checkpoint(path, expect_arch: str | None = None) -> Seq2SeqModel:
    kind, text, params = parse_checkpoint(Path(path).read_bytes())
    if kind != "seq2seq":
        raise CheckpointError(f"{path} holds a {kind!r} checkpoint, not a seq2seq model")
    cfg = checkpoint_config(ModelConfig, text, path)
    if expect_arch is not None and cfg.arch != expect_arch:
        raise CheckpointError(
            f"{path} holds a {cfg.arch!r} model but {expect_arch!r} was requested; "
            f"retrain with arch={expect_arch} or load without an architecture constraint"
        )
    dtype = next(iter(params.values())).dtype if params else T.get_default_dtype()
    with T.precision(dtype):
        model = Seq2SeqModel(cfg)
    assign_parameters(model, params)
    return model


def config_for(spec, **overrides) -> ModelConfig:
    """Model config matching a TaskSpec's vocabularies and feature size."""
    return dataclasses.replace(
        ModelConfig(), feat_dim=spec.feat_dim, vocab_b=spec.vocab_b, vocab_c=spec.vocab_c, **overrides
    )
