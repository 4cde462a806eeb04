"""Synthetic decomposable A -> B -> C datasets.

B (the intermediate) is a sentence drawn from a first-order Markov chain over
content tokens, C is a deterministic rewrite of B (:func:`transform`), and A is
a sequence of noisy feature frames emitted per intermediate token
(:func:`featurize`). The Markov chain never repeats a token back to back:
with frame-level acoustics, "x x" would be indistinguishable from a long "x".

Per-example generators are seeded with ``SeedSequence([seed, index])``, so any
example can be regenerated independently of the others.
"""

from __future__ import annotations

import dataclasses
import io
import math
import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import config, tokens
from .tokens import FIRST_CONTENT

MAGIC = b"MDDS"
VERSION = 1


class DatasetFormatError(ValueError):
    """Unreadable dataset file (wrong magic or version)."""


class ChecksumError(DatasetFormatError):
    """Dataset file truncated or corrupted."""

    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class TaskSpec:
    n_content: int = 16
    len_min: int = 5
    len_max: int = 12
    frames_per_token: tuple[int, ...] = (3, 4, 5)
    feat_dim: int = 8
    noise: float = 0.3
    markov_seed: int = 11
    perm_seed: int = 12
    codebook_seed: int = 13
    concentration: float = 0.3
    domain: str = "in"
    granularity: str = "word"

    def __post_init__(self):
        if self.n_content < 2:
            raise ValueError(f"n_content: need at least 2 content tokens, got {self.n_content}")
        if not 1 <= self.len_min <= self.len_max:
            raise ValueError(f"len_min/len_max: need 1 <= len_min <= len_max, got {self.len_min}, {self.len_max}")
        if not self.frames_per_token or min(self.frames_per_token) < 1:
            raise ValueError(f"frames_per_token: need positive counts, got {self.frames_per_token}")
        if self.feat_dim < 1:
            raise ValueError(f"feat_dim: must be positive, got {self.feat_dim}")
        if self.noise < 0:
            raise ValueError(f"noise: must be >= 0, got {self.noise}")
        if self.concentration <= 0:
            raise ValueError(f"concentration: must be > 0, got {self.concentration}")
        if self.granularity not in ("word", "char"):
            raise ValueError(f"granularity: 'word' or 'char', got {self.granularity!r}")

    @property
    def n_units(self) -> int:
        """Number of intermediate content tokens (sub-tokens in char mode)."""
        if self.granularity == "char":
            return math.isqrt(self.n_content - 1) + 1
        return self.n_content

    @property
    def vocab_b(self) -> int:
        return tokens.vocab_size(self.n_units)

    @property
    def vocab_c(self) -> int:
        return tokens.vocab_size(self.n_content)

    def shifted(self, offset: int = 1000) -> "TaskSpec":
        """Same codebook and rewrite rule, different intermediate-language statistics."""
        return dataclasses.replace(self, markov_seed=self.markov_seed + offset, domain="shift")


@dataclass(eq=False)
class SyntheticExample:
    uid: str
    x: np.ndarray
    y_b: list
    y_c: list

    def same_as(self, other: "SyntheticExample") -> bool:
        return (
            self.uid == other.uid
            and self.x.dtype == other.x.dtype
            and np.array_equal(self.x, other.x)
            and list(self.y_b) == list(other.y_b)
            and list(self.y_c) == list(other.y_c)
        )


@lru_cache(maxsize=64)
def transition_matrix(spec: TaskSpec) -> np.ndarray:
    """Row-stochastic (K, K) matrix over content indices with a zero diagonal."""
    K = spec.n_content
    rng = np.random.Generator(np.random.Philox(spec.markov_seed))
    P = rng.dirichlet(np.full(K - 1, spec.concentration), size=K)
    out = np.zeros((K, K))
    for i in range(K):
        out[i, np.arange(K) != i] = P[i]
    return out


@lru_cache(maxsize=64)
def permutation(spec: TaskSpec) -> np.ndarray:
    """Token-id substitution table: ``perm[tok]`` for every id (reserved ids map to themselves)."""
    rng = np.random.Generator(np.random.Philox(spec.perm_seed))
    perm = np.arange(spec.vocab_c)
    perm[FIRST_CONTENT:] = FIRST_CONTENT + rng.permutation(spec.n_content)
    return perm


@lru_cache(maxsize=64)
def codebook(spec: TaskSpec) -> np.ndarray:
    """(n_units, feat_dim) mean frame vector of every intermediate content token."""
    rng = np.random.Generator(np.random.Philox(spec.codebook_seed))
    return rng.normal(size=(spec.n_units, spec.feat_dim))


def entropy_rate(P: np.ndarray) -> float:
    """Entropy rate (nats/token) of a stationary Markov chain with transitions P."""
    w, v = np.linalg.eig(P.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1))])
    pi = pi / pi.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(P > 0, P * np.log(P), 0.0).sum(axis=1)
    return float(pi @ h)


def transform(y_b, perm=None) -> list[int]:
    """Substitute every token through ``perm`` then swap each adjacent pair.

    Positions (2i, 2i+1) are exchanged; an odd trailing token stays put.
    """
    out = []
    for t in y_b:
        if not tokens.is_content(t):
            raise ValueError(f"reserved token {t} inside an intermediate sequence")
        out.append(int(perm[t]) if perm is not None else int(t))
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def inverse_transform(y_c, perm=None) -> list[int]:
    out = [int(t) for t in y_c]
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    if perm is not None:
        inv = np.argsort(perm)
        out = [int(inv[t]) for t in out]
    return out


def to_units(words, spec: TaskSpec) -> list[int]:
    """Intermediate token sequence for a word sequence (two sub-tokens per word in char mode)."""
    if spec.granularity == "word":
        return [int(w) for w in words]
    m = spec.n_units
    out = []
    for w in words:
        j = w - FIRST_CONTENT
        out += [FIRST_CONTENT + j // m, FIRST_CONTENT + j % m]
    return out


def to_words(units, spec: TaskSpec) -> list[int]:
    if spec.granularity == "word":
        return [int(u) for u in units]
    m = spec.n_units
    if len(units) % 2:
        raise ValueError("char-level sequence must have even length")
    return [FIRST_CONTENT + (a - FIRST_CONTENT) * m + (b - FIRST_CONTENT) for a, b in zip(units[::2], units[1::2])]


def target_of(y_b, spec: TaskSpec) -> list[int]:
    return transform(to_words(y_b, spec), permutation(spec))


def example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def sample_words(spec: TaskSpec, rng: np.random.Generator) -> list[int]:
    P = transition_matrix(spec)
    n = int(rng.integers(spec.len_min, spec.len_max + 1))
    state = int(rng.integers(spec.n_content))
    out = [state]
    for _ in range(n - 1):
        state = int(rng.choice(spec.n_content, p=P[state]))
        out.append(state)
    return [FIRST_CONTENT + s for s in out]


def featurize(y_b, spec: TaskSpec, rng: np.random.Generator, noise: float | None = None) -> np.ndarray:
    """Raw (T, f) frames: each token emits k frames of ``codebook + N(0, noise^2)``."""
    book = codebook(spec)
    sigma = spec.noise if noise is None else noise
    counts = rng.choice(np.asarray(spec.frames_per_token), size=len(y_b))
    rows = np.repeat(np.asarray(y_b) - FIRST_CONTENT, counts)
    return book[rows] + sigma * rng.normal(size=(len(rows), spec.feat_dim))


def raw_dataset(spec: TaskSpec, n: int, seed: int) -> list[tuple]:
    """Unnormalised ``(uid, x, y_b, y_c)`` tuples, fully determined by ``(spec, seed)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    perm = permutation(spec)
    out = []
    for i in range(n):
        rng = example_rng(seed, i)
        y_b = to_units(sample_words(spec, rng), spec)
        x = featurize(y_b, spec, rng)
        out.append((f"{spec.domain}-{seed}-{i:06d}", x, y_b, transform(to_words(y_b, spec), perm)))
    return out


def _normalise(raw, norm) -> list[SyntheticExample]:
    mean, std = norm
    return [SyntheticExample(uid, ((x - mean) / std).astype(np.float32), y_b, y_c) for uid, x, y_b, y_c in raw]


def gen_dataset(spec: TaskSpec, n: int, seed: int, norm=None) -> list[SyntheticExample]:
    """``n`` examples, fully determined by ``(spec, seed)``.

    Features are standardised per dimension with ``norm = (mean, std)``; when
    omitted the statistics of this dataset are used.
    """
    raw = raw_dataset(spec, n, seed)
    if norm is None:
        norm = feature_stats([x for _, x, _, _ in raw])
    return _normalise(raw, norm)


SPLIT_OFFSETS = {"train": 1, "dev": 2, "test": 3, "test_shift": 4, "lm_shift": 5}


def split_seed(seed: int, split: str) -> int:
    return 10 * seed + SPLIT_OFFSETS[split]


def gen_splits(spec: TaskSpec, seed: int, n_train: int = 2000, n_dev: int = 200, n_test: int = 200,
               domain_shift: bool = False, shift_offset: int = 1000) -> dict:
    """train/dev/test splits standardised with the train statistics.

    With ``domain_shift`` two more splits come from ``spec.shifted()``:
    ``test_shift`` (same size as test) and ``lm_shift`` (same size as train,
    a text source for an in-domain language model).
    """
    sizes = {"train": n_train, "dev": n_dev, "test": n_test}
    raw = {name: raw_dataset(spec, n, split_seed(seed, name)) for name, n in sizes.items()}
    if domain_shift:
        shifted = spec.shifted(shift_offset)
        raw["test_shift"] = raw_dataset(shifted, n_test, split_seed(seed, "test_shift"))
        raw["lm_shift"] = raw_dataset(shifted, n_train, split_seed(seed, "lm_shift"))
    norm = feature_stats([x for _, x, _, _ in raw["train"]])
    return {name: _normalise(r, norm) for name, r in raw.items()}


def feature_stats(frames) -> tuple[np.ndarray, np.ndarray]:
    allx = np.concatenate(frames, axis=0)
    std = allx.std(axis=0)
    return allx.mean(axis=0), np.where(std > 0, std, 1.0)


def validate_dataset(examples, spec: TaskSpec) -> None:
    for ex in examples:
        if not ex.y_b:
            raise ValueError(f"{ex.uid}: empty intermediate sequence")
        if list(ex.y_c) != target_of(ex.y_b, spec):
            raise ValueError(f"{ex.uid}: target is not transform(intermediate)")
        if ex.x.shape[1] != spec.feat_dim:
            raise ValueError(f"{ex.uid}: feature dim {ex.x.shape[1]} != {spec.feat_dim}")


def estimate_transitions(examples, spec: TaskSpec) -> np.ndarray:
    """Empirical word-level transition matrix (rows with no data stay zero)."""
    K = spec.n_content
    counts = np.zeros((K, K))
    for ex in examples:
        w = np.asarray(to_words(ex.y_b, spec)) - FIRST_CONTENT
        np.add.at(counts, (w[:-1], w[1:]), 1)
    rows = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)


def spec_mask(x: np.ndarray, time_masks: int, feat_masks: int, widths: tuple[int, int],
              rng: np.random.Generator) -> np.ndarray:
    """SpecAugment-style band masking on a copy of ``x`` (T, f).

    Each mask draws a width uniformly from ``[0, W]`` and a start uniformly
    from ``[0, dim - width]``; the band is set to zero.
    """
    wt, wf = widths
    n, f = x.shape
    if (time_masks and wt >= n) or (feat_masks and wf >= f):
        raise ValueError(f"mask widths {widths} must be smaller than the input dims {x.shape}")
    out = x.copy()
    for _ in range(time_masks):
        w = int(rng.integers(0, wt + 1))
        s = int(rng.integers(0, n - w + 1))
        out[s:s + w, :] = 0
    for _ in range(feat_masks):
        w = int(rng.integers(0, wf + 1))
        s = int(rng.integers(0, f - w + 1))
        out[:, s:s + w] = 0
    return out


# --- binary file format -------------------------------------------------------
# little-endian throughout:
#   magic "MDDS" | u32 version | u32 len + utf8 TaskSpec text | u32 count |
#   count x [u16 len + utf8 id | u32 T | u32 f | u32 L_B | u32 L_C |
#            f32[T*f] features | i32[L_B] | i32[L_C]] | u32 crc32(all previous bytes)

def dataset_bytes(examples, spec: TaskSpec) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    spec_text = config.to_text(spec).encode()
    buf.write(struct.pack("<I", len(spec_text)))
    buf.write(spec_text)
    buf.write(struct.pack("<I", len(examples)))
    for ex in examples:
        uid = ex.uid.encode()
        x = np.ascontiguousarray(ex.x, dtype="<f4")
        buf.write(struct.pack("<H", len(uid)))
        buf.write(uid)
        buf.write(struct.pack("<IIII", x.shape[0], x.shape[1], len(ex.y_b), len(ex.y_c)))
        buf.write(x.tobytes())
        buf.write(np.asarray(ex.y_b, dtype="<i4").tobytes())
        buf.write(np.asarray(ex.y_c, dtype="<i4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def write_dataset(path, examples, spec: TaskSpec) -> None:
    Path(path).write_bytes(dataset_bytes(examples, spec))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0
        self.end = len(raw) - 4  # trailing checksum

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise ChecksumError(
                f"dataset truncated: need bytes up to offset {self.pos + n}, "
                f"data ends at byte offset {max(self.end, 0)}",
                offset=max(self.end, 0),
            )
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _check_crc(raw: bytes) -> None:
    end = len(raw) - 4
    (stored,) = struct.unpack("<I", raw[end:])
    actual = zlib.crc32(raw[:end])
    if stored != actual:
        raise ChecksumError(f"checksum mismatch at byte offset {end}: stored {stored:#010x}, computed {actual:#010x}",
                            offset=end)


def parse_dataset(raw: bytes) -> tuple[TaskSpec, list[SyntheticExample]]:
    if raw[:4] != MAGIC:
        raise DatasetFormatError(f"not a dataset file (magic {raw[:4]!r})")
    r = _Reader(raw)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} (expected {VERSION})")
    try:
        (n_spec,) = r.unpack("<I")
        spec = config.from_text(TaskSpec, r.take(n_spec).decode())
        (count,) = r.unpack("<I")
        examples = []
        for _ in range(count):
            (n_uid,) = r.unpack("<H")
            uid = r.take(n_uid).decode()
            n, f, lb, lc = r.unpack("<IIII")
            x = np.frombuffer(r.take(4 * n * f), dtype="<f4").reshape(n, f).astype(np.float32)
            y_b = np.frombuffer(r.take(4 * lb), dtype="<i4").tolist()
            y_c = np.frombuffer(r.take(4 * lc), dtype="<i4").tolist()
            examples.append(SyntheticExample(uid, x, y_b, y_c))
    except ChecksumError:
        raise
    except (ValueError, UnicodeDecodeError) as exc:
        # a corrupted byte can break decoding before the checksum is reached
        _check_crc(raw)
        raise DatasetFormatError(f"malformed dataset near byte offset {r.pos}: {exc}") from None
    if r.pos != r.end:
        _check_crc(raw)
        raise ChecksumError(f"unexpected trailing data at byte offset {r.pos}", offset=r.pos)
    _check_crc(raw)
    return spec, examples


def read_dataset(path) -> tuple[TaskSpec, list[SyntheticExample]]:
    return parse_dataset(Path(path).read_bytes())
