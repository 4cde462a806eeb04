"""WER with S/I/D breakdown, corpus BLEU over token ids, WER-bucketed reports."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels

# WER bucket edges in percent: [0, 40), [40, 80), [80, inf)
BUCKETS = (("<40%", 0.0, 40.0), ("[40,80)%", 40.0, 80.0), (">=80%", 80.0, math.inf))


@dataclass(frozen=True)
class EditOps:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(ref, hyp) -> EditOps:
    """Unit-cost Levenshtein distance, decomposed by backtrace.

    Ties in the backtrace prefer match/substitution, then deletion, then
    insertion.
    """
    r = np.ascontiguousarray(ref, dtype=np.int64)
    h = np.ascontiguousarray(hyp, dtype=np.int64)
    return EditOps(*kernels.edit_distance_ops(r, h))


def wer(ref, hyp) -> float:
    """Utterance WER in percent. Empty references are rejected."""
    if len(ref) == 0:
        raise ValueError("WER is undefined for an empty reference")
    return 100.0 * edit_distance(ref, hyp).distance / len(ref)


def corpus_wer(refs, hyps) -> dict:
    """Corpus WER (percent) plus substitution/insertion/deletion totals."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps differ in length")
    tot = Counter()
    n = 0
    for r, h in zip(refs, hyps):
        if len(r) == 0:
            raise ValueError("WER is undefined for an empty reference")
        ops = edit_distance(r, h)
        tot.update(dist=ops.distance, sub=ops.substitutions, ins=ops.insertions, dele=ops.deletions)
        n += len(r)
    return {
        "wer": 100.0 * tot["dist"] / n,
        "sub": tot["sub"],
        "ins": tot["ins"],
        "del": tot["dele"],
        "ref_tokens": n,
    }


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu_stats(refs, hyps, max_n: int = 4):
    """Corpus-level clipped n-gram matches/totals and lengths."""
    match = [0] * max_n
    total = [0] * max_n
    ref_len = hyp_len = 0
    for ref, hyp in zip(refs, hyps):
        ref, hyp = list(ref), list(hyp)
        ref_len += len(ref)
        hyp_len += len(hyp)
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            match[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    return match, total, ref_len, hyp_len


def corpus_bleu(refs, hyps, max_n: int = 4) -> float:
    """Single-reference corpus BLEU in [0, 100].

    Smoothing: for n >= 2, a zero precision is replaced by add-one
    ``(m + 1) / (t + 1)``; a zero unigram precision gives BLEU 0.
    """
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps differ in length")
    if not refs:
        raise ValueError("BLEU of an empty corpus")
    match, total, ref_len, hyp_len = bleu_stats(refs, hyps, max_n)
    if hyp_len == 0 or match[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = match[n], total[n]
        if n > 0 and m == 0:
            m, t = m + 1, t + 1
        log_p += math.log(m / t) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def bucket_of(wer_percent: float) -> str:
    for name, lo, hi in BUCKETS:
        if lo <= wer_percent < hi:
            return name
    raise ValueError(f"invalid WER {wer_percent}")


def bucketed_report(per_utt_wer, per_utt_pairs) -> dict:
    """Corpus BLEU inside each WER bucket.

    ``per_utt_pairs`` holds ``(ref, hyp)`` target sequences aligned with
    ``per_utt_wer``. Empty buckets are absent from the result.
    """
    if len(per_utt_wer) != len(per_utt_pairs):
        raise ValueError("WER list and pair list are not aligned")
    groups: dict[str, list] = {}
    for w, pair in zip(per_utt_wer, per_utt_pairs):
        groups.setdefault(bucket_of(w), []).append(pair)
    out = {}
    for name, _, _ in BUCKETS:
        if name in groups:
            refs = [r for r, _ in groups[name]]
            hyps = [h for _, h in groups[name]]
            out[name] = {"count": len(refs), "bleu": corpus_bleu(refs, hyps)}
    return out


def format_report(fields: dict) -> str:
    """Render nested ``{block: {key: value}}`` as ``[block]`` + ``key=value`` lines."""
    lines = []
    for block, values in fields.items():
        lines.append(f"[{block}]")
        for k, v in values.items():
            lines.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
        lines.append("")
    return "\n".join(lines)


def parse_report(text: str) -> dict:
    out: dict = {}
    block = None
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            block = line[1:-1]
            out[block] = {}
            continue
        k, _, v = line.partition("=")
        out[block][k] = _coerce(v)
    return out


def _coerce(v: str):
    for kind in (int, float):
        try:
            return kind(v)
        except ValueError:
            pass
    return v
