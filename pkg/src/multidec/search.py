"""Greedy and beam decoding with fused scoring, and the two-stage pipeline.

Scores are natural-log probabilities. At each step a hypothesis ``g`` is
extended by every candidate ``c`` (content tokens plus eos) with

    (1 - ctc_weight) * log P_attn(c | g) + ctc_weight * ctc_increment(g, c)
        + lm_weight * log P_lm(c | g)

The length penalty is additive and by default only used for the final
ranking: ``rank = score + alpha * n`` where ``n`` counts output tokens
including eos. ``penalty_in_pruning`` also applies it while pruning; every
expansion of one synchronous step has the same length, so both settings
select the same hypotheses.
Every ordering breaks equal scores by the lexicographically smaller token
tuple.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ctc import CtcPrefixScorer
from .models import Memory, Seq2SeqModel, make_batch
from .tensor import Tensor
from .tokens import BLANK, EOS, FIRST_CONTENT, PAD, SOS


@dataclass
class BeamHypothesis:
    tokens: tuple
    score: float
    states: list = field(default_factory=list)
    scorer_states: dict = field(default_factory=dict)

    @property
    def finished(self) -> bool:
        return self.tokens[-1] == EOS

    @property
    def content(self) -> list[int]:
        return [int(t) for t in self.tokens[1:] if t != EOS]

    def rank(self, alpha: float) -> float:
        return self.score + alpha * (len(self.tokens) - 1)

    def states_array(self) -> np.ndarray:
        return np.stack(self.states) if self.states else np.zeros((0, 0))


@dataclass(frozen=True)
class FusionWeights:
    ctc_weight: float = 0.3
    lm_weight: float = 0.2
    length_penalty: float = 0.0
    max_len_ratio: float = 1.0
    penalty_in_pruning: bool = False

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError(f"ctc_weight: must lie in [0, 1], got {self.ctc_weight}")
        if self.lm_weight < 0:
            raise ValueError(f"lm_weight: must be >= 0, got {self.lm_weight}")
        if self.max_len_ratio <= 0:
            raise ValueError(f"max_len_ratio: must be > 0, got {self.max_len_ratio}")


NO_FUSION = FusionWeights(ctc_weight=0.0, lm_weight=0.0)


@dataclass
class SearchResult:
    nbest: list
    truncated: bool
    alpha: float

    @property
    def best(self) -> BeamHypothesis:
        return self.nbest[0]

    @property
    def tokens(self) -> list[int]:
        return self.best.content

    @property
    def score(self) -> float:
        return self.best.rank(self.alpha)


def candidates_for(vocab: int) -> np.ndarray:
    """Tokens a decoder may emit: eos and every content id, ascending."""
    return np.array([EOS] + list(range(FIRST_CONTENT, vocab)), dtype=np.int64)


def max_steps_for(ratio: float, length: int) -> int:
    return max(1, math.ceil(ratio * length))


def _sort_key(h: BeamHypothesis, alpha: float):
    return (-h.rank(alpha), h.tokens)


def beam_search(step, beam: int, max_steps: int, cands, alpha: float = 0.0,
                ctc: CtcPrefixScorer | None = None, ctc_weight: float = 0.0,
                lm=None, lm_weight: float = 0.0, nbest: int = 1,
                penalty_in_pruning: bool = False) -> SearchResult:
    """Generic synchronous beam search.

    ``step(prefixes)`` maps an (n, l) array of sos-initial prefixes to
    ``((n, V) log-probs, (n, d) states or None)``. ``lm(prefixes)`` returns
    (n, V) log-probs. Expansions ending in eos retire to the finished set
    when they rank inside the top ``beam``; the active beam is refilled with
    the best ``beam`` non-eos expansions.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    if nbest < 1:
        raise ValueError(f"nbest must be >= 1, got {nbest}")
    cands = np.asarray(cands, dtype=np.int64)
    cand_list = [int(c) for c in cands]
    attn_w = 1.0 - ctc_weight if ctc is not None else 1.0
    root = BeamHypothesis((SOS,), 0.0, [], {"ctc": ctc.initial_state()} if ctc is not None else {})
    active = [root]
    finished: list[BeamHypothesis] = []
    for _ in range(max_steps):
        prefixes = np.array([h.tokens for h in active], dtype=np.int64)
        logp, states = step(prefixes)
        fused = attn_w * logp[:, cands].astype(np.float64)
        if lm is not None and lm_weight:
            fused += lm_weight * np.asarray(lm(prefixes), dtype=np.float64)[:, cands]
        ctc_next = [None] * len(active)
        if ctc is not None:
            for i, h in enumerate(active):
                inc, ctc_next[i] = ctc.extend(h.scorer_states["ctc"], cands)
                fused[i] += ctc_weight * inc
        total = np.array([h.score for h in active])[:, None] + fused

        # only the best 2 * beam expansions (plus ties) can matter: at most
        # ``beam`` of them end in eos
        flat = total.ravel()
        order = flat + alpha * len(active[0].tokens) if penalty_in_pruning else flat
        keep = min(2 * beam, flat.size)
        cut = np.partition(order, flat.size - keep)[flat.size - keep]
        idx = np.flatnonzero((order >= cut) & np.isfinite(flat))
        pool = sorted(
            ((-order[k], active[k // len(cands)].tokens + (cand_list[k % len(cands)],), k) for k in idx),
            key=lambda e: (e[0], e[1]),
        )
        new_active = []
        for rank, (_, toks, k) in enumerate(pool):
            i, j = divmod(int(k), len(cands))
            parent = active[i]
            hyp = BeamHypothesis(
                toks,
                float(flat[k]),
                parent.states + ([states[i]] if states is not None else []),
                {"ctc": ctc_next[i][j]} if ctc is not None else {},
            )
            if toks[-1] == EOS:
                if rank < beam:
                    finished.append(hyp)
            elif len(new_active) < beam:
                new_active.append(hyp)
            if rank + 1 >= beam and len(new_active) >= beam:
                break
        active = new_active
        if not active:
            break
        if finished:
            best_done = max(h.rank(alpha) for h in finished)
            best_open = max(h.score for h in active) + alpha * max_steps
            if best_done > best_open:
                break
    if finished:
        ranked = sorted(finished, key=lambda h: _sort_key(h, alpha))
        return SearchResult(ranked[:nbest], False, alpha)
    ranked = sorted(active, key=lambda h: _sort_key(h, alpha))
    return SearchResult(ranked[:nbest], True, alpha)


def greedy(step, max_steps: int, cands) -> SearchResult:
    """Argmax decoding over ``cands`` (ties go to the smaller token id)."""
    cands = np.asarray(cands, dtype=np.int64)
    toks = [SOS]
    states = []
    score = 0.0
    for _ in range(max_steps):
        logp, st = step(np.array([toks], dtype=np.int64))
        row = logp[0, cands]
        j = int(np.argmax(row))
        toks.append(int(cands[j]))
        score += float(row[j])
        if st is not None:
            states.append(st[0])
        if toks[-1] == EOS:
            break
    hyp = BeamHypothesis(tuple(toks), score, states)
    return SearchResult([hyp], not hyp.finished, 0.0)


# --- model-bound stages ---------------------------------------------------------


def asr_step(model: Seq2SeqModel, speech: Memory):
    def step(prefixes):
        with T.no_grad():
            return model.decode_step_asr(speech, prefixes)
    return step


def st_step(model: Seq2SeqModel, st_mem: Memory, speech: Memory | None):
    sp = speech if model.arch == "multidec_sa" else None

    def step(prefixes):
        with T.no_grad():
            return model.decode_step_st(st_mem, sp, prefixes), None
    return step


def encode(model: Seq2SeqModel, x: np.ndarray) -> Memory:
    with T.no_grad():
        return model.encode_speech(np.asarray(x, dtype=T.get_default_dtype())[None], [len(x)])


def beam_search_intermediates(model: Seq2SeqModel, x, beam: int, fusion: FusionWeights = NO_FUSION,
                              ext_lm=None, use_ctc: bool = False, nbest: int = 1,
                              speech: Memory | None = None) -> SearchResult:
    """Stage one: search the ASR decoder, keeping each hypothesis' hidden states.

    CTC fusion is active only with ``use_ctc``; LM fusion only when ``ext_lm``
    is given. Requesting an LM weight without an LM is the caller's error.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    model.eval()
    speech = speech if speech is not None else encode(model, x)
    n_frames = int(speech.lengths[0])
    ctc = None
    if use_ctc:
        with T.no_grad():
            table = model.ctc_logp(speech).data[0, :n_frames]
        ctc = CtcPrefixScorer(table, BLANK, EOS)
    lm = None
    if ext_lm is not None:
        if ext_lm.vocab != model.config.vocab_b:
            raise ValueError(f"LM vocabulary {ext_lm.vocab} differs from the intermediate vocabulary {model.config.vocab_b}")
        lm = ext_lm.score_step
    res = beam_search(
        asr_step(model, speech),
        beam,
        max_steps_for(fusion.max_len_ratio, n_frames),
        candidates_for(model.config.vocab_b),
        alpha=fusion.length_penalty,
        ctc=ctc,
        ctc_weight=fusion.ctc_weight if use_ctc else 0.0,
        lm=lm,
        lm_weight=fusion.lm_weight if lm is not None else 0.0,
        nbest=nbest,
        penalty_in_pruning=fusion.penalty_in_pruning,
    )
    for hyp in res.nbest:
        hyp.states = teacher_forced_states(model, speech, hyp.tokens)
    return res


def teacher_forced_states(model: Seq2SeqModel, speech: Memory, tokens) -> list:
    """ASR decoder states for every input position of ``tokens`` in one pass.

    Incremental search reduces over other shapes, so its states can differ in
    the last bits; the states handed onward come from this pass, which matches
    the oracle path exactly.
    """
    with T.no_grad():
        states = model.asr_states(speech, np.array([tokens[:-1]], dtype=np.int64)).data[0]
    return list(states)


def st_memory(model: Seq2SeqModel, states: np.ndarray) -> Memory:
    """ST encoder output over one utterance's (L, d) hidden intermediates."""
    with T.no_grad():
        return model.encode_intermediates(Tensor(np.asarray(states)[None]), [len(states)])


def beam_search_final(model: Seq2SeqModel, st_mem: Memory, speech: Memory | None, beam: int,
                      alpha: float = 0.2, max_len_ratio: float = 1.0, nbest: int = 1) -> SearchResult:
    """Stage two: attention-only beam search of the ST decoder."""
    model.eval()
    if model.arch == "multidec_sa" and speech is None:
        raise ValueError("multidec_sa decoding needs the speech memory")
    return beam_search(
        st_step(model, st_mem, speech),
        beam,
        max_steps_for(max_len_ratio, int(st_mem.lengths[0])),
        candidates_for(model.config.vocab_c),
        alpha=alpha,
        nbest=nbest,
    )


@dataclass
class DecodeConfig:
    beam_asr: int = 16
    beam_st: int = 10
    ctc_weight: float = 0.0
    lm_weight: float = 0.0
    length_penalty_asr: float = 0.0
    length_penalty_st: float = 0.2
    max_len_ratio_asr: float = 1.0
    max_len_ratio_st: float = 1.0
    nbest: int = 1
    oracle: bool = False
    workers: int = 1

    def __post_init__(self):
        for name in ("beam_asr", "beam_st", "nbest", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.nbest > self.beam_asr:
            raise ValueError(f"nbest ({self.nbest}) cannot exceed beam_asr ({self.beam_asr})")
        self.fusion()

    def fusion(self) -> FusionWeights:
        return FusionWeights(self.ctc_weight, self.lm_weight, self.length_penalty_asr, self.max_len_ratio_asr)


@dataclass
class PipelineResult:
    y_b: list
    y_c: list
    asr_score: float
    st_score: float
    states: np.ndarray
    diagnostics: dict

    @property
    def score(self) -> float:
        return self.asr_score + self.st_score


def _second_stage(model, stage1: BeamHypothesis, speech, cfg: DecodeConfig) -> SearchResult:
    if model.is_multidec:
        mem = st_memory(model, stage1.states_array())
        return beam_search_final(model, mem, speech, cfg.beam_st, cfg.length_penalty_st, cfg.max_len_ratio_st)
    return beam_search_final(model, speech, None, cfg.beam_st, cfg.length_penalty_st, cfg.max_len_ratio_st)


def _result(model, hyp, s1: SearchResult, s2: SearchResult, extra=None) -> PipelineResult:
    diag = {
        "asr_tokens": list(hyp.tokens),
        "asr_truncated": s1.truncated,
        "st_truncated": s2.truncated,
        "n_states": len(hyp.states),
    }
    diag.update(extra or {})
    return PipelineResult(hyp.content, s2.tokens, hyp.rank(s1.alpha), s2.score, hyp.states_array(), diag)


def decode_pipeline(model: Seq2SeqModel, x, cfg: DecodeConfig | None = None, ext_lm=None,
                    use_ctc: bool | None = None) -> PipelineResult:
    """Stage one search, its winning states into the ST encoder, stage two search.

    For the baseline architecture stage two decodes straight from speech and
    stage one only supplies the transcript.
    """
    cfg = cfg or DecodeConfig()
    return nbest_pipeline(model, x, cfg.nbest, cfg, ext_lm, use_ctc)


def nbest_pipeline(model: Seq2SeqModel, x, n: int, cfg: DecodeConfig | None = None, ext_lm=None,
                   use_ctc: bool | None = None) -> PipelineResult:
    """Run stage two on each of the ``n`` best intermediates and keep the
    output maximising ``asr_score + st_score`` (earlier n-best rank wins ties)."""
    cfg = cfg or DecodeConfig()
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n > cfg.beam_asr:
        raise ValueError(f"n ({n}) cannot exceed beam_asr ({cfg.beam_asr})")
    use_ctc = cfg.ctc_weight > 0 if use_ctc is None else use_ctc
    speech = encode(model, x)
    s1 = beam_search_intermediates(model, x, cfg.beam_asr, cfg.fusion(), ext_lm, use_ctc, n, speech)
    best = None
    for rank, hyp in enumerate(s1.nbest if model.is_multidec else s1.nbest[:1]):
        s2 = _second_stage(model, hyp, speech, cfg)
        res = _result(model, hyp, s1, s2, {"nbest_rank": rank})
        if best is None or res.score > best.score:
            best = res
    return best


def decode_oracle(model: Seq2SeqModel, x, y_b, cfg: DecodeConfig | None = None) -> PipelineResult:
    """Stage two over hidden states teacher-forced on the true intermediate."""
    cfg = cfg or DecodeConfig()
    model.eval()
    with T.no_grad():
        states, mem, speech = model.forward_oracle(np.asarray(x, dtype=T.get_default_dtype()), y_b)
    s2 = beam_search_final(model, mem, speech, cfg.beam_st, cfg.length_penalty_st, cfg.max_len_ratio_st)
    hyp = BeamHypothesis((SOS, *[int(t) for t in y_b], EOS), 0.0, list(states.data[0]))
    return _result(model, hyp, SearchResult([hyp], False, 0.0), s2, {"oracle": True})


def greedy_pipeline(model: Seq2SeqModel, x) -> PipelineResult:
    """Per-utterance greedy reference for both stages."""
    model.eval()
    speech = encode(model, x)
    n_frames = int(speech.lengths[0])
    s1 = greedy(asr_step(model, speech), max_steps_for(1.0, n_frames), candidates_for(model.config.vocab_b))
    hyp = s1.best
    if model.is_multidec:
        mem = st_memory(model, hyp.states_array())
    else:
        mem = speech
    s2 = greedy(st_step(model, mem, speech), max_steps_for(1.0, int(mem.lengths[0])), candidates_for(model.config.vocab_c))
    return _result(model, hyp, s1, s2)


def decode_corpus(model: Seq2SeqModel, examples, cfg: DecodeConfig | None = None, ext_lm=None) -> list[PipelineResult]:
    """Decode every example; ``cfg.workers`` threads share the frozen model.
    Results come back in input order."""
    cfg = cfg or DecodeConfig()
    model.eval()

    def one(ex):
        if cfg.oracle:
            return decode_oracle(model, ex.x, ex.y_b, cfg)
        return decode_pipeline(model, ex.x, cfg, ext_lm)

    if cfg.workers == 1:
        return [one(ex) for ex in examples]
    with ThreadPoolExecutor(cfg.workers) as pool:
        return list(pool.map(one, examples))


# --- batched greedy (dev-set monitoring) -------------------------------------------


def _greedy_rows(logp_fn, n: int, limits: np.ndarray, cands: np.ndarray):
    """Batched argmax decoding; returns per-row tokens and per-row states."""
    prefixes = np.full((n, 1), SOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    outs = [[] for _ in range(n)]
    states = [[] for _ in range(n)]
    for step in range(int(limits.max())):
        lp, st = logp_fn(prefixes)
        pick = cands[np.argmax(lp[:, cands], axis=1)]
        col = np.full(n, PAD, dtype=np.int64)
        for i in np.flatnonzero(~done):
            if st is not None:
                states[i].append(st[i])
            outs[i].append(int(pick[i]))
            col[i] = pick[i]
            if pick[i] == EOS or len(outs[i]) >= limits[i]:
                done[i] = True
        if done.all():
            break
        prefixes = np.concatenate([prefixes, col[:, None]], axis=1)
    return outs, states


def greedy_batch(model: Seq2SeqModel, examples, batch_size: int = 100) -> tuple[list, list]:
    """Greedy intermediate and target sequences (content tokens) for a corpus."""
    model.eval()
    y_bs, y_cs = [], []
    cb = candidates_for(model.config.vocab_b)
    cc = candidates_for(model.config.vocab_c)
    for s in range(0, len(examples), batch_size):
        chunk = examples[s : s + batch_size]
        batch = make_batch([e.x for e in chunk], [e.y_b for e in chunk], [e.y_c for e in chunk])
        with T.no_grad():
            speech = model.encode_speech(batch.x, batch.x_lens)
            n = batch.size

            def asr(prefixes):
                st = model.asr_states(speech, prefixes)[:, -1]
                return model.dec_asr.logp(st).data, st.data

            outs_b, states = _greedy_rows(asr, n, np.ceil(speech.lengths).astype(int), cb)
            if model.is_multidec:
                lens = np.array([len(s) for s in states])
                h = np.zeros((n, lens.max(), model.config.d), dtype=speech.h.dtype)
                for i, s_i in enumerate(states):
                    h[i, : len(s_i)] = np.stack(s_i)
                mem = model.encode_intermediates(Tensor(h), lens)
            else:
                mem = speech
            sp = speech if model.arch == "multidec_sa" else None

            def st(prefixes):
                return model.st_logp(prefixes, mem, sp)[:, -1].data, None

            outs_c, _ = _greedy_rows(st, n, mem.lengths.astype(int), cc)
        y_bs += [[t for t in o if t != EOS] for o in outs_b]
        y_cs += [[t for t in o if t != EOS] for o in outs_c]
    return y_bs, y_cs
