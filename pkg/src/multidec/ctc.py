"""CTC loss for joint training and CTC prefix scoring for beam search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import Tensor


class CtcInfeasibleError(ValueError):
    def __init__(self, n_frames: int, n_labels: int, required: int):
        super().__init__(
            f"CTC infeasible: {n_labels} labels need at least {required} frames "
            f"(labels + adjacent repeats), got T={n_frames}"
        )
        self.n_frames = n_frames
        self.n_labels = n_labels


def required_frames(labels) -> int:
    """Minimum T for an alignment: one frame per label plus a blank between repeats."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def check_feasible(n_frames: int, labels) -> None:
    need = required_frames(labels)
    if n_frames < need:
        raise CtcInfeasibleError(n_frames, len(labels), need)


def ctc_nll(logp: np.ndarray, labels, blank: int) -> tuple[float, np.ndarray]:
    """NLL of ``labels`` under a (T, V) log-prob table, with its gradient."""
    check_feasible(logp.shape[0], labels)
    lp = np.ascontiguousarray(logp, dtype=np.float64)
    lab = np.ascontiguousarray(labels, dtype=np.int64)
    return kernels.ctc_forward_backward(lp, lab, int(blank))


def ctc_loss(table: Tensor, labels, blank: int, lengths=None) -> Tensor:
    """Per-utterance CTC negative log-likelihood.

    ``table`` holds normalised log-probabilities, either (T, V) for a single
    utterance (returns a scalar) or (B, T, V) with ``lengths`` giving each
    utterance's valid frame count (returns shape (B,)). ``labels`` is a label
    sequence, or a list of them for the batched form.
    """
    single = table.ndim == 2
    data = table.data[None] if single else table.data
    if single:
        labels = [labels]
    B, n, _ = data.shape
    lengths = [n] * B if lengths is None else list(lengths)
    losses = np.zeros(B, dtype=data.dtype)
    grads = np.zeros(data.shape, dtype=data.dtype)
    for b in range(B):
        nll, g = ctc_nll(data[b, : lengths[b]], labels[b], blank)
        losses[b] = nll
        grads[b, : lengths[b]] = g

    if single:
        return T.custom_op(losses[0], (table,), lambda g: (g * grads[0],), "ctc_loss")
    return T.custom_op(losses, (table,), lambda g: (g[:, None, None] * grads,), "ctc_loss")


@dataclass
class CtcPrefixState:
    """Forward variables of one prefix: r[t] = (non-blank ending, blank ending)."""

    r: np.ndarray
    log_psi: float
    last: int | None


class CtcPrefixScorer:
    """Incremental CTC prefix probabilities over a fixed (T, V) log-prob table.

    The increment for appending token c to prefix g is
    ``log P(g c ...) - log P(g ...)``; for ``eos`` it is
    ``log P(g) - log P(g ...)``, so summing increments along a full sequence
    ending in eos gives ``log P(sequence)``, i.e. minus the CTC loss.
    """

    def __init__(self, logp: np.ndarray, blank: int, eos: int):
        self.logp = np.ascontiguousarray(logp, dtype=np.float64)
        self.blank = int(blank)
        self.eos = int(eos)

    def initial_state(self) -> CtcPrefixState:
        r = np.full((self.logp.shape[0], 2), -np.inf)
        r[:, 1] = np.cumsum(self.logp[:, self.blank])
        return CtcPrefixState(r, 0.0, None)

    def extend(self, state: CtcPrefixState, cands) -> tuple[np.ndarray, list]:
        cands = np.asarray(cands, dtype=np.int64)
        if np.any(cands == self.blank):
            raise ValueError("blank is not an output token")
        out = np.zeros(len(cands))
        states: list = [None] * len(cands)
        is_eos = cands == self.eos
        if is_eos.any():
            out[is_eos] = np.logaddexp(state.r[-1, 0], state.r[-1, 1]) - state.log_psi
        real = np.flatnonzero(~is_eos)
        if len(real):
            last = -1 if state.last is None else state.last
            r, psi = kernels.ctc_prefix_extend(
                self.logp, state.r, last, np.ascontiguousarray(cands[real]), self.blank, state.last is None
            )
            for j, i in enumerate(real):
                states[i] = CtcPrefixState(r[j], float(psi[j]), int(cands[i]))
                out[i] = psi[j] - state.log_psi
        # an impossible prefix stays impossible
        out[np.isnan(out)] = -np.inf
        return out, states

    def state_for(self, prefix) -> CtcPrefixState:
        state = self.initial_state()
        for tok in prefix:
            _, (state,) = self.extend(state, [tok])
        return state


def ctc_prefix_score(table: np.ndarray, prefix, candidate: int, blank: int, eos: int) -> float:
    """Log-prob increment of ``candidate`` after ``prefix`` (content tokens, no sos)."""
    scorer = CtcPrefixScorer(table, blank, eos)
    inc, _ = scorer.extend(scorer.state_for(prefix), [candidate])
    return float(inc[0])
