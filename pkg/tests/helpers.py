"""Finite-difference gradient oracle and tiny model factories shared by tests."""

from __future__ import annotations

import numpy as np

from multidec import tensor as T
from multidec.models import ModelConfig, Seq2SeqModel


# Central differences of a summed loss carry ~1e-10 of absolute rounding noise
# at h=1e-5, so gradient entries below this floor are compared absolutely
# (|a - n| <= tol * FD_FLOOR). Example: the attention key bias, whose true
# gradient is exactly zero.
FD_FLOOR = 1e-5


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a - b| / max(|a|, |b|, FD_FLOOR)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), FD_FLOOR)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numeric_grad(fn, arr: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` (mutated in place, restored)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_grads(loss_fn, tensors, h: float = 1e-5, coords_per_tensor=None, rng=None) -> float:
    """Worst relative error between backward() and central differences.

    ``loss_fn()`` must rebuild the graph from the current tensor data and
    return a scalar Tensor. With ``coords_per_tensor`` only that many random
    coordinates of each tensor are probed.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad.copy() for t in tensors]

    def value():
        with T.no_grad():
            return float(loss_fn().data)

    worst = 0.0
    for t, g in zip(tensors, analytic):
        coords = None
        if coords_per_tensor is not None and t.data.size > coords_per_tensor:
            coords = (rng or np.random.default_rng(0)).choice(t.data.size, coords_per_tensor, replace=False)
        num = numeric_grad(value, t.data, h, coords)
        if coords is not None:
            worst = max(worst, rel_error(g.reshape(-1)[coords], num.reshape(-1)[coords]))
        else:
            worst = max(worst, rel_error(g, num))
    return worst


def directional_check(loss_fn, tensors, rng, h: float = 1e-5) -> float:
    """Relative error of <grad, v> against the central difference along random v."""
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    vs = [rng.normal(size=t.shape) for t in tensors]
    analytic = sum(float((t.grad * v).sum()) for t, v in zip(tensors, vs))

    def at(step):
        for t, v in zip(tensors, vs):
            t.data += step * v
        with T.no_grad():
            out = float(loss_fn().data)
        for t, v in zip(tensors, vs):
            t.data -= step * v
        return out

    numeric = (at(h) - at(-h)) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FD_FLOOR)


def tiny_config(arch: str = "multidec", seed: int = 0, vocab: int = 7, feat_dim: int = 3, **kw) -> ModelConfig:
    base = dict(arch=arch, feat_dim=feat_dim, d=8, heads=2, ffn_dim=16, enc_asr_layers=1, dec_asr_layers=1,
                enc_st_layers=1, dec_st_layers=1, vocab_b=vocab, vocab_c=vocab, seed=seed,
                dropout={"attn": 0.0, "ffn": 0.0, "resid": 0.0})
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(arch: str = "multidec", seed: int = 0, **kw) -> Seq2SeqModel:
    return Seq2SeqModel(tiny_config(arch, seed, **kw))
