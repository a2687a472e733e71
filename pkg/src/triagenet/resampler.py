"""Temporal sampling: uniform pre-sampling and key-expression re-sampling.

Two forms of the key-expression sampler share one set of centres
``c_k = T*mu + (k - (n_out - 1)/2) * delta``:

* :func:`key_indices` rounds and clamps them to frame indices (inference);
* :func:`soft_resample` puts a normalised Gaussian kernel on each centre so
  the main loss can reach ``mu`` and ``delta`` (training).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class ResampleParams:
    mu: float
    delta: float
    n_out: int
    T: int

    def __post_init__(self):
        if self.n_out < 1 or self.T < 1:
            raise ValueError(f"need n_out >= 1 and T >= 1, got n_out={self.n_out}, T={self.T}")


def uniform_indices(T: int, n_u: int, allow_repeat: bool = False) -> list[int]:
    """``floor(k*T/n_u)`` for ``k < n_u``.

    With ``allow_repeat`` a sequence shorter than ``n_u`` is stretched by
    repeating frames instead of raising.
    """
    if n_u < 1 or T < 1:
        raise ValueError(f"need T >= 1 and n_u >= 1, got T={T}, n_u={n_u}")
    if n_u > T and not allow_repeat:
        raise ValueError(f"cannot draw {n_u} distinct frames from {T}")
    return [k * T // n_u for k in range(n_u)]


def centre_offsets(n_out: int) -> np.ndarray:
    return np.arange(n_out, dtype=np.float64) - (n_out - 1) / 2.0


def key_indices(p: ResampleParams) -> list[int]:
    centres = p.T * p.mu + centre_offsets(p.n_out) * p.delta
    return np.clip(_round_half_down(centres), 0, p.T - 1).astype(int).tolist()


def _round_half_down(x: np.ndarray) -> np.ndarray:
    # ties go to the lower frame, matching the first maximum of the soft kernel
    return np.ceil(x - 0.5)


def key_indices_batch(mu: np.ndarray, delta: np.ndarray, n_out: int, T: int) -> np.ndarray:
    """Vectorised :func:`key_indices` over a batch of (mu, delta) pairs."""
    centres = T * np.asarray(mu)[:, None] + centre_offsets(n_out)[None, :] * np.asarray(delta)[:, None]
    return np.clip(_round_half_down(centres), 0, T - 1).astype(np.intp)


MIN_SIGMA = 0.5


def soft_weights(mu: dc.DiffArray, delta: dc.DiffArray, n_out: int, T: int,
                 min_sigma: float = MIN_SIGMA) -> dc.DiffArray:
    """Per-sample kernel weights ``[B, n_out, T]`` from ``mu[B]``, ``delta[B]``.

    Kernel width is ``max(delta/2, min_sigma)``; the floor keeps a usable
    gradient on ``mu`` when the stride collapses.
    """
    mu, delta = dc.constant(mu), dc.constant(delta)
    b = mu.shape[0]
    offs = dc.DiffArray(np.broadcast_to(centre_offsets(n_out), (b, n_out)))
    centres = dc.add(dc.broadcast_to(dc.reshape(dc.scale(mu, float(T)), (b, 1)), (b, n_out)),
                     dc.mul(offs, dc.broadcast_to(dc.reshape(delta, (b, 1)), (b, n_out))))
    sigma = dc.maximum(dc.scale(delta, 0.5), dc.DiffArray(np.full(b, float(min_sigma))))
    inv_two_var = dc.reshape(dc.div(dc.DiffArray(np.full(b, 0.5)), dc.unary("square", sigma)),
                             (b, 1, 1))
    t = dc.DiffArray(np.broadcast_to(np.arange(T, dtype=np.float64), (b, n_out, T)))
    diff = dc.sub(t, dc.broadcast_to(dc.reshape(centres, (b, n_out, 1)), (b, n_out, T)))
    logits = dc.unary("negate", dc.mul(dc.unary("square", diff),
                                       dc.broadcast_to(inv_two_var, (b, n_out, T))))
    return dc.softmax(logits, axis=-1)


def soft_resample(features: dc.DiffArray, mu, delta, n_out: int,
                  min_sigma: float = MIN_SIGMA) -> dc.DiffArray:
    """Kernel-weighted frames.

    ``features`` is ``[T, H]`` with scalar ``mu``/``delta`` or batched
    ``[B, T, H]`` with ``mu[B]``/``delta[B]``. Differentiable in all three.
    """
    features = dc.constant(features)
    single = features.ndim == 2
    if single:
        features = dc.reshape(features, (1,) + features.shape)
        mu = dc.reshape(dc.constant(mu), (1,))
        delta = dc.reshape(dc.constant(delta), (1,))
    w = soft_weights(mu, delta, n_out, features.shape[1], min_sigma)
    out = dc.bmm(w, features)
    if single:
        out = dc.reshape(out, out.shape[1:])
    return out
