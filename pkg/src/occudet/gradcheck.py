"""Central-difference gradient checking for the hand-written backward passes.

An operation is wrapped as ``fn(*inputs) -> (out, vjp)``; the checker projects
the output onto a random direction R, compares ``vjp(R)`` against
(f(x+h) - f(x-h)) / 2h entry by entry and reports the worst relative error.
Inputs must be float64 (the shadow precision), otherwise truncation noise
drowns the signal.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ops import Array, NonFiniteError
from .rng import Rng, STREAM_GRADCHECK


def finite_diff_gradcheck(fn: Callable, inputs: Sequence[Array], *,
                          rng: Rng | None = None, h: float = 1e-4,
                          wrt: Sequence[int] | None = None,
                          max_entries: int | None = None) -> float:
    """Return the max relative error between analytic and numeric gradients.

    wrt selects which inputs to differentiate (default: all).  max_entries
    caps the probed entries per input (deterministic subsample) for large
    compositions; by default every entry is probed.
    """
    inputs = [np.asarray(x) for x in inputs]
    for x in inputs:
        if x.dtype != np.float64:
            raise ValueError("gradcheck requires float64 inputs")
    gen = (rng or Rng(0)).stream(STREAM_GRADCHECK).generator()

    out, vjp = fn(*inputs)
    out = np.asarray(out)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("gradcheck: non-finite forward output")
    proj = gen.standard_normal(out.shape)
    analytic = vjp(proj)
    if not isinstance(analytic, tuple):
        analytic = (analytic,)
    if len(analytic) != len(inputs):
        raise ValueError(f"vjp returned {len(analytic)} grads for "
                         f"{len(inputs)} inputs")

    def scalar_at(perturbed: list[Array]) -> float:
        o, _ = fn(*perturbed)
        return float((proj * np.asarray(o)).sum())

    indices = range(len(inputs)) if wrt is None else wrt
    max_rel = 0.0
    for i in indices:
        x = inputs[i]
        g = np.asarray(analytic[i])
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradcheck: non-finite analytic grad {i}")
        flat_idx = np.arange(x.size)
        if max_entries is not None and x.size > max_entries:
            flat_idx = np.sort(gen.choice(x.size, size=max_entries,
                                          replace=False))
        work = [inp.copy() for inp in inputs]
        for j in flat_idx:
            orig = work[i].flat[j]
            work[i].flat[j] = orig + h
            fp = scalar_at(work)
            work[i].flat[j] = orig - h
            fm = scalar_at(work)
            work[i].flat[j] = orig
            num = (fp - fm) / (2.0 * h)
            ana = g.flat[j]
            rel = abs(num - ana) / max(1.0, abs(num), abs(ana))
            if rel > max_rel:
                max_rel = rel
    return max_rel
