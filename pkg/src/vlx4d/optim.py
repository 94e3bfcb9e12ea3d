"""Adam with a warmup/inverse-sqrt learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class OptimError(RuntimeError):
    pass


def lr_schedule(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to `peak` at `warmup` steps, then inverse-sqrt decay."""
    if step <= 0:
        return 0.0
    return peak * min(step / warmup, np.sqrt(warmup / step))


@dataclass
class AdamState:
    peak_lr: float
    warmup: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor]) -> float:
    """One in-place Adam update over params (sorted by name); returns the lr.

    Parameters with a None gradient are skipped; a non-finite gradient
    raises OptimError naming the offender. Gradients are cleared after use.
    """
    state.step += 1
    lr = lr_schedule(state.step, state.peak_lr, state.warmup)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None
    return lr


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
