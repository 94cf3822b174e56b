"""Adam (bias-corrected, no weight decay) and the warmup+cosine lr schedule."""

import math

import numpy as np

from agd.errors import DimensionError, NumericError


class AdamState:
    """First/second moment buffers mirroring a fixed parameter list."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]


def adam_step(state: AdamState, params, grads, lr: float):
    """One in-place Adam update; ``grads`` aligns with ``params`` (None = zero)."""
    if len(params) != len(state.m):
        raise DimensionError("parameter list does not match optimizer state")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.value)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.value.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.value.shape}")
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient in adam_step")
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def lr_schedule(step: int, total_steps: int, peak_lr: float) -> float:
    """Linear warmup over the first 10% of steps, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(0.1 * total_steps)
    if step <= warmup:
        return peak_lr * step / max(warmup, 1)
    progress = (step - warmup) / (total_steps - warmup)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float((g * g).sum())
    return math.sqrt(total)


def clip_grads(grads, max_norm: float):
    """Scale the gradient list in place to a global norm of at most max_norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm > 0.0:
        factor = max_norm / norm
        for g in grads:
            if g is not None:
                g *= factor
    return grads
