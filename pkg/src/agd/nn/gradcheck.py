"""Finite-difference verification of reverse-mode gradients."""

import numpy as np

from agd.errors import NumericError
from agd.nn.tensor import no_grad


def grad_check(f, params, step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``.  For each parameter tensor the central finite-difference
    gradient (step 1e-5) is assembled component by component and compared
    against the taped gradient as |analytic - fd| / (|fd| + 1e-8) with |.|
    the Euclidean norm over the tensor.  Returns the worst ratio across
    parameters.

    Per-tensor norms (rather than per-component ratios) keep the check
    meaningful in f64: an individual component whose true derivative is ~1e-8
    drowns in the ~1e-10 roundoff floor of the difference quotient even when
    the gradient as a whole is correct.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.value).all():
        raise NumericError("non-finite loss in grad_check")
    loss.backward()
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            fd = np.zeros_like(p.value)
            flat = p.value.reshape(-1)
            fd_flat = fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                fd_flat[i] = (up - down) / (2.0 * step)
            err = np.linalg.norm(ana - fd) / (np.linalg.norm(fd) + 1e-8)
            worst = max(worst, err)
    return worst
