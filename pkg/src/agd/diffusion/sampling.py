"""Reverse-process samplers and the model wrappers they drive.

A "model" here is anything with `eps(x, sigma, ids) -> (n, 2)` and an `nfe`
counter: the trained denoiser, the analytic oracle, the two-pass guidance
teacher, or an adapter-equipped student.  Samplers only ever talk to that
protocol, so every comparison in the package runs through identical update
rules.
"""

import enum

import numpy as np

from agd import hashing
from agd import rng as rng_mod
from agd.errors import DimensionError, InputError, NumericError
from agd.diffusion.denoiser import cfg_combine


class SamplerKind(str, enum.Enum):
    DETERMINISTIC = "deterministic_euler"
    STOCHASTIC = "stochastic_em"


def forward_perturb(x, sigma, stream):
    """Noising x_t = x + sigma * eps; returns (x_t, eps)."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    eps = stream.standard_normal(x.shape)
    return x + s * eps, eps


class OracleDenoiser:
    """Exact eps-predictor from the closed-form smoothed score.

    Carries the frozen-model surface (`frozen`, `params_hash`) so it can
    stand in for a trained denoiser anywhere a teacher is expected.
    """

    def __init__(self, dataset):
        self.dataset = dataset
        self.num_classes = dataset.num_classes
        self.nfe = 0
        self.frozen = True

    def params_hash(self):
        h = hashing.fnv1a64(b"oracle")
        for m in self.dataset.mixtures:
            for arr in (m.means, m.covs, m.weights):
                h = hashing.fnv1a64(np.ascontiguousarray(arr).tobytes(), h)
        return h

    def eps(self, x, sigma, ids):
        x = np.asarray(x, dtype=np.float64)
        self.nfe += x.shape[0]
        # eps = -sigma * score under the VE forward process
        return -float(sigma) * self.dataset.score(x, float(sigma), ids)

    def null_ids(self, n):
        return np.full(n, self.num_classes, dtype=np.int64)


class CfgTeacher:
    """Two-pass guided predictor around a frozen base model.

    Calls the base once with the real ids and once with the null id, then
    blends with `cfg_combine`.  Its own nfe counts both passes, which is the
    2x cost the distilled student is meant to remove.
    """

    def __init__(self, base, omega):
        self.base = base
        self.omega = omega
        self.num_classes = base.num_classes
        self.nfe = 0

    def eps(self, x, sigma, ids):
        n = np.asarray(x).shape[0]
        e_c = self.base.eps(x, sigma, ids)
        e_u = self.base.eps(x, sigma, self.base.null_ids(n))
        self.nfe += 2 * n
        return cfg_combine(e_c, e_u, self.omega)


def sample_batch(
    model,
    schedule,
    class_ids,
    kind=SamplerKind.DETERMINISTIC,
    seed=0,
    x_init=None,
    record=False,
    noise_label="sample",
):
    """Integrate the reverse process from sigma_max down to zero.

    Deterministic Euler follows the probability-flow update
        x_{i+1} = x_i + (sigma_{i+1} - sigma_i) * eps_hat,
    the stochastic variant doubles the score drift and re-injects noise
        x_{i+1} = x_i - ((sigma_i^2 - sigma_{i+1}^2)/sigma_i) * eps_hat
                      + sqrt(sigma_i^2 - sigma_{i+1}^2) * z,
    which shares the Euler marginals in the exact-score limit.

    `x_init` overrides the Gaussian start so paired runs can share noise.
    With `record=True` also returns per-step lists of (x_i, eps_hat_i).
    """
    kind = SamplerKind(kind)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if class_ids.ndim != 1:
        raise DimensionError("class_ids must be a vector")
    n = class_ids.shape[0]
    sig = schedule.sigmas
    st = rng_mod.stream(seed, noise_label)
    if x_init is None:
        x = sig[0] * st.standard_normal((n, 2))
    else:
        x = np.array(x_init, dtype=np.float64, copy=True)
        if x.shape != (n, 2):
            raise DimensionError(f"x_init must be ({n}, 2), got {x.shape}")
    xs, es = [], []
    for i in range(schedule.num_steps):
        s_i, s_next = sig[i], sig[i + 1]
        e = model.eps(x, s_i, class_ids)
        if record:
            xs.append(x.copy())
            es.append(np.asarray(e, dtype=np.float64).copy())
        if kind is SamplerKind.DETERMINISTIC:
            x = x + (s_next - s_i) * e
        else:
            var = s_i * s_i - s_next * s_next
            z = st.standard_normal((n, 2))
            x = x - (var / s_i) * e + np.sqrt(var) * z
        if not np.all(np.isfinite(x)):
            raise NumericError(f"sampler produced non-finite state at step {i}")
    if record:
        return x, xs, es
    return x


def sample_dataset_like(model, schedule, num_classes, n, kind, seed, omega=None):
    """Class-balanced batch draw, guided when omega is given."""
    if n < 1:
        raise InputError("need at least one sample")
    ids = rng_mod.stream(seed, "sample-ids").integers(0, num_classes, n)
    m = model if omega is None else CfgTeacher(model, omega)
    x = sample_batch(m, schedule, ids, kind=kind, seed=seed)
    return x, ids
