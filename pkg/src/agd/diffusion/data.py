"""Synthetic 2-D Gaussian mixture data with closed-form smoothed scores.

Every class is a small Gaussian mixture in the plane.  Because convolving a
Gaussian mixture with isotropic noise of scale sigma just inflates each
component covariance by sigma^2 I, the density, score, and ideal denoiser at
every noise level are available in closed form.  That is what makes this
family usable as ground truth for sampler and distillation tests.
"""

import numpy as np

from agd import rng as rng_mod
from agd.errors import DimensionError, InputError

LOG_2PI = float(np.log(2.0 * np.pi))


class GaussianMixture:
    """A mixture of full-covariance 2-D Gaussians."""

    def __init__(self, means, covs, weights):
        means = np.asarray(means, dtype=np.float64)
        covs = np.asarray(covs, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != 2:
            raise DimensionError(f"means must be (K, 2), got {means.shape}")
        k = means.shape[0]
        if covs.shape != (k, 2, 2):
            raise DimensionError(f"covs must be ({k}, 2, 2), got {covs.shape}")
        if weights.shape != (k,):
            raise DimensionError(f"weights must be ({k},), got {weights.shape}")
        if np.any(weights <= 0.0):
            raise InputError("mixture weights must be positive")
        # symmetrize, then fail loudly if a component is not SPD
        covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
        for c in covs:
            np.linalg.cholesky(c)
        self.means = means
        self.covs = covs
        self.weights = weights / weights.sum()

    @property
    def num_components(self):
        return self.means.shape[0]

    def sample(self, n, stream):
        comp = stream.choice(self.num_components, size=n, p=self.weights)
        chols = np.linalg.cholesky(self.covs)
        z = stream.standard_normal((n, 2))
        return self.means[comp] + np.einsum("nij,nj->ni", chols[comp], z)


def _smoothed_stats(covs, sigma):
    """Covariance inflation by sigma^2 I: precisions and log-dets per component."""
    s = covs + (sigma**2) * np.eye(2)[None, :, :]
    prec = np.linalg.inv(s)
    sign, logdet = np.linalg.slogdet(s)
    if np.any(sign <= 0):
        raise InputError("smoothed covariance lost positive definiteness")
    return prec, logdet


def _component_log_probs(x, means, covs, log_weights, sigma):
    """Per-component log w_k + log N(x; mu_k, cov_k + sigma^2 I), shape (K, n)."""
    prec, logdet = _smoothed_stats(covs, sigma)
    diff = x[None, :, :] - means[:, None, :]  # (K, n, 2)
    quad = np.einsum("kni,kij,knj->kn", diff, prec, diff)
    return log_weights[:, None] - 0.5 * (quad + logdet[:, None]) - LOG_2PI


class ToyDataset:
    """A labeled collection of 2-D mixtures with analytic noisy scores.

    `class_id` arguments accept 0..num_classes-1 for a class-conditional
    quantity and num_classes (or None) for the marginal over a uniform class
    prior, matching the null-condition convention used by the denoiser.
    """

    def __init__(self, mixtures, name="custom"):
        if not mixtures:
            raise InputError("need at least one class mixture")
        self.mixtures = list(mixtures)
        self.name = name
        self.data_dim = 2
        # flattened component tables for vectorized marginal queries
        self._all_means = np.concatenate([m.means for m in mixtures], axis=0)
        self._all_covs = np.concatenate([m.covs for m in mixtures], axis=0)
        w = np.concatenate([m.weights / len(mixtures) for m in mixtures])
        self._all_weights = w / w.sum()

    @property
    def num_classes(self):
        return len(self.mixtures)

    @property
    def null_id(self):
        return len(self.mixtures)

    def _tables(self, class_id):
        if class_id is None or class_id == self.null_id:
            return self._all_means, self._all_covs, self._all_weights
        if not 0 <= class_id < self.num_classes:
            raise InputError(f"class_id {class_id} out of range")
        m = self.mixtures[class_id]
        return m.means, m.covs, m.weights

    def sample_class(self, class_id, n, stream):
        if class_id is None or class_id == self.null_id:
            ids = stream.integers(0, self.num_classes, n)
            return self.sample_batch(ids, stream)
        return self.mixtures[class_id].sample(n, stream)

    def sample_batch(self, class_ids, stream):
        """One clean draw per entry of `class_ids`, vectorized over the batch."""
        class_ids = np.asarray(class_ids)
        n = class_ids.shape[0]
        out = np.empty((n, 2), dtype=np.float64)
        for cid in np.unique(class_ids):
            mask = class_ids == cid
            out[mask] = self.mixtures[int(cid)].sample(int(mask.sum()), stream)
        return out

    def log_density(self, x, sigma, class_id=None):
        """log p_sigma(x | class) for x of shape (n, 2); returns (n,)."""
        x = np.asarray(x, dtype=np.float64)
        means, covs, weights = self._tables(class_id)
        lp = _component_log_probs(x, means, covs, np.log(weights), sigma)
        m = lp.max(axis=0)
        return m + np.log(np.exp(lp - m[None, :]).sum(axis=0))

    def score_single(self, x, sigma, class_id=None):
        """grad_x log p_sigma(x | class), one condition for the whole batch."""
        x = np.asarray(x, dtype=np.float64)
        means, covs, weights = self._tables(class_id)
        prec, logdet = _smoothed_stats(covs, sigma)
        diff = x[None, :, :] - means[:, None, :]
        quad = np.einsum("kni,kij,knj->kn", diff, prec, diff)
        lp = np.log(weights)[:, None] - 0.5 * (quad + logdet[:, None]) - LOG_2PI
        lp -= lp.max(axis=0, keepdims=True)
        resp = np.exp(lp)
        resp /= resp.sum(axis=0, keepdims=True)  # (K, n)
        comp_score = -np.einsum("kij,knj->kni", prec, diff)  # (K, n, 2)
        return np.einsum("kn,kni->ni", resp, comp_score)

    def score(self, x, sigma, class_ids):
        """Scores for a batch with per-row conditions.

        `class_ids` is an (n,) integer array; entries equal to num_classes
        select the marginal.  Rows sharing a condition are grouped so the
        cost stays one smoothed-mixture evaluation per distinct condition.
        """
        x = np.asarray(x, dtype=np.float64)
        class_ids = np.asarray(class_ids)
        if class_ids.shape != (x.shape[0],):
            raise DimensionError("class_ids must have one entry per row of x")
        out = np.empty_like(x)
        for cid in np.unique(class_ids):
            mask = class_ids == cid
            out[mask] = self.score_single(x[mask], sigma, int(cid))
        return out


def ring_dataset(num_classes=8):
    """The versioned default: classes on a ring, two components per class.

    Constants are frozen; changing them would silently invalidate stored
    trajectories and golden outputs, so treat this as format, not tuning.
    """
    radius = 1.5
    split = 0.18  # angular half-separation of the two components
    stds = (0.10, 0.14)
    weights = (0.6, 0.4)
    mixtures = []
    for c in range(num_classes):
        phi = 2.0 * np.pi * c / num_classes
        means = []
        covs = []
        for off, s in zip((-split, split), stds):
            a = phi + off
            means.append([radius * np.cos(a), radius * np.sin(a)])
            covs.append((s**2) * np.eye(2))
        mixtures.append(GaussianMixture(means, covs, weights))
    return ToyDataset(mixtures, name=f"ring{num_classes}-v1")


def single_gaussian_dataset(mean=(1.5, 0.0), std=0.2):
    """One class, one component.  Sampling from it has a closed-form endpoint
    law, which is what the sampler accuracy check integrates against."""
    cov = (std**2) * np.eye(2)
    return ToyDataset([GaussianMixture([mean], [cov], [1.0])], name="gauss1")


def sample_dataset(dataset, n, seed, label="data"):
    """Convenience labeled draw with a dedicated stream."""
    st = rng_mod.stream(seed, label)
    ids = st.integers(0, dataset.num_classes, n)
    x = dataset.sample_batch(ids, st)
    return x, ids
