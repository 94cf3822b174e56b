"""Conditional noise-prediction network and its training loop.

The network predicts the noise eps added to a clean point, conditioned on the
noise level and an integer class id.  Id `num_classes` is the learned null
condition, which is what classifier-free guidance contrasts against.  The
trunk exposes two hooks used elsewhere: `inject` lets adapters modify hidden
activations, and `t_emb_extra` lets a finetuned variant add an extra signal
into the noise-level embedding.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from agd import hashing
from agd import rng as rng_mod
from agd.errors import DimensionError, InputError, NumericError
from agd.nn import layers as L
from agd.nn import optim
from agd.nn import tensor as T


@dataclass
class BaseTrainConfig:
    hidden: tuple = (256, 256, 256)
    class_embed_dim: int = 16
    sigma_embed_dim: int = 16
    fourier_freqs: int = 8
    fourier_scale: float = 0.5
    activation: str = "silu"
    steps: int = 6000
    batch: int = 128
    peak_lr: float = 1e-3
    cond_dropout: float = 0.1
    clip_norm: float = 10.0
    log_every: int = 200


class Denoiser:
    """MLP eps-predictor over [x_t, sigma embedding, class embedding]."""

    def __init__(self, num_classes, cfg: BaseTrainConfig, seed):
        if num_classes < 1:
            raise InputError("need at least one class")
        self.num_classes = int(num_classes)
        self.data_dim = 2
        self.cfg = cfg
        self.seed = seed
        init = rng_mod.stream(seed, "base-init")

        d_c = cfg.class_embed_dim
        d_t = cfg.sigma_embed_dim
        # one embedding row per class plus the trailing null row
        table = init.normal(0.0, 1.0 / np.sqrt(d_c), size=(num_classes + 1, d_c))
        self.class_table = T.Tensor(table, requires_grad=True)

        self.sigma_fourier = L.FourierEncoder(
            cfg.fourier_freqs, init, in_dim=1, scale=cfg.fourier_scale
        )
        self.sigma_mlp = L.Mlp(
            [self.sigma_fourier.output_dim, d_t, d_t], cfg.activation, rng=init
        )

        widths = [self.data_dim + d_t + d_c, *cfg.hidden, self.data_dim]
        self.trunk = [
            L.Linear.init(fi, fo, init) for fi, fo in zip(widths[:-1], widths[1:])
        ]
        self.activation = cfg.activation
        self.hidden_widths = tuple(cfg.hidden)
        self.nfe = 0
        self.frozen = False

    def params(self):
        out = [self.class_table]
        out += self.sigma_mlp.params()
        for layer in self.trunk:
            out += layer.params()
        return out

    def n_params(self):
        return sum(p.value.size for p in self.params())

    def params_hash(self):
        return hashing.params_hash(self.params())

    def freeze(self):
        for p in self.params():
            p.requires_grad = False
        self.frozen = True
        return self

    def clone(self, unfreeze=False):
        """Deep copy sharing nothing; optionally re-enable training."""
        dup = copy.deepcopy(self)
        dup.nfe = 0
        if unfreeze:
            for p in dup.params():
                p.requires_grad = True
            dup.frozen = False
        return dup

    def _sigma_col(self, sigma, n):
        s = np.asarray(sigma, dtype=np.float64)
        if s.ndim == 0:
            s = np.full((n, 1), float(s))
        elif s.shape == (n,):
            s = s[:, None]
        elif s.shape != (n, 1):
            raise DimensionError(f"sigma must be scalar or ({n},), got {s.shape}")
        if np.any(s <= 0.0):
            raise InputError("sigma must be positive at evaluation points")
        return s

    def time_embedding(self, sigma, n):
        feats = self.sigma_fourier.encode(np.log(self._sigma_col(sigma, n)))
        return self.sigma_mlp.forward(T.Tensor(feats))

    def class_embedding(self, ids):
        ids = np.asarray(ids)
        if np.any((ids < 0) | (ids > self.num_classes)):
            raise InputError("class id out of range (null id is num_classes)")
        return T.gather_rows(self.class_table, ids)

    def forward(self, x, sigma, ids, inject=None, t_emb_extra=None):
        """Predict eps for a batch; returns a Tensor on the tape.

        inject(layer_index, h) -> h runs after each hidden activation.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise DimensionError(f"x must be (n, {self.data_dim}), got {x.shape}")
        n = x.shape[0]
        t_emb = self.time_embedding(sigma, n)
        if t_emb_extra is not None:
            t_emb = T.add(t_emb, t_emb_extra)
        c_emb = self.class_embedding(ids)
        act = T.ACTIVATIONS[self.activation]
        h = T.concat_cols([T.Tensor(x), t_emb, c_emb])
        for i, layer in enumerate(self.trunk[:-1]):
            h = act(layer.forward(h))
            if inject is not None:
                h = inject(i, h)
        out = self.trunk[-1].forward(h)
        self.nfe += n
        return out

    def eps(self, x, sigma, ids):
        """Plain-array prediction for samplers; never records gradients."""
        with T.no_grad():
            return self.forward(x, sigma, ids).value

    def null_ids(self, n):
        return np.full(n, self.num_classes, dtype=np.int64)


def cfg_combine(eps_cond, eps_uncond, omega):
    """Guided prediction eps_c + (omega - 1) * (eps_c - eps_u).

    Written in this affine form so omega = 1 returns eps_cond bit-for-bit
    and the result is exactly affine in omega for fixed inputs.  `omega`
    may be a scalar or one value per batch row.
    """
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise DimensionError("guided branches must agree in shape")
    w = np.asarray(omega, dtype=np.float64)
    if w.ndim == 1:
        if w.shape[0] != eps_cond.shape[0]:
            raise DimensionError("need one omega per row")
        w = w[:, None]
    elif w.ndim != 0:
        raise DimensionError("omega must be scalar or a vector over rows")
    return eps_cond + (w - 1.0) * (eps_cond - eps_uncond)


def train_base(dataset, schedule, cfg=None, seed=0):
    """Denoising score matching with conditioning dropout.

    Per step: draw classes uniformly, clean points from the dataset, noise
    levels log-uniformly over the schedule range, perturb, and regress the
    injected noise under squared error.  A fraction `cond_dropout` of rows
    trains the null embedding.  Returns the trained model and a loss curve
    of (step, batch_loss) pairs.
    """
    cfg = cfg or BaseTrainConfig()
    model = Denoiser(dataset.num_classes, cfg, seed)
    params = model.params()
    state = optim.AdamState(params)
    curve = []
    for step in range(1, cfg.steps + 1):
        st = rng_mod.stream(seed, "base-train", step)
        ids = st.integers(0, dataset.num_classes, cfg.batch)
        x = dataset.sample_batch(ids, st)
        sig = schedule.draw_log_uniform(cfg.batch, st)
        eps = st.standard_normal((cfg.batch, model.data_dim))
        x_t = x + sig[:, None] * eps

        drop = st.random(cfg.batch) < cfg.cond_dropout
        ids_in = np.where(drop, dataset.num_classes, ids)

        out = model.forward(x_t, sig, ids_in)
        diff = T.sub(out, T.Tensor(eps))
        loss = T.scale(T.sum_all(T.square(diff)), 1.0 / cfg.batch)
        val = loss.item()
        if not np.isfinite(val):
            raise NumericError(f"base training diverged at step {step}")
        for p in params:
            p.zero_grad()
        loss.backward()
        grads = [p.grad for p in params]
        optim.clip_grads(grads, cfg.clip_norm)
        optim.adam_step(state, params, grads, optim.lr_schedule(step, cfg.steps, cfg.peak_lr))
        if step == 1 or step % cfg.log_every == 0 or step == cfg.steps:
            curve.append((step, val))
    model.nfe = 0
    return model, curve
