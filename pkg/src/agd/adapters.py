"""Guidance adapters: small trainable modules riding on a frozen denoiser.

A ``GuidedModel`` wraps a frozen base network and injects a residual
correction after every hidden trunk layer.  The correction is computed from a
per-sample condition matrix C holding three embedding rows: the guidance
scale omega, the class, and the noise level.  Training only ever touches the
adapter parameters psi, so the base stays byte-identical and one base
checkpoint can be paired with many adapter sets.

Four interchangeable architectures map a hidden state Z and the condition
matrix C to a correction of Z's shape:

  cross_attention   Softmax(Q K^T / sqrt(d)) V with Q = Z Wq, K = C Wk, V = C Wv
  offset            MLP(sum_i c_i), independent of Z
  gating            (sigmoid(Zt v) element-wise MLP(Zt)) W with Zt_j = [z_j, sum_i c_i]
  positional        MLP([e_j, sum_i c_i]) with e_j an encoding of row index j

The trunk carries one row per sample (L = 1), so every architecture has a
fully batched fast path; the row-wise ``token_forward`` path handles general
L and exists so the two implementations can be checked against each other.
"""

from dataclasses import dataclass, replace

import numpy as np

from agd import hashing
from agd import rng as rng_mod
from agd.errors import DimensionError, InputError, NumericError, PreconditionError
from agd.nn import layers as L
from agd.nn import tensor as T

ARCHITECTURES = ("cross_attention", "offset", "gating", "positional")
INIT_SCHEMES = ("xavier", "zero")

# constant one-hot columns for picking attention weights out of a row-softmax
_PICK3 = [np.eye(3)[:, i : i + 1] for i in range(3)]


@dataclass
class AdapterConfig:
    architecture: str = "offset"
    init: str = "xavier"
    embed_dim: int = 8
    offset_hidden: int = 4
    gate_hidden: int = 3
    positional_hidden: int = 4
    positional_embed: int = 8
    omega_freqs: int = 6
    omega_scale: float = 0.25
    position_freqs: int = 4
    activation: str = "silu"

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise InputError(f"unknown adapter architecture {self.architecture!r}")
        if self.init not in INIT_SCHEMES:
            raise InputError(f"unknown init scheme {self.init!r}")
        if self.embed_dim < 1:
            raise InputError("embed_dim must be positive")
        return self


def default_config(architecture: str = "offset", init: str = "xavier") -> AdapterConfig:
    """Per-architecture defaults sized against the default base trunk.

    Chosen so each architecture's trainable-parameter ratio lands between 1%
    and 5% of the base model; cross-attention pays for two trunk-width
    projections per layer, so it runs at a narrower embedding.
    """
    cfg = AdapterConfig(architecture=architecture, init=init)
    if architecture == "cross_attention":
        cfg = replace(cfg, embed_dim=4)
    return cfg.validate()


class ConditionEncoder:
    """Per-sample condition rows [c_omega, c_class, c_sigma], width embed_dim.

    The guidance scale gets its own Fourier-plus-MLP pathway; class and noise
    level reuse the frozen base embeddings behind trainable linear
    projections, so the encoder sees exactly what the trunk sees.
    """

    def __init__(self, base, cfg: AdapterConfig, seed):
        init = rng_mod.stream(seed, "adapter-encoder")
        d_a = cfg.embed_dim
        self.base = base
        self.embed_dim = d_a
        self.omega_fourier = L.FourierEncoder(
            cfg.omega_freqs, init, in_dim=1, scale=cfg.omega_scale
        )
        self.omega_mlp = L.Mlp(
            [self.omega_fourier.output_dim, 16, d_a], cfg.activation, rng=init
        )
        d_c = base.class_table.value.shape[1]
        d_t = base.sigma_mlp.widths[-1]
        self.class_proj = L.Linear.init(d_c, d_a, init)
        self.sigma_proj = L.Linear.init(d_t, d_a, init)

    def params(self):
        return self.omega_mlp.params() + self.class_proj.params() + self.sigma_proj.params()

    def _omega_col(self, omega, n):
        w = np.asarray(omega, dtype=np.float64)
        if w.ndim == 0:
            w = np.full((n, 1), float(w))
        elif w.shape == (n,):
            w = w[:, None]
        elif w.shape != (n, 1):
            raise DimensionError(f"omega must be scalar or ({n},), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InputError("omega must be finite")
        return w

    def encode(self, omega, sigma, ids):
        """Batched condition rows: three (n, embed_dim) tensors."""
        ids = np.asarray(ids)
        n = ids.shape[0]
        c_omega = self.omega_mlp.forward(
            T.Tensor(self.omega_fourier.encode(self._omega_col(omega, n)))
        )
        c_class = self.class_proj.forward(self.base.class_embedding(ids))
        c_sigma = self.sigma_proj.forward(self.base.time_embedding(sigma, n))
        return [c_omega, c_class, c_sigma]


def encode_conditions(encoder: ConditionEncoder, omega, sigma, class_id) -> np.ndarray:
    """Single-sample condition matrix with one row per condition source."""
    rows = encoder.encode(float(omega), float(sigma), np.array([int(class_id)]))
    with T.no_grad():
        return np.concatenate([r.value for r in rows], axis=0)


def _xavier(fan_in, fan_out, rng, zero=False):
    w = np.zeros((fan_in, fan_out)) if zero else L.xavier_uniform(fan_in, fan_out, rng)
    return T.Tensor(w, requires_grad=True)


def _tile_rows(row: T.Tensor, n: int) -> T.Tensor:
    return T.matmul(T.Tensor(np.ones((n, 1))), row)


class _CrossAttentionAdapter:
    def __init__(self, width, d_a, rng, zero):
        self.w_q = _xavier(width, d_a, rng)
        self.w_k = _xavier(d_a, d_a, rng)
        self.w_v = _xavier(d_a, width, rng, zero=zero)
        self.d_a = d_a

    def params(self):
        return [self.w_q, self.w_k, self.w_v]

    def output_params(self):
        return [self.w_v]

    def batched(self, h, conds, csum):
        q = T.matmul(h, self.w_q)
        scores = [T.sum_cols(T.mul(q, T.matmul(c, self.w_k))) for c in conds]
        attn = T.row_softmax(T.scale(T.concat_cols(scores), 1.0 / np.sqrt(self.d_a)))
        out = None
        for pick, c in zip(_PICK3, conds):
            term = T.mul(T.matmul(attn, T.Tensor(pick)), T.matmul(c, self.w_v))
            out = term if out is None else T.add(out, term)
        return out

    def tokens(self, z, cmat, csum_row):
        q = T.matmul(z, self.w_q)
        k = T.matmul(cmat, self.w_k)
        v = T.matmul(cmat, self.w_v)
        return T.softmax_attention(q, k, v)


class _OffsetAdapter:
    def __init__(self, width, d_a, hidden, activation, rng, zero):
        self.mlp = L.Mlp([d_a, hidden, width], activation, rng=rng, zero_output=zero)

    def params(self):
        return self.mlp.params()

    def output_params(self):
        return self.mlp.layers[-1].params()

    def batched(self, h, conds, csum):
        return self.mlp.forward(csum)

    def tokens(self, z, cmat, csum_row):
        return _tile_rows(self.mlp.forward(csum_row), z.rows)


class _GatingAdapter:
    def __init__(self, width, d_a, hidden, rng, zero):
        self.gate = _xavier(width + d_a, 1, rng)
        self.mlp = L.Mlp([width + d_a, hidden], "identity", rng=rng)
        self.w_out = _xavier(hidden, width, rng, zero=zero)

    def params(self):
        return [self.gate, *self.mlp.params(), self.w_out]

    def output_params(self):
        return [self.w_out]

    def batched(self, h, conds, csum):
        zt = T.concat_cols([h, csum])
        gated = T.mul(T.sigmoid(T.matmul(zt, self.gate)), self.mlp.forward(zt))
        return T.matmul(gated, self.w_out)

    def tokens(self, z, cmat, csum_row):
        return self.batched(z, None, _tile_rows(csum_row, z.rows))


class _PositionalAdapter:
    def __init__(self, width, d_a, hidden, pos_dim, pos_fourier, activation, rng, zero):
        self.pos_fourier = pos_fourier
        self.pos_mlp = L.Mlp([pos_fourier.output_dim, pos_dim], activation, rng=rng)
        self.mlp = L.Mlp([pos_dim + d_a, hidden, width], activation, rng=rng, zero_output=zero)

    def params(self):
        return self.pos_mlp.params() + self.mlp.params()

    def output_params(self):
        return self.mlp.layers[-1].params()

    def _encode_positions(self, num_rows):
        frac = np.arange(num_rows, dtype=np.float64) / num_rows
        return self.pos_mlp.forward(T.Tensor(self.pos_fourier.encode(frac)))

    def batched(self, h, conds, csum):
        e0 = _tile_rows(self._encode_positions(1), h.rows)
        return self.mlp.forward(T.concat_cols([e0, csum]))

    def tokens(self, z, cmat, csum_row):
        e = self._encode_positions(z.rows)
        return self.mlp.forward(T.concat_cols([e, _tile_rows(csum_row, z.rows)]))


class AdapterStack:
    """One adapter per hidden trunk layer, all sharing a condition encoder."""

    def __init__(self, widths, cfg: AdapterConfig, seed):
        cfg.validate()
        self.cfg = cfg
        self.widths = tuple(widths)
        init = rng_mod.stream(seed, "adapter-stack")
        zero = cfg.init == "zero"
        d_a = cfg.embed_dim
        # one shared frozen frequency bank keeps position encodings comparable
        # across layers while the per-layer MLPs stay independent
        pos_fourier = L.FourierEncoder(cfg.position_freqs, init, in_dim=1, scale=1.0)
        self.adapters = []
        for width in self.widths:
            if cfg.architecture == "cross_attention":
                a = _CrossAttentionAdapter(width, d_a, init, zero)
            elif cfg.architecture == "offset":
                a = _OffsetAdapter(width, d_a, cfg.offset_hidden, cfg.activation, init, zero)
            elif cfg.architecture == "gating":
                a = _GatingAdapter(width, d_a, cfg.gate_hidden, init, zero)
            else:
                a = _PositionalAdapter(
                    width, d_a, cfg.positional_hidden, cfg.positional_embed,
                    pos_fourier, cfg.activation, init, zero,
                )
            self.adapters.append(a)

    def params(self):
        return [p for a in self.adapters for p in a.params()]

    def n_params(self):
        return sum(p.value.size for p in self.params())

    def zero_output_layers(self):
        """Zero every adapter's output-side weights in place."""
        for a in self.adapters:
            for p in a.output_params():
                p.value[...] = 0.0
        return self

    def layer_forward(self, layer, h, conds, csum):
        """Batched correction for hidden state h (n, width[layer])."""
        a = self.adapters[layer]
        if h.cols != self.widths[layer]:
            raise DimensionError(
                f"layer {layer} expects width {self.widths[layer]}, got {h.cols}"
            )
        return a.batched(h, conds, csum)

    def adapter_forward(self, layer, z, cmat):
        """Row-wise path for one sample: z is (L, width), cmat is (3, embed_dim)."""
        z = T.as_tensor(z)
        cmat = T.as_tensor(cmat)
        if z.cols != self.widths[layer]:
            raise DimensionError(
                f"layer {layer} expects width {self.widths[layer]}, got {z.cols}"
            )
        if cmat.cols != self.cfg.embed_dim:
            raise DimensionError(
                f"condition rows must have width {self.cfg.embed_dim}, got {cmat.cols}"
            )
        return self.adapters[layer].tokens(z, cmat, T.sum_rows(cmat))


class GuidedModel:
    """Frozen base plus adapters: guided prediction in one forward pass."""

    def __init__(self, base, cfg: AdapterConfig | None = None, seed=0):
        if not getattr(base, "frozen", False):
            raise PreconditionError("guided model requires a frozen base")
        self.base = base
        self.cfg = (cfg or default_config()).validate()
        self.seed = seed
        self.encoder = ConditionEncoder(base, self.cfg, seed)
        self.stack = AdapterStack(base.hidden_widths, self.cfg, seed)
        self.num_classes = base.num_classes
        self.data_dim = base.data_dim
        self.omega = None
        self.nfe = 0

    def params(self):
        return self.encoder.params() + self.stack.params()

    def n_params(self):
        return sum(p.value.size for p in self.params())

    def params_hash(self):
        return hashing.params_hash(self.params())

    def param_ratio(self):
        return self.n_params() / self.base.n_params()

    def null_ids(self, n):
        return self.base.null_ids(n)

    def _check_ids(self, ids):
        ids = np.asarray(ids)
        if np.any(ids == self.base.num_classes):
            raise InputError("guided prediction needs a concrete class, not the null id")
        return ids

    def forward(self, x, sigma, ids, omega):
        """Taped guided prediction; exactly one base pass (NFE +n)."""
        ids = self._check_ids(ids)
        conds = self.encoder.encode(omega, sigma, ids)
        csum = T.add(T.add(conds[0], conds[1]), conds[2])

        def hook(layer, h):
            return T.add(h, self.stack.layer_forward(layer, h, conds, csum))

        out = self.base.forward(x, sigma, ids, inject=hook)
        self.base.nfe -= len(ids)  # count against this model, not the base
        self.nfe += len(ids)
        if not np.all(np.isfinite(out.value)):
            raise NumericError("guided prediction produced non-finite values")
        return out

    def eps(self, x, sigma, ids, omega=None):
        if omega is None:
            omega = self.omega
        if omega is None:
            raise PreconditionError("no guidance scale bound; pass omega or use bind()")
        with T.no_grad():
            return self.forward(x, sigma, ids, omega).value

    def bind(self, omega):
        """Sampler-protocol view of this model at a fixed guidance scale."""
        return BoundStudent(self, float(omega))


class BoundStudent:
    """Fixed-omega view of any model whose eps() takes a guidance scale."""

    def __init__(self, model, omega):
        self._model = model
        self.omega = omega
        self.num_classes = model.num_classes
        self.data_dim = model.data_dim

    def eps(self, x, sigma, ids):
        return self._model.eps(x, sigma, ids, omega=self.omega)

    def null_ids(self, n):
        return self._model.null_ids(n)

    @property
    def nfe(self):
        return self._model.nfe

    @nfe.setter
    def nfe(self, value):
        self._model.nfe = value
