"""Layers: linear maps, MLPs with optional dropout, Fourier feature encoding."""

import numpy as np

from agd.errors import DimensionError, InputError
from agd.nn.tensor import ACTIVATIONS, Tensor, add, as_tensor, matmul, mul


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """Affine map x @ W + b with W (in, out) and row-vector bias."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, trainable: bool = True):
        self.weight = Tensor(weight, requires_grad=trainable)
        self.bias = Tensor(bias, requires_grad=trainable)

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((fan_in, fan_out)) if zero else xavier_uniform(fan_in, fan_out, rng)
        return cls(w, np.zeros((1, fan_out)))

    def forward(self, x) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def params(self) -> list:
        return [self.weight, self.bias]


class Mlp:
    """Fully connected stack: widths[0] -> ... -> widths[-1].

    The activation (``relu`` or ``silu``; ``identity`` for a bare linear
    stack) is applied after every layer except the last.  Dropout, when
    enabled, masks hidden activations in train mode only, so evaluation is
    always deterministic.
    """

    def __init__(self, widths, activation: str = "silu", dropout: float = 0.0,
                 rng: np.random.Generator | None = None, zero_output: bool = False):
        if len(widths) < 2:
            raise DimensionError("an MLP needs at least input and output widths")
        if activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {activation!r}")
        if not 0.0 <= dropout < 1.0:
            raise InputError("dropout rate must lie in [0, 1)")
        if rng is None:
            rng = np.random.default_rng(0)
        self.widths = list(widths)
        self.activation = activation
        self.dropout = dropout
        self.layers = []
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            is_last = i == len(widths) - 2
            self.layers.append(Linear.init(fi, fo, rng, zero=zero_output and is_last))

    def forward(self, x, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        h = as_tensor(x)
        if h.cols != self.widths[0]:
            raise DimensionError(f"MLP expects {self.widths[0]} input columns, got {h.cols}")
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            h = layer.forward(h)
            if i < len(self.layers) - 1:
                h = act(h)
                if train_mode and self.dropout > 0.0:
                    if rng is None:
                        raise InputError("dropout in train mode needs an rng stream")
                    keep = rng.random(h.value.shape) >= self.dropout
                    h = mul(h, Tensor(keep / (1.0 - self.dropout)))
        return h

    def params(self) -> list:
        return [p for layer in self.layers for p in layer.params()]

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params())


class FourierEncoder:
    """Random Fourier features [sin(2 pi B x), cos(2 pi B x)].

    The frequency matrix B is drawn once at construction (Normal(0, scale^2))
    and frozen, so the encoding is deterministic and every entry lies in
    [-1, 1].
    """

    def __init__(self, num_frequencies: int, rng: np.random.Generator,
                 in_dim: int = 1, scale: float = 10.0):
        if num_frequencies < 1:
            raise InputError("need at least one frequency")
        self.num_frequencies = num_frequencies
        self.in_dim = in_dim
        self.scale = scale
        self.B = rng.normal(0.0, scale, size=(num_frequencies, in_dim))
        self.B.setflags(write=False)

    @property
    def output_dim(self) -> int:
        return 2 * self.num_frequencies

    def encode(self, x) -> np.ndarray:
        """Encode (m, in_dim) inputs to (m, 2 * num_frequencies) features."""
        a = np.asarray(x, dtype=np.float64)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        elif a.ndim == 1:
            a = a.reshape(-1, 1)
        if a.shape[1] != self.in_dim:
            raise DimensionError(f"encoder expects {self.in_dim} columns, got {a.shape[1]}")
        phases = 2.0 * np.pi * (a @ self.B.T)
        return np.concatenate([np.sin(phases), np.cos(phases)], axis=1)
