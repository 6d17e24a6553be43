"""Multi-scale temporal convolution: dilated inception pairs with gated fusion.

Sequences flow as (B, T, N, C) tensors.  Convolutions are causal and valid
(no padding), so each layer shortens the sequence by (k_max − 1) · dilation
and keeps the most recent steps.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, SequenceTooShortError
from .nn import Conv1d, ParamStore
from .tensor import Tensor


def layer_dilation(layer: int, q: int) -> int:
    """Dilation for 1-based layer index: q^(layer−1)."""
    if layer < 1 or q < 1:
        raise ConfigurationError(f"need layer ≥ 1 and q ≥ 1, got {layer}, {q}")
    return q ** (layer - 1)


def receptive_field(filter_sizes, q: int, n_layers: int) -> int:
    """Input steps consumed by a stack of inception layers."""
    k_max = max(filter_sizes)
    if q == 1:
        return 1 + n_layers * (k_max - 1)
    return 1 + (k_max - 1) * (q**n_layers - 1) // (q - 1)


def gated_fusion(a: Tensor, b: Tensor) -> Tensor:
    """σ(a) ⊙ tanh(b); output lies in (−1, 1) elementwise."""
    return T.mul(T.sigmoid(a), T.tanh(b))


class DilatedInception:
    """Parallel causal convolutions of several widths, truncated and stacked.

    Each filter size gets c_out/ω channels; every branch output is cut to
    the length of the widest filter's output (dropping the earliest steps)
    and the branches are concatenated along the channel axis.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 filter_sizes, dilation: int):
        sizes = tuple(filter_sizes)
        if not sizes or any(k < 1 for k in sizes):
            raise ConfigurationError(f"bad filter sizes {sizes}")
        if c_out % len(sizes):
            raise ConfigurationError(
                f"c_out={c_out} not divisible by {len(sizes)} filter sizes"
            )
        self.filter_sizes = sizes
        self.k_max = max(sizes)
        self.dilation = dilation
        per = c_out // len(sizes)
        self.branches = [
            Conv1d(store, f"{name}.k{k}", c_in, per, k, dilation=dilation)
            for k in sizes
        ]

    def out_length(self, t_in: int) -> int:
        return t_in - (self.k_max - 1) * self.dilation

    def __call__(self, x: Tensor) -> Tensor:
        """x: (B, T, N, C_in) → (B, T′, N, C_out)."""
        t_in = x.shape[1]
        t_out = self.out_length(t_in)
        if t_out < 1:
            raise SequenceTooShortError(
                f"inception with k_max={self.k_max}, dilation={self.dilation} "
                f"needs T ≥ {(self.k_max - 1) * self.dilation + 1}, got {t_in}"
            )
        xc = T.transpose(x, (0, 2, 3, 1))  # (B, N, C, T)
        outs = []
        for conv in self.branches:
            y = conv(xc)  # (B, N, per, T − (k−1)·d)
            extra = y.shape[-1] - t_out
            if extra:
                y = T.narrow(y, y.ndim - 1, extra, t_out)
            outs.append(y)
        out = T.concat(outs, axis=2)  # (B, N, C_out, T′)
        return T.transpose(out, (0, 3, 1, 2))


class TcnLayer:
    """Two inception banks fused by σ·tanh gating, followed by dropout."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 filter_sizes, dilation: int, dropout: float = 0.0):
        self.filter_bank = DilatedInception(
            store, f"{name}.filter", c_in, c_out, filter_sizes, dilation
        )
        self.gate_bank = DilatedInception(
            store, f"{name}.gate", c_in, c_out, filter_sizes, dilation
        )
        self.dropout = dropout

    def out_length(self, t_in: int) -> int:
        return self.filter_bank.out_length(t_in)

    def __call__(self, x: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        xi = gated_fusion(self.filter_bank(x), self.gate_bank(x))
        if self.dropout > 0.0:
            xi = T.dropout(xi, self.dropout, training=training, rng=rng)
        return xi
