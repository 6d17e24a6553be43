"""Small parameter-owning building blocks shared by the model modules.

Parameters are plain :class:`Tensor` objects registered in a flat dict
under qualified names. Initialisation draws from a stream keyed by
``(seed, name)``, so a submodule's initial values depend only on its name
and the seed, never on what else the surrounding model allocates.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rng import RngSource
from .tensor import Tensor, uniform_init


class ParamStore:
    """Flat registry of named parameters for one model instance."""

    def __init__(self, rng: RngSource):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def new(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        data = uniform_init(shape, fan_in, self.rng.stream(f"init/{name}"))
        p = Tensor(data, requires_grad=True)
        self.params[name] = p
        return p

    def new_const(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = p
        return p

    def count(self) -> int:
        return sum(p.size for p in self.params.values())


class Linear:
    """Affine map applied along the last axis."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.w = store.new(f"{name}.weight", (d_in, d_out), fan_in=d_in)
        self.b = store.new(f"{name}.bias", (d_out,), fan_in=d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = T.bias_add(y, self.b)
        return y


class Conv1d:
    """Causal valid 1-D convolution layer over (..., C_in, T) inputs."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 k: int, dilation: int = 1, stride: int = 1, bias: bool = True):
        self.k = k
        self.dilation = dilation
        self.stride = stride
        self.kernel = store.new(f"{name}.kernel", (c_out, c_in, k), fan_in=c_in * k)
        self.bias = store.new(f"{name}.bias", (c_out,), fan_in=c_in * k) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv1d(x, self.kernel, dilation=self.dilation, stride=self.stride)
        if self.bias is not None:
            # bias is per output channel: move channels last, add, move back
            y = T.transpose(y, tuple(range(y.ndim - 2)) + (y.ndim - 1, y.ndim - 2))
            y = T.bias_add(y, self.bias)
            y = T.transpose(y, tuple(range(y.ndim - 2)) + (y.ndim - 1, y.ndim - 2))
        return y


class Mlp2:
    """Two-layer perceptron with ReLU hidden activation, scalar or vector out."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int,
                 d_out: int, final_relu: bool = False):
        self.fc1 = Linear(store, f"{name}.fc1", d_in, d_hidden)
        self.fc2 = Linear(store, f"{name}.fc2", d_hidden, d_out)
        self.final_relu = final_relu

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.fc1(x))
        y = self.fc2(h)
        if self.final_relu:
            y = T.relu(y)
        return y


class LayerNorm:
    """Learnable layer normalisation along the last axis."""

    def __init__(self, store: ParamStore, name: str, d: int, eps: float = 1e-8):
        self.gain = store.new_const(f"{name}.gain", np.ones(d))
        self.bias = store.new_const(f"{name}.bias", np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)
