"""Parameter storage and the Conv-block shared by the fusion modules and the network."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import BNState, Tensor, batch_norm, conv2d, relu

DTYPES = {"f32": np.float32, "f64": np.float64}


class ParamStore:
    """Named trainable tensors plus batch-norm running statistics.

    Parameters are created lazily on first request, in call order, from a
    seeded generator; a frozen store refuses new names so a forward pass can
    never silently grow the model. Conv kernels use fan-in scaled normal
    init, ``std = sqrt(2 / (C_in * L * L))``.
    """

    def __init__(self, seed: int = 0, dtype: str = "f64"):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn: "OrderedDict[str, BNState]" = OrderedDict()
        self.rng = np.random.default_rng(seed)
        self.dtype = DTYPES[dtype]
        self.frozen = False

    def _new(self, name: str, data: np.ndarray) -> Tensor:
        if self.frozen:
            raise KeyError(f"parameter {name!r} not in frozen store")
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def conv(self, name: str, c_out: int, c_in: int, k: int) -> Tensor:
        key = f"{name}.w"
        if key in self.params:
            return self.params[key]
        std = np.sqrt(2.0 / (c_in * k * k))
        return self._new(key, self.rng.standard_normal((c_out, c_in, k, k)) * std)

    def bias(self, name: str, c: int) -> Tensor:
        key = f"{name}.b"
        if key in self.params:
            return self.params[key]
        return self._new(key, np.zeros(c))

    def norm(self, name: str, c: int) -> tuple[Tensor, Tensor, BNState]:
        g, b = f"{name}.gamma", f"{name}.beta"
        if g not in self.params:
            self._new(g, np.ones(c))
            self._new(b, np.zeros(c))
            self.bn[name] = BNState.fresh(c, np.float64)
        return self.params[g], self.params[b], self.bn[name]

    def count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    # flat views for checkpoints -------------------------------------------------

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, t.data) for k, t in self.params.items())
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.mean
            out[f"{k}.running_var"] = s.var
        return out

    def load_arrays(self, arrays: dict):
        for k, t in self.params.items():
            t.data = np.asarray(arrays[k], dtype=self.dtype).reshape(t.shape).copy()
        for k, s in self.bn.items():
            s.mean[...] = arrays[f"{k}.running_mean"]
            s.var[...] = arrays[f"{k}.running_var"]


def conv_bn_relu(x: Tensor, store: ParamStore, name: str, c_out: int, k: int,
                 training: bool, momentum: float = 0.1) -> Tensor:
    c_in = x.shape[-3]
    w = store.conv(name + ".conv", c_out, c_in, k)
    gamma, beta, state = store.norm(name + ".bn", c_out)
    return relu(batch_norm(conv2d(x, w), gamma, beta, state, training=training, momentum=momentum))


def conv_block(x: Tensor, store: ParamStore, name: str, c_out: int, k: int = 3,
               training: bool = True, momentum: float = 0.1) -> Tensor:
    """Conv-block(L): two stacks of LxL conv (no bias), batch norm and ReLU."""
    if k not in (1, 3):
        raise ValueError(f"Conv-block kernel must be 1 or 3, got {k}")
    y = conv_bn_relu(x, store, name + ".0", c_out, k, training, momentum)
    return conv_bn_relu(y, store, name + ".1", c_out, k, training, momentum)


def conv1x1(x: Tensor, store: ParamStore, name: str, c_out: int) -> Tensor:
    """1x1 convolution with bias."""
    w = store.conv(name, c_out, x.shape[-3], 1)
    return conv2d(x, w, store.bias(name, c_out))
