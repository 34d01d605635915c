"""Parameter storage and the layer helpers shared by both networks."""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self, seed: int = 0):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, shape, init: str = "kaiming", fan_in: int | None = None) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        shape = tuple(int(s) for s in shape)
        if init == "kaiming":
            fan = fan_in if fan_in is not None else int(np.prod(shape[1:])) or 1
            bound = math.sqrt(6.0 / fan)
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            data = self.rng.standard_normal(shape) * 0.02
        elif init == "randn":
            data = self.rng.standard_normal(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Tensor(data, requires_grad=True, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def set_trainable(self, flag: bool):
        for p in self._params.values():
            p.requires_grad = flag
            p.grad = None

    def astype(self, dtype):
        """Copy of this store with every parameter cast to ``dtype``."""
        out = ParamStore()
        for k, p in self._params.items():
            out._params[k] = Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=k, dtype=dtype)
        return out

    def state(self) -> dict:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state(self, state: dict, prefix: str = ""):
        for k, p in self._params.items():
            arr = state[prefix + k]
            if arr.shape != p.shape:
                raise ValueError(f"checkpoint shape {arr.shape} != {p.shape} for {k}")
            p.data = arr.astype(p.dtype)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, p in self._params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def count(self) -> int:
        return sum(p.data.size for p in self._params.values())


def norm_groups(c: int) -> int:
    return 8 if c >= 8 and c % 8 == 0 else c


# ---------------------------------------------------------------------------
# layer registration + application
# ---------------------------------------------------------------------------

def add_conv(ps: ParamStore, name: str, cin: int, cout: int, k: int = 3, zero=False):
    ps.add(f"{name}.w", (cout, cin, k, k), "zeros" if zero else "kaiming")
    ps.add(f"{name}.b", (cout,), "zeros")


def conv(ps: ParamStore, name: str, x: Tensor, stride=1) -> Tensor:
    w = ps[f"{name}.w"]
    return T.conv2d(x, w, ps[f"{name}.b"], stride=stride, pad=w.shape[-1] // 2)


def add_linear(ps: ParamStore, name: str, din: int, dout: int, zero=False, bias=True):
    ps.add(f"{name}.w", (din, dout), "zeros" if zero else "kaiming", fan_in=din)
    if bias:
        ps.add(f"{name}.b", (dout,), "zeros")


def linear(ps: ParamStore, name: str, x: Tensor) -> Tensor:
    y = T.matmul(x, ps[f"{name}.w"])
    b = f"{name}.b"
    return T.add(y, ps[b]) if b in ps else y


def channel_linear(ps: ParamStore, name: str, x: Tensor) -> Tensor:
    """Apply a ``[Cin, Cout]`` linear map at every position of ``[B,C,H,W]``."""
    b, c, h, w = x.shape
    y = linear(ps, name, T.transpose(x, (0, 2, 3, 1)))
    return T.transpose(y, (0, 3, 1, 2))


def add_norm(ps: ParamStore, name: str, c: int):
    ps.add(f"{name}.g", (c,), "ones")
    ps.add(f"{name}.b", (c,), "zeros")


def norm(ps: ParamStore, name: str, x: Tensor) -> Tensor:
    g = ps[f"{name}.g"]
    return T.group_norm(x, norm_groups(g.shape[0]), g, ps[f"{name}.b"], 1e-5)
