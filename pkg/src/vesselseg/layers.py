"""Parameter containers and the small set of shared layers.

Every layer takes an explicit numpy Generator for its initialization so a
model built twice from the same seed is bit-identical.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) resampled into [-2std, 2std]."""
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > 2 * std
    return vals.astype(dtype)


def kaiming_normal(rng, shape, fan_in, dtype=np.float32):
    return (rng.normal(0.0, 1.0, size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    """Base class: registers child modules, parameters and buffers by
    attribute assignment, torch-style."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            if value.requires_grad:
                self._params[name] = value
            else:
                self._buffers[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def named_tensors(self):
        """Parameters and buffers together, as serialized in checkpoints."""
        d = dict(self.named_parameters())
        d.update(self.named_buffers())
        return d

    def train(self, flag=True):
        object.__setattr__(self, "training", flag)
        for m in self._modules.values():
            m.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list = []
        for m in mods:
            self.append(m)

    def append(self, m):
        setattr(self, str(len(self._list)), m)
        self._list.append(m)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


class Linear(Module):
    """y = x @ W + b over the trailing dim."""

    def __init__(self, in_features, out_features, rng, bias=True, std=0.02, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(trunc_normal(rng, (in_features, out_features), std, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        lead = int(np.prod(x.shape[:-1], dtype=np.int64)) if x.ndim > 1 else 1
        flat = T.reshape(x, (lead, self.in_features))
        out = T.matmul(flat, self.weight)
        if self.bias is not None:
            b = T.reshape(self.bias, (1, self.out_features))
            out = T.add(out, T.broadcast_to(b, out.shape))
        return T.reshape(out, tuple(x.shape[:-1]) + (self.out_features,))


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k, rng, stride=1, pad=0, groups=1, bias=True,
                 dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.pad = pad
        self.groups = groups
        fan_in = (in_ch // groups) * k * k
        self.weight = Tensor(kaiming_normal(rng, (out_ch, in_ch // groups, k, k), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


class BatchNorm2d(Module):
    def __init__(self, ch, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", Tensor(np.zeros(ch, dtype=dtype)))
        self.register_buffer("running_var", Tensor(np.ones(ch, dtype=dtype)))

    def forward(self, x):
        state = {"running_mean": self.running_mean.data, "running_var": self.running_var.data}
        return T.batchnorm2d(x, self.gamma, self.beta, state, self.training,
                             self.eps, self.momentum)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class ChannelLayerNorm(Module):
    """LayerNorm over the channel axis of an [N, C, H, W] map."""

    def __init__(self, ch, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.norm = LayerNorm(ch, eps, dtype)

    def forward(self, x):
        h = T.permute(x, (0, 2, 3, 1))
        h = self.norm(h)
        return T.permute(h, (0, 3, 1, 2))


class Mlp(Module):
    """Two linear layers with GELU in between (token-wise)."""

    def __init__(self, dim, hidden, rng, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class CBR(Module):
    """Conv (same padding) -> BatchNorm -> ReLU."""

    def __init__(self, in_ch, out_ch, rng, stride=1, k=3, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, k, rng, stride=stride, pad=k // 2,
                           bias=False, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))
