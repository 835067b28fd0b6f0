"""Module/parameter plumbing and the standard layer zoo.

Parameters are float32 by default; ``Module.astype`` recasts a whole tree
(used by float64 gradient checks). Construction order is deterministic and
every random init draws from an explicitly passed Generator, so a fixed seed
reproduces a model bit for bit.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import (
    Tensor,
    concat,
    flip,
    leaky_relu,
    relu,
    silu,
    tanh,
)


class Parameter(Tensor):
    def __init__(self, data: np.ndarray):
        super().__init__(np.ascontiguousarray(data), requires_grad=True)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return ((rng.random(shape) * 2.0 - 1.0) * bound).astype(np.float32)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        params = self.__dict__.get("_params")
        if params is not None:
            mods = self.__dict__["_modules"]
            bufs = self.__dict__["_buffers"]
            if isinstance(value, Parameter):
                params[name] = value
                mods.pop(name, None)
            elif isinstance(value, Module):
                mods[name] = value
                params.pop(name, None)
            elif name in bufs:
                bufs[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    # ---- traversal ------------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for mn, m in self._modules.items():
            yield from m.named_parameters(prefix + mn + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for n, _ in self._buffers.items():
            yield prefix + n, self._buffers[n]
        for mn, m in self._modules.items():
            yield from m.named_buffers(prefix + mn + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    # ---- state ----------------------------------------------------------------

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_rng(self, rng: np.random.Generator) -> None:
        """Hand one Generator to every layer that samples (dropout)."""
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for n, b in m._buffers.items():
                if np.issubdtype(b.dtype, np.floating):
                    m.register_buffer(n, b.astype(dtype))
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Named parameters and buffers, the checkpointable state."""
        out = {n: p.data for n, p in self.named_parameters()}
        for n, b in self.named_buffers():
            out[n] = b
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        params = dict(self.named_parameters())
        for n, arr in state.items():
            if arr.shape != own[n].shape:
                raise ValueError(f"{n}: shape {arr.shape} != {own[n].shape}")
            if n in params:
                params[n].data = arr.astype(params[n].data.dtype).copy()
            else:
                self._assign_buffer(n, arr)

    def _assign_buffer(self, name: str, arr: np.ndarray) -> None:
        mod = self
        parts = name.split(".")
        for p in parts[:-1]:
            mod = mod._modules[p]
        mod.register_buffer(parts[-1], arr.astype(mod._buffers[parts[-1]].dtype).copy())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._n = 0
        for m in mods:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(self._n), m)
        self._n += 1

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return self._n

    def __getitem__(self, i: int) -> Module:
        return self._modules[str(i)]


class Sequential(Module):
    def __init__(self, *mods):
        super().__init__()
        self.layers = ModuleList(mods)

    def forward(self, x):
        for m in self.layers:
            x = m(x)
        return x


# ---- layers ------------------------------------------------------------------------


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(_uniform(rng, (out_features, in_features), bound))
        self.bias = Parameter(_uniform(rng, (out_features,), bound)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight.swapaxes(0, 1)
        return y + self.bias if self.bias is not None else y


class _ConvBase(Module):
    """Shared weight-norm handling; subclasses set _w_shape and _dim0."""

    def _init_weight(self, rng, w_shape, fan_in, bias, weight_norm):
        bound = 1.0 / np.sqrt(fan_in)
        w = _uniform(rng, w_shape, bound)
        self.weight_norm = weight_norm
        if weight_norm:
            self.weight_v = Parameter(w)
            norm = np.sqrt(
                (w.astype(np.float64) ** 2).sum(axis=tuple(range(1, len(w_shape))), keepdims=True)
            )
            self.weight_g = Parameter(norm.astype(np.float32))
        else:
            self.weight = Parameter(w)
        self.bias = Parameter(_uniform(rng, (w_shape[self._bias_axis],), bound)) if bias else None

    def effective_weight(self) -> Tensor:
        if not self.weight_norm:
            return self.weight
        v = self.weight_v
        axes = tuple(range(1, v.data.ndim))
        norm = (v * v).sum(axis=axes, keepdims=True) ** 0.5
        return v * (self.weight_g / norm)


class Conv1d(_ConvBase):
    _bias_axis = 0

    def __init__(
        self, cin, cout, k, rng, stride=1, padding=0, dilation=1, groups=1,
        bias=True, weight_norm=False,
    ):
        super().__init__()
        if cin % groups or cout % groups:
            raise ValueError("channels must divide groups")
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        self._init_weight(rng, (cout, cin // groups, k), (cin // groups) * k, bias, weight_norm)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1d(
            x, self.effective_weight(), self.bias,
            self.stride, self.padding, self.dilation, self.groups,
        )


class ConvTranspose1d(_ConvBase):
    _bias_axis = 1

    def __init__(self, cin, cout, k, rng, stride=1, padding=0, bias=True, weight_norm=False):
        super().__init__()
        self.stride, self.padding = stride, padding
        self._init_weight(rng, (cin, cout, k), cin * k, bias, weight_norm)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose1d(
            x, self.effective_weight(), self.bias, self.stride, self.padding
        )


class Conv2d(_ConvBase):
    _bias_axis = 0

    def __init__(self, cin, cout, kernel, rng, stride=(1, 1), padding=(0, 0), bias=True):
        super().__init__()
        kh, kw = kernel
        self.stride, self.padding = tuple(stride), tuple(padding)
        self._init_weight(rng, (cout, cin, kh, kw), cin * kh * kw, bias, False)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(_ConvBase):
    _bias_axis = 0

    def __init__(self, cin, cout, kernel, rng, stride=(1, 1, 1), padding=(0, 0, 0), bias=True):
        super().__init__()
        kd, kh, kw = kernel
        self.stride, self.padding = tuple(stride), tuple(padding)
        self._init_weight(rng, (cout, cin, kd, kh, kw), cin * kd * kh * kw, bias, False)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class LSTM(Module):
    """Stacked (bi)directional LSTM over (B, T, I); outputs (B, T, dirs*H)."""

    def __init__(self, input_size: int, hidden_size: int, rng,
                 bidirectional: bool = True, num_layers: int = 1):
        super().__init__()
        self.hidden_size = hidden_size
        self.bidirectional = bidirectional
        self.num_layers = num_layers
        bound = 1.0 / np.sqrt(hidden_size)
        dirs = ("", "_reverse") if bidirectional else ("",)
        in_size = input_size
        for layer in range(num_layers):
            for d in dirs:
                setattr(self, f"weight_ih_l{layer}{d}",
                        Parameter(_uniform(rng, (4 * hidden_size, in_size), bound)))
                setattr(self, f"weight_hh_l{layer}{d}",
                        Parameter(_uniform(rng, (4 * hidden_size, hidden_size), bound)))
                setattr(self, f"bias_l{layer}{d}",
                        Parameter(_uniform(rng, (4 * hidden_size,), bound)))
            in_size = hidden_size * (2 if bidirectional else 1)

    def forward(self, x: Tensor) -> Tensor:
        for layer in range(self.num_layers):
            fwd = ops.lstm_seq(
                x,
                getattr(self, f"weight_ih_l{layer}"),
                getattr(self, f"weight_hh_l{layer}"),
                getattr(self, f"bias_l{layer}"),
            )
            if self.bidirectional:
                bwd = flip(
                    ops.lstm_seq(
                        flip(x, 1),
                        getattr(self, f"weight_ih_l{layer}_reverse"),
                        getattr(self, f"weight_hh_l{layer}_reverse"),
                        getattr(self, f"bias_l{layer}_reverse"),
                    ),
                    1,
                )
                x = concat([fwd, bwd], axis=-1)
            else:
                x = fwd
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=np.float32))
        self.bias = Parameter(np.zeros(dim, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / (var + self.eps) ** 0.5 * self.weight + self.bias


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.rng: np.random.Generator | None = None

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p <= 0.0:
            return x
        if self.rng is None:
            raise RuntimeError("training-mode dropout needs set_rng() first")
        keep = (self.rng.random(x.shape) >= self.p).astype(x.dtype)
        return x * Tensor(keep / np.asarray(1.0 - self.p, dtype=x.dtype))


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25):
        super().__init__()
        self.alpha = Parameter(np.full(channels, init, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return relu(x) - self.alpha.reshape(shape) * relu(-x)


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return leaky_relu(x, self.slope)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return relu(x)


class Tanh(Module):
    def forward(self, x: Tensor) -> Tensor:
        return tanh(x)


class SiLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return silu(x)


class AvgPool1d(Module):
    def __init__(self, k: int, stride: int, padding: int = 0):
        super().__init__()
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.avg_pool1d(x, self.k, self.stride, self.padding)


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x
