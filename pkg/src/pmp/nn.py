"""Small layer library on top of :mod:`pmp.autodiff`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    """Parameter container; parameters are listed in attribute declaration order."""

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{key}.{i}", item

    def name_parameters(self, prefix: str = "") -> "Module":
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(ad.default_dtype())


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = Parameter(glorot(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out, dtype=ad.default_dtype())) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


class MLP(Module):
    """Linear layers with ELU between them (no activation after the last)."""

    def __init__(self, rng: np.random.Generator, sizes: list[int], bias: bool = True):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.layers = [Linear(rng, a, b, bias=bias) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i:
                x = ad.elu(x)
            x = layer(x)
        return x


class GRUCell(Module):
    """Standard gated recurrent cell, all three gates from one fused projection."""

    def __init__(self, rng: np.random.Generator, d_in: int, hidden: int):
        self.hidden = hidden
        self.w_x = Parameter(glorot(rng, d_in, 3 * hidden))
        self.w_h = Parameter(glorot(rng, hidden, 3 * hidden))
        self.b = Parameter(np.zeros(3 * hidden, dtype=ad.default_dtype()))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        H = self.hidden
        gx = ad.add(ad.matmul(x, self.w_x), self.b)
        gh = ad.matmul(h, self.w_h)
        r = ad.sigmoid(ad.add(ad.slice_cols(gx, 0, H), ad.slice_cols(gh, 0, H)))
        z = ad.sigmoid(ad.add(ad.slice_cols(gx, H, 2 * H), ad.slice_cols(gh, H, 2 * H)))
        n = ad.tanh(ad.add(ad.slice_cols(gx, 2 * H, 3 * H), ad.mul(r, ad.slice_cols(gh, 2 * H, 3 * H))))
        # h' = (1 - z) * n + z * h
        return ad.add(n, ad.mul(z, ad.sub(h, n)))


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, n: int, dim: int):
        self.table = Parameter((rng.standard_normal((n, dim)) * 0.1).astype(ad.default_dtype()))

    def __call__(self, index) -> Tensor:
        return ad.gather_rows(self.table, index)
