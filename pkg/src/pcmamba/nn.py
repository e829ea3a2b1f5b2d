"""Parameter containers: token-wise linear maps, two-layer MLPs, name trees."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def param(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, std: float | None = None,
             bias: bool = True, zero: bool = False) -> "Linear":
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, std if std is not None else 1.0 / np.sqrt(n_in), (n_in, n_out))
        return cls(param(w), param(np.zeros(n_out)) if bias else None)

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Linear expects {self.n_in} input channels, got {x.shape[-1]}")
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


@dataclass
class MLP:
    """Token-wise two-layer map with a GELU between the layers."""

    inner: Linear
    outer: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, hidden: int | None = None,
             zero_out: bool = False) -> "MLP":
        hidden = hidden or c
        return cls(Linear.init(rng, c, hidden), Linear.init(rng, hidden, c, zero=zero_out))

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ad.gelu(self.inner(x)))


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a tree of dataclasses / lists / Tensors into ``{dotted.name: Tensor}``.

    Order is deterministic (field order), so names are stable across runs.
    """
    out: dict[str, Tensor] = {}
    if obj is None:
        return out
    if isinstance(obj, Tensor):
        out[prefix] = obj
        return out
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static"):
                continue
            out.update(named_parameters(getattr(obj, f.name), _join(prefix, f.name)))
        return out
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_parameters(item, _join(prefix, str(i))))
    return out


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def load_parameters(obj, arrays: dict[str, np.ndarray]) -> None:
    params = named_parameters(obj)
    missing = set(params) - set(arrays)
    unknown = set(arrays) - set(params)
    if missing or unknown:
        raise KeyError(f"parameter mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
    for name, t in params.items():
        if arrays[name].shape != t.shape:
            raise ValueError(f"{name}: shape {arrays[name].shape} != {t.shape}")
        t.data = np.array(arrays[name], dtype=np.float64)


def static(default=None):
    """Dataclass field that is configuration, not a learnable parameter."""
    return dataclasses.field(default=default, metadata={"static": True})
