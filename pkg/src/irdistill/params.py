"""Parameter containers and initializers."""
from __future__ import annotations

import dataclasses
import hashlib
from typing import Iterator

import numpy as np

from .tensor import Tensor, get_default_dtype


def parameter(data, trainable: bool = True, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or get_default_dtype()), requires_grad=trainable)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=None, trainable=True,
                 scale: float = 1.0) -> Tensor:
    bound = scale / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape), trainable, dtype)


def normal_init(rng: np.random.Generator, shape, std: float, dtype=None, trainable=True) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape), trainable, dtype)


def zeros(shape, dtype=None, trainable=True) -> Tensor:
    return parameter(np.zeros(shape), trainable, dtype)


class ParamGroup:
    """Mixin for dataclasses whose fields are tensors or nested groups."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            yield from _walk(value, name)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        for name, t in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing parameter block {name}")
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def _walk(value, name):
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, ParamGroup):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, dict):
        for k in value:
            yield from _walk(value[k], f"{name}.{k}")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
