"""Soft-routed mixture of experts injected as a residual adapter."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .experts import EXPERT_NAMES, apply_expert, init_experts
from .params import ParamGroup, uniform_init, zeros
from .tensor import Tensor


@dataclass
class RouterParams(ParamGroup):
    W1: Tensor   # (C, hidden)
    b1: Tensor
    W2: Tensor   # (hidden, K)
    b2: Tensor

    @property
    def num_experts(self) -> int:
        return self.W2.shape[1]


def init_router(rng: np.random.Generator, channels: int, num_experts: int = 4, hidden: int | None = None,
                dtype=None) -> RouterParams:
    hidden = hidden or max(channels // 2, 4)
    return RouterParams(
        W1=uniform_init(rng, (channels, hidden), channels, dtype),
        b1=zeros((hidden,), dtype),
        W2=uniform_init(rng, (hidden, num_experts), hidden, dtype),
        b2=zeros((num_experts,), dtype),
    )


@dataclass
class LayerAdapter(ParamGroup):
    router: RouterParams
    experts: dict = field(default_factory=dict)   # name -> expert params, routing order

    @property
    def expert_names(self) -> tuple:
        return tuple(self.experts)


@dataclass
class AdapterState(ParamGroup):
    """Router plus experts for every injected layer (1-based indices)."""
    layers: dict = field(default_factory=dict)    # int -> LayerAdapter

    @property
    def injected_layers(self) -> tuple:
        return tuple(sorted(self.layers))

    def named_parameters(self, prefix: str = ""):
        for l in self.injected_layers:
            la = self.layers[l]
            yield from la.router.named_parameters(f"{prefix}layer{l}.router.")
            for name, params in la.experts.items():
                yield from params.named_parameters(f"{prefix}layer{l}.expert{name}.")


def init_adapter(rng: np.random.Generator, channels: int, injected_layers=(3, 4),
                 expert_names=EXPERT_NAMES, dtype=None) -> AdapterState:
    expert_names = tuple(expert_names)
    if not expert_names:
        raise ContractError("the adapter needs at least one expert")
    unknown = set(expert_names) - set(EXPERT_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown experts {sorted(unknown)}")
    layers = {}
    for l in sorted(set(injected_layers)):
        layers[l] = LayerAdapter(
            router=init_router(rng, channels, len(expert_names), dtype=dtype),
            experts=init_experts(rng, channels, expert_names, dtype=dtype),
        )
    return AdapterState(layers=layers)


@dataclass
class RoutingRecord:
    """Expert weights of one routed forward pass, shape (N, K)."""
    weights: Tensor
    layer: int | None = None

    def __post_init__(self):
        w = self.weights.data
        if w.ndim != 2:
            raise DimensionError(f"routing weights must be (N, K), got {w.shape}")


def route_weights(x, r: RouterParams) -> Tensor:
    """softmax(W2 relu(W1 GAP(x) + b1) + b2) per sample."""
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"route_weights expects NCHW, got {x.shape}")
    if x.shape[1] != r.W1.shape[0]:
        raise ConfigurationError(f"router expects {r.W1.shape[0]} channels, input has {x.shape[1]}")
    h = T.relu(T.matmul(T.global_avg_pool(x), r.W1) + r.b1)
    return T.softmax_stable(T.matmul(h, r.W2) + r.b2, axis=1)


def fuse_experts(x, w, experts: dict, outputs=None) -> Tensor:
    """Sum_i w[:, i] * E_i(x).

    ``outputs`` may supply precomputed expert outputs in routing order.
    """
    x = T.as_tensor(x)
    w = T.as_tensor(w)
    names = list(experts)
    if w.ndim != 2 or w.shape[1] != len(names):
        raise DimensionError(f"weights {w.shape} do not match {len(names)} experts")
    if outputs is None:
        outputs = [apply_expert(n, x, experts[n]) for n in names]
    total = None
    for i, out in enumerate(outputs):
        out = T.as_tensor(out)
        if out.shape != x.shape:
            raise ContractError(f"expert {names[i]} returned {out.shape}, expected {x.shape}")
        term = out * T.reshape(w[:, i], (w.shape[0], 1, 1, 1))
        total = term if total is None else total + term
    return total


def tokens_to_grid(tokens: Tensor) -> Tensor:
    """(N, L, C) -> (N, C, sqrt L, sqrt L)."""
    N, L, C = tokens.shape
    side = int(round(np.sqrt(L)))
    if side * side != L:
        raise DimensionError(f"token count {L} is not a perfect square")
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (N, C, side, side))


def grid_to_tokens(grid: Tensor) -> Tensor:
    N, C, H, W = grid.shape
    return T.transpose(T.reshape(grid, (N, C, H * W)), (0, 2, 1))


def adapter_apply(block_out, x_in, layer: int, a: AdapterState) -> tuple[Tensor, RoutingRecord]:
    """x_{l+1} = block_out + sum_i w_i E_i(x_in) for an injected layer.

    Inputs may be token sequences (N, L, C) or grids (N, C, H, W); the
    result has the layout of ``block_out``.
    """
    if layer not in a.layers:
        raise ContractError(f"layer {layer} has no adapter (injected: {a.injected_layers})")
    block_out, x_in = T.as_tensor(block_out), T.as_tensor(x_in)
    la = a.layers[layer]
    grid = tokens_to_grid(x_in) if x_in.ndim == 3 else x_in
    w = route_weights(grid, la.router)
    fused = fuse_experts(grid, w, la.experts)
    if block_out.ndim == 3:
        fused = grid_to_tokens(fused)
    if fused.shape != block_out.shape:
        raise DimensionError(f"adapter output {fused.shape} != block output {block_out.shape}")
    return block_out + fused, RoutingRecord(weights=w, layer=layer)


def accumulate_routing_stats(records) -> tuple[np.ndarray, Tensor]:
    """Selection frequency f (argmax, ties to lowest index) and mean weight P.

    ``f`` is a constant array; ``P`` stays differentiable.
    """
    records = list(records)
    if not records:
        raise ContractError("no routing records to accumulate")
    weights = records[0].weights if len(records) == 1 else T.concat([r.weights for r in records], axis=0)
    K = weights.shape[1]
    winners = np.argmax(weights.data, axis=1)   # argmax returns the first maximum
    f = np.bincount(winners, minlength=K) / weights.shape[0]
    P = T.mean(weights, axis=0)
    return f, P
