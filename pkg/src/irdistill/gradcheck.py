"""Finite-difference verification of every differentiable component.

Each check builds a random scalar probe ``sum(out * R)`` at 64-bit precision
and compares analytic gradients of every input and parameter with central
differences. Inputs are 8x8 maps with 4 channels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import experts as E
from . import losses as LS
from . import moe
from . import tensor as T
from .tensor import Tensor

SCOPES = ("primitives", "experts", "router", "losses")
SHAPE = (2, 4, 8, 8)
STEP = 1e-5
# Coordinates that disagree at STEP are re-probed with smaller central steps
# and with one-sided steps. A probe that straddles a ReLU or |.| kink is
# wrong for the step that crosses it, and a kink lies on one side only;
# roundoff keeps the smaller steps from being the default.
FALLBACK_STEPS = ((1e-6, 0), (1e-7, 0), (1e-6, 1), (1e-6, -1), (1e-8, 0))


@dataclass
class CheckResult:
    name: str
    worst: float
    ok: bool

    def line(self) -> str:
        return f"{self.name} {self.worst:.3e} {'pass' if self.ok else 'fail'}"


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _difference(probe, x: Tensor, indices, h: float, side: int = 0) -> np.ndarray:
    """Central (side 0) or one-sided (+1 forward, -1 backward) differences."""
    flat = x.data.reshape(-1)
    lo, hi = {0: (-h, h), 1: (0.0, h), -1: (-h, 0.0)}[side]
    out = np.empty(len(indices))
    with T.no_grad():
        for n, i in enumerate(indices):
            orig = flat[i]
            flat[i] = orig + hi
            fp = probe().item()
            flat[i] = orig + lo
            fm = probe().item()
            flat[i] = orig
            out[n] = (fp - fm) / (hi - lo)
    return out


def _mismatch(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-element error on the scale used by ``gradient_error``."""
    diff = np.abs(analytic - numeric)
    small = np.abs(analytic) < floor
    return np.where(small, diff / floor * 1e-4, diff / np.maximum(np.abs(analytic), 1e-300))


def check_component(probe, leaves) -> tuple[float, bool]:
    """Worst error over all leaves of a scalar-valued ``probe()``."""
    for x in leaves:
        x.grad = None
    T.backward(probe(), params=leaves)
    worst, ok = 0.0, True
    for x in leaves:
        analytic = x.grad.reshape(-1).copy()
        numeric = T.finite_difference_gradient(lambda _: probe(), x, h=STEP).reshape(-1)
        for h, side in FALLBACK_STEPS:
            bad = np.flatnonzero(_mismatch(analytic, numeric) > 1e-4)
            if not bad.size:
                break
            retry = _difference(probe, x, bad, h, side)
            better = _mismatch(analytic[bad], retry) < _mismatch(analytic[bad], numeric[bad])
            numeric[bad[better]] = retry[better]
        w, o = T.gradient_error(analytic, numeric)
        worst, ok = max(worst, w), ok and o
    return worst, ok


def _projected(fn, out_shape, rng):
    R = rng.normal(size=out_shape)
    return lambda: T.tsum(fn() * R)


# each builder takes an rng and returns (probe, leaves)
def _conv(rng):
    x, k, b = _leaf(rng.normal(size=SHAPE)), _leaf(rng.normal(size=(4, 4, 3, 3))), _leaf(rng.normal(size=4))
    return _projected(lambda: T.conv2d(x, k, b, padding="reflect"), SHAPE, rng), [x, k, b]


def _conv_transpose(rng):
    x, k = _leaf(rng.normal(size=SHAPE)), _leaf(rng.normal(size=(4, 3, 2, 2)))
    return _projected(lambda: T.conv_transpose2x2(x, k), (2, 3, 16, 16), rng), [x, k]


def _bilinear(rng):
    x = _leaf(rng.normal(size=SHAPE))
    # keep coordinates off the integer lattice, where the interpolant has kinks
    c = _leaf(rng.integers(-1, 8, size=(2, 5, 3, 2)) + rng.uniform(0.1, 0.9, size=(2, 5, 3, 2)))
    return _projected(lambda: T.bilinear_sample(x, c), (2, 4, 5, 3), rng), [x, c]


def _softmax(rng):
    x = _leaf(rng.normal(size=SHAPE))
    return _projected(lambda: T.softmax_stable(x, axis=1), SHAPE, rng), [x]


def _layer_norm(rng):
    x, g, b = _leaf(rng.normal(size=SHAPE)), _leaf(rng.normal(size=8)), _leaf(rng.normal(size=8))
    return _projected(lambda: T.layer_norm(x, g, b), SHAPE, rng), [x, g, b]


def _gelu(rng):
    x = _leaf(rng.normal(size=SHAPE))
    return _projected(lambda: T.gelu(x), SHAPE, rng), [x]


def _max_pool(rng):
    x = _leaf(rng.normal(size=SHAPE))
    return _projected(lambda: T.max_pool2x2(x), (2, 4, 4, 4), rng), [x]


def _expert(name):
    def build(rng):
        x = _leaf(rng.normal(size=SHAPE))
        with T.default_dtype(np.float64):
            p = E.init_experts(rng, SHAPE[1], (name,))[name]
        if name == "spd":
            for t in p.parameters():
                t.data = t.data + 0.1 * rng.normal(size=t.shape)
        if name == "tgds":
            # nonzero offsets move sample points off integer coordinates
            p.offset_w.data = 0.3 * rng.normal(size=p.offset_w.shape)
            p.offset_b.data = 0.3 * rng.normal(size=p.offset_b.shape)

        def out():
            y = E.apply_expert(name, x, p)
            return y[0] if isinstance(y, tuple) else y
        return _projected(out, SHAPE, rng), [x] + p.parameters()
    return build


def _router(rng):
    x = _leaf(rng.normal(size=SHAPE))
    with T.default_dtype(np.float64):
        r = moe.init_router(rng, SHAPE[1], 4)
    return _projected(lambda: moe.route_weights(x, r), (2, 4), rng), [x] + r.parameters()


def _bce(rng):
    z, t = _leaf(rng.normal(size=(2, 1, 8, 8))), (rng.random((2, 1, 8, 8)) < 0.2).astype(float)
    return lambda: LS.bce_loss(z, t), [z]


def _dice(rng):
    z, t = _leaf(rng.normal(size=(2, 1, 8, 8))), (rng.random((2, 1, 8, 8)) < 0.2).astype(float)
    return lambda: LS.dice_loss(z, t), [z]


def _sparse(rng):
    f = rng.dirichlet(np.ones(4))
    logits = _leaf(rng.normal(size=4))
    return lambda: LS.sparse_loss(f, T.softmax_stable(logits, axis=0)), [logits]


def _topo(rng):
    m = _leaf(rng.uniform(0.05, 0.95, size=(2, 1, 8, 8)))
    # |.| has a kink at zero; random inputs avoid it almost surely
    return lambda: LS.topo_loss(m), [m]


COMPONENTS = {
    "primitives": {"conv2d": _conv, "conv_transpose2x2": _conv_transpose, "bilinear_sample": _bilinear,
                   "softmax_stable": _softmax, "layer_norm": _layer_norm, "gelu": _gelu,
                   "max_pool2x2": _max_pool},
    "experts": {f"expert_{n}": _expert(n) for n in E.EXPERT_NAMES},
    "router": {"router": _router},
    "losses": {"loss_bce": _bce, "loss_dice": _dice, "loss_sparse": _sparse, "loss_topo": _topo},
}


def run_gradcheck(scope: str = "all", seeds=range(5)) -> list[CheckResult]:
    """Worst error per component over ``seeds``; ``scope`` is one of SCOPES or 'all'."""
    if scope != "all" and scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES} or 'all', got {scope!r}")
    scopes = SCOPES if scope == "all" else (scope,)
    results = []
    with T.default_dtype(np.float64):
        for sc in scopes:
            for name, build in COMPONENTS[sc].items():
                worst, ok = 0.0, True
                for seed in seeds:
                    probe, leaves = build(np.random.default_rng(seed))
                    w, o = check_component(probe, leaves)
                    worst, ok = max(worst, w), ok and o
                results.append(CheckResult(name, worst, ok))
    return results


def format_report(results) -> str:
    return "".join(r.line() + "\n" for r in results)
