"""Training objectives for both stages."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .tensor import Tensor


@dataclass
class LossWeights:
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    lambda_sparse: float = 0.01
    lambda_topo: float = 0.1
    alpha_sparse: float = 1.0
    dice_smooth: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ConfigurationError(f"{name} must be nonnegative, got {value}")


def _target(target, like: Tensor) -> np.ndarray:
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != like.shape:
        raise ContractError(f"target shape {t.shape} != prediction shape {like.shape}")
    return t.astype(like.dtype, copy=False)


def bce_loss(logits, target) -> Tensor:
    """Mean binary cross-entropy on logits: softplus(z) - t*z."""
    z = T.as_tensor(logits)
    t = _target(target, z)
    if not np.all((t == 0) | (t == 1)):
        raise ContractError("BCE target must be binary")
    return T.mean(T.softplus(z) - z * t)


def dice_loss(logits, target, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p t) + s) / (sum p + sum t + s), sums over the whole batch."""
    z = T.as_tensor(logits)
    t = _target(target, z)
    p = T.sigmoid(z)
    inter = T.tsum(p * t)
    return 1.0 - (inter * 2.0 + smooth) / (T.tsum(p) + (float(t.sum()) + smooth))


def sparse_loss(f, P, alpha: float = 1.0) -> Tensor:
    """Load-balancing penalty alpha * K * sum_i f_i P_i."""
    f = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    P = T.as_tensor(P)
    K = f.shape[0]
    if P.shape != (K,):
        raise ContractError(f"f has {K} entries, P has shape {P.shape}")
    for name, v in (("f", f), ("P", P.data)):
        if np.any(v < -1e-6) or abs(float(np.sum(v)) - 1.0) > 1e-6:
            raise ContractError(f"{name} is not on the probability simplex: {v}")
    return T.tsum(P * f.astype(P.dtype)) * (alpha * K)


def neighbor_mean(m: np.ndarray) -> np.ndarray:
    """Mean of the existing 4-neighbours of every pixel of (..., H, W)."""
    pad = np.pad(m, [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)])
    total = pad[..., :-2, 1:-1] + pad[..., 2:, 1:-1] + pad[..., 1:-1, :-2] + pad[..., 1:-1, 2:]
    return total / neighbor_count(m.shape[-2:])


def neighbor_count(hw) -> np.ndarray:
    H, W = hw
    count = np.full((H, W), 4.0)
    count[0, :] -= 1
    count[-1, :] -= 1
    count[:, 0] -= 1
    count[:, -1] -= 1
    return count


def topo_loss(pred_prob) -> Tensor:
    """Mean over images of (1/HW) sum |M - mean of its 4-neighbours|."""
    m = T.as_tensor(pred_prob)
    H, W = m.shape[-2:]
    pad = T.pad2d(m, 1, "zero")
    total = pad[..., :-2, 1:-1] + pad[..., 2:, 1:-1] + pad[..., 1:-1, :-2] + pad[..., 1:-1, 2:]
    inv = Tensor(1.0 / neighbor_count((H, W)), dtype=m.dtype)
    return T.mean(T.tabs(m - total * inv))


def total_loss_stage1(logits, target, f, P, pred_prob, w: LossWeights | None = None) -> tuple[Tensor, dict]:
    """Weighted BCE + Dice + sparsity + topology terms.

    Returns the total and the unweighted components as floats. Without a
    router (``f`` is None) the sparsity term is zero.
    """
    w = w or LossWeights()
    bce = bce_loss(logits, target)
    dice = dice_loss(logits, target, w.dice_smooth)
    topo = topo_loss(pred_prob)
    total = bce * w.lambda_bce + dice * w.lambda_dice + topo * w.lambda_topo
    sparse_value = 0.0
    if f is not None:
        sparse = sparse_loss(f, P, w.alpha_sparse)
        total = total + sparse * w.lambda_sparse
        sparse_value = sparse.item()
    parts = {"bce": bce.item(), "dice": dice.item(), "sparse": sparse_value, "topo": topo.item()}
    return total, parts


def total_loss_stage2(logits, pseudo_target, w: LossWeights | None = None) -> tuple[Tensor, dict]:
    """Weighted BCE + Dice against pseudo masks only."""
    w = w or LossWeights()
    bce = bce_loss(logits, pseudo_target)
    dice = dice_loss(logits, pseudo_target, w.dice_smooth)
    total = bce * w.lambda_bce + dice * w.lambda_dice
    return total, {"bce": bce.item(), "dice": dice.item(), "sparse": 0.0, "topo": 0.0}


def weighted_total(parts: dict, w: LossWeights) -> float:
    return (w.lambda_bce * parts["bce"] + w.lambda_dice * parts["dice"]
            + w.lambda_sparse * parts["sparse"] + w.lambda_topo * parts["topo"])
