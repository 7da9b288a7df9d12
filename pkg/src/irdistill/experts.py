"""The four white-box feature operators used inside the MoE adapter.

Each expert maps an (N, C, H, W) feature map to the same shape:

* ``pimdo`` -- learnable anisotropic diffusion, explicit Euler steps
* ``spd``   -- analysis filter bank, per-subband gating, synthesis bank
* ``hplsm`` -- shared convolution modulated by hypernetwork (gamma, beta)
* ``tgds``  -- deformable 3x3 sampling with predicted offsets
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .params import ParamGroup, parameter, uniform_init, zeros
from .tensor import Tensor

EXPERT_NAMES = ("pimdo", "spd", "hplsm", "tgds")
SHORT_NAMES = {"PI": "pimdo", "SPD": "spd", "HP": "hplsm", "TG": "tgds"}

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

NUM_SUBBANDS = 4
TGDS_TAPS = 9


# ---------------------------------------------------------------------------
# PIMDO
# ---------------------------------------------------------------------------
@dataclass
class PimdoParams(ParamGroup):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    dt: float = 0.2
    steps: int = 3
    eps: float = 1e-6

    def __post_init__(self):
        if not (0.0 < self.dt <= 0.25):
            raise ConfigurationError(f"dt={self.dt} outside (0, 0.25]")
        if self.steps < 0:
            raise ConfigurationError("steps must be nonnegative")


def init_pimdo(rng: np.random.Generator, hidden: int = 8, dtype=None) -> PimdoParams:
    return PimdoParams(
        w1=uniform_init(rng, (hidden,), 1, dtype),
        b1=parameter(np.full(hidden, 0.1), dtype=dtype),
        w2=uniform_init(rng, (hidden,), hidden, dtype),
        b2=zeros((1,), dtype),
    )


def sobel_gradients(x) -> tuple[Tensor, Tensor]:
    """Per-channel Sobel responses (reflect padding, fixed weights)."""
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"sobel_gradients expects NCHW, got {x.shape}")
    N, C, H, W = x.shape
    if H < 3 or W < 3:
        raise DimensionError(f"image {H}x{W} smaller than the 3x3 Sobel kernel")
    kx = Tensor(np.broadcast_to(SOBEL_X, (C, 1, 3, 3)).copy(), dtype=x.dtype)
    ky = Tensor(np.broadcast_to(SOBEL_Y, (C, 1, 3, 3)).copy(), dtype=x.dtype)
    return (T.conv2d(x, kx, groups=C, padding="reflect"),
            T.conv2d(x, ky, groups=C, padding="reflect"))


def diffusion_controller(mag: Tensor, p: PimdoParams) -> Tensor:
    """Pointwise 1 -> hidden -> 1 network; output in (0, 1)."""
    h = T.relu(T.reshape(mag, mag.shape + (1,)) * p.w1 + p.b1)
    z = T.matmul(h, T.reshape(p.w2, (p.w2.shape[0], 1)))
    return T.sigmoid(T.reshape(z, mag.shape) + p.b2)


def _diffusion_divergence(x: Tensor, c: Tensor) -> Tensor:
    """Conservative 5-point divergence of c*grad(x) with zero boundary flux."""
    dxf = x[:, :, :, 1:] - x[:, :, :, :-1]
    cx = (c[:, :, :, 1:] + c[:, :, :, :-1]) * 0.5
    fx = T.pad2d(cx * dxf, (0, 0, 1, 1), "zero")
    dyf = x[:, :, 1:, :] - x[:, :, :-1, :]
    cy = (c[:, :, 1:, :] + c[:, :, :-1, :]) * 0.5
    fy = T.pad2d(cy * dyf, (1, 1, 0, 0), "zero")
    return (fx[:, :, :, 1:] - fx[:, :, :, :-1]) + (fy[:, :, 1:, :] - fy[:, :, :-1, :])


def pimdo_forward(x, p: PimdoParams, conductance: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """Run ``p.steps`` explicit Euler steps of learnable anisotropic diffusion.

    ``conductance`` overrides the learned controller (maps gradient
    magnitude to conductance); used to pin the operator in tests.
    """
    x = T.as_tensor(x)
    if not (0.0 < p.dt <= 0.25):
        raise ConfigurationError(f"dt={p.dt} outside (0, 0.25]")
    if x.ndim != 4 or x.shape[2] < 3 or x.shape[3] < 3:
        raise DimensionError(f"pimdo_forward needs NCHW with H, W >= 3, got {x.shape}")
    ctrl = conductance or (lambda m: diffusion_controller(m, p))
    for _ in range(p.steps):
        gx, gy = sobel_gradients(x)
        mag = T.sqrt(gx * gx + gy * gy + p.eps)
        c = ctrl(mag)
        x = x + _diffusion_divergence(x, c) * p.dt
    return x


# ---------------------------------------------------------------------------
# SPD
# ---------------------------------------------------------------------------
HAAR_2X2 = 0.5 * np.array([
    [[1, 1], [1, 1]],      # LL
    [[1, 1], [-1, -1]],    # LH
    [[1, -1], [1, -1]],    # HL
    [[1, -1], [-1, 1]],    # HH
], dtype=np.float64)


@dataclass
class SpdParams(ParamGroup):
    analysis: Tensor      # (C*J, 1, 3, 3), depthwise with channel multiplier J
    synthesis: Tensor     # (C, J, 3, 3), grouped per channel
    att_w1: Tensor        # (J, hidden)
    att_b1: Tensor
    att_w2: Tensor        # (hidden, J)
    att_b2: Tensor
    padding: str = "circular"

    @property
    def num_subbands(self) -> int:
        return self.synthesis.shape[1]


def haar_filter_banks(channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Undecimated Haar analysis/synthesis kernels whose composition is identity."""
    J = NUM_SUBBANDS
    ana = np.zeros((channels * J, 1, 3, 3))
    syn = np.zeros((channels, J, 3, 3))
    for c in range(channels):
        for j in range(J):
            ana[c * J + j, 0, 1:, 1:] = HAAR_2X2[j]
            syn[c, j, :2, :2] = HAAR_2X2[j][::-1, ::-1] / 4.0
    return ana, syn


def init_spd(rng: np.random.Generator, channels: int, hidden: int = 16, dtype=None) -> SpdParams:
    ana, syn = haar_filter_banks(channels)
    J = NUM_SUBBANDS
    return SpdParams(
        analysis=parameter(ana, dtype=dtype),
        synthesis=parameter(syn, dtype=dtype),
        att_w1=uniform_init(rng, (J, hidden), J, dtype),
        att_b1=zeros((hidden,), dtype),
        att_w2=uniform_init(rng, (hidden, J), hidden, dtype),
        att_b2=zeros((J,), dtype),
    )


def spd_decompose(x: Tensor, p: SpdParams) -> Tensor:
    """Subbands z with shape (N, C, J, H, W)."""
    N, C, H, W = x.shape
    z = T.conv2d(x, p.analysis, groups=C, padding=p.padding)
    return T.reshape(z, (N, C, p.num_subbands, H, W))


def spectral_attention(z: Tensor, p: SpdParams) -> Tensor:
    """Gate alpha in (0, 1) per (sample, channel, subband)."""
    pooled = T.mean(z, axis=(3, 4))
    h = T.relu(T.matmul(pooled, p.att_w1) + p.att_b1)
    return T.sigmoid(T.matmul(h, p.att_w2) + p.att_b2)


def spd_synthesize(scaled: Tensor, p: SpdParams) -> Tensor:
    N, C, J, H, W = scaled.shape
    return T.conv2d(T.reshape(scaled, (N, C * J, H, W)), p.synthesis, groups=C, padding=p.padding)


def spd_forward(x, p: SpdParams, attention=None) -> Tensor:
    """Decompose, gate each subband, synthesize.

    ``attention`` (broadcastable to (N, C, J)) replaces the learned gate.
    """
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"spd_forward expects NCHW, got {x.shape}")
    C = x.shape[1]
    J = p.num_subbands
    if J != NUM_SUBBANDS or p.analysis.shape[0] != C * J:
        raise ConfigurationError(f"SPD needs {NUM_SUBBANDS} subbands over {C} channels, "
                                 f"got analysis {p.analysis.shape}, synthesis {p.synthesis.shape}")
    if p.synthesis.shape[0] != C:
        raise DimensionError(f"synthesis bank has {p.synthesis.shape[0]} channels, input {C}")
    z = spd_decompose(x, p)
    alpha = spectral_attention(z, p) if attention is None else T.as_tensor(attention)
    if alpha.ndim < 3:
        alpha = T.reshape(alpha, (1,) * (3 - alpha.ndim) + alpha.shape)
    scaled = z * T.reshape(alpha, alpha.shape + (1, 1))
    return spd_synthesize(scaled, p)


# ---------------------------------------------------------------------------
# HPLSM
# ---------------------------------------------------------------------------
@dataclass
class HplsmParams(ParamGroup):
    base_w: Tensor   # (C, C, 3, 3)
    base_b: Tensor
    hyp1_w: Tensor   # (Ch, C, 3, 3)
    hyp1_b: Tensor
    hyp2_w: Tensor   # (2C, Ch, 3, 3)
    hyp2_b: Tensor
    fc_w: Tensor     # (2C, 2C)
    fc_b: Tensor


def init_hplsm(rng: np.random.Generator, channels: int, hidden: int | None = None, dtype=None) -> HplsmParams:
    C = channels
    Ch = hidden or max(C // 2, 2)
    fc_b = np.zeros(2 * C)
    fc_b[:C] = 1.0  # gamma starts near 1
    return HplsmParams(
        base_w=uniform_init(rng, (C, C, 3, 3), 9 * C, dtype),
        base_b=zeros((C,), dtype),
        hyp1_w=uniform_init(rng, (Ch, C, 3, 3), 9 * C, dtype),
        hyp1_b=zeros((Ch,), dtype),
        hyp2_w=uniform_init(rng, (2 * C, Ch, 3, 3), 9 * Ch, dtype, scale=0.1),
        hyp2_b=zeros((2 * C,), dtype),
        fc_w=uniform_init(rng, (2 * C, 2 * C), 2 * C, dtype, scale=0.1),
        fc_b=parameter(fc_b, dtype=dtype),
    )


def hplsm_modulation(x: Tensor, p: HplsmParams) -> tuple[Tensor, Tensor]:
    """Per-location (gamma, beta) maps: pooled FC scalars plus the pre-pool maps."""
    C = p.base_w.shape[0]
    h = T.relu(T.conv2d(x, p.hyp1_w, p.hyp1_b))
    maps = T.conv2d(h, p.hyp2_w, p.hyp2_b)
    v = T.matmul(T.global_avg_pool(maps), p.fc_w) + p.fc_b
    v = T.reshape(v, v.shape + (1, 1))
    gamma = v[:, :C] + maps[:, :C]
    beta = v[:, C:] + maps[:, C:]
    return gamma, beta


def hplsm_forward(x, p: HplsmParams, modulation=None) -> Tensor:
    """gamma * conv(x) + beta; ``modulation`` = (gamma, beta) overrides the hypernetwork."""
    x = T.as_tensor(x)
    base = T.conv2d(x, p.base_w, p.base_b)
    gamma, beta = hplsm_modulation(x, p) if modulation is None else modulation
    return T.as_tensor(gamma) * base + T.as_tensor(beta)


# ---------------------------------------------------------------------------
# TGDS
# ---------------------------------------------------------------------------
@dataclass
class TgdsParams(ParamGroup):
    offset_w: Tensor   # (18, C, 3, 3)
    offset_b: Tensor
    agg_w: Tensor      # (C, C, 3, 3)
    agg_b: Tensor
    max_offset: float = 2.0


def init_tgds(rng: np.random.Generator, channels: int, dtype=None) -> TgdsParams:
    C = channels
    return TgdsParams(
        offset_w=zeros((2 * TGDS_TAPS, C, 3, 3), dtype),
        offset_b=zeros((2 * TGDS_TAPS,), dtype),
        agg_w=uniform_init(rng, (C, C, 3, 3), 9 * C, dtype),
        agg_b=zeros((C,), dtype),
    )


def sampling_grid(H: int, W: int) -> np.ndarray:
    """Regular 3x3 tap positions, shape (9, H, W, 2) as (y, x)."""
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    grid = np.empty((TGDS_TAPS, H, W, 2))
    k = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            grid[k, :, :, 0] = ii + dy
            grid[k, :, :, 1] = jj + dx
            k += 1
    return grid


def tgds_offsets(x: Tensor, p: TgdsParams) -> Tensor:
    """Bounded offsets (N, 18, H, W); channel 2k is dy and 2k+1 is dx of tap k."""
    raw = T.conv2d(x, p.offset_w, p.offset_b)
    return T.tanh(raw) * p.max_offset


def tgds_forward(x, p: TgdsParams, offsets=None) -> tuple[Tensor, Tensor]:
    """Deformable 3x3 convolution; returns (features, sampled coordinates).

    ``offsets`` (broadcastable to (N, 18, H, W)) replaces the predicted field.
    """
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 3 or x.shape[3] < 3:
        raise DimensionError(f"tgds_forward needs NCHW with H, W >= 3, got {x.shape}")
    N, C, H, W = x.shape
    off = tgds_offsets(x, p) if offsets is None else T.as_tensor(offsets)
    if off.shape[0] != N:
        off = off + Tensor(np.zeros((N, 2 * TGDS_TAPS, H, W)), dtype=x.dtype)
    off = T.transpose(T.reshape(off, (N, TGDS_TAPS, 2, H, W)), (0, 1, 3, 4, 2))
    coords = off + Tensor(sampling_grid(H, W), dtype=x.dtype)
    sampled = T.bilinear_sample(x, coords)                      # (N, C, 9, H, W)
    cols = T.reshape(sampled, (N, C * TGDS_TAPS, H * W))
    O = p.agg_w.shape[0]
    y = T.matmul(T.reshape(p.agg_w, (O, C * TGDS_TAPS)), cols)
    y = T.reshape(y, (N, O, H, W)) + T.reshape(p.agg_b, (1, O, 1, 1))
    return y, coords


# ---------------------------------------------------------------------------
def init_experts(rng: np.random.Generator, channels: int, names=EXPERT_NAMES, dtype=None) -> dict:
    makers = {
        "pimdo": lambda: init_pimdo(rng, dtype=dtype),
        "spd": lambda: init_spd(rng, channels, dtype=dtype),
        "hplsm": lambda: init_hplsm(rng, channels, dtype=dtype),
        "tgds": lambda: init_tgds(rng, channels, dtype=dtype),
    }
    return {name: makers[name]() for name in names}


def apply_expert(name: str, x, params) -> Tensor:
    if name == "pimdo":
        return pimdo_forward(x, params)
    if name == "spd":
        return spd_forward(x, params)
    if name == "hplsm":
        return hplsm_forward(x, params)
    if name == "tgds":
        return tgds_forward(x, params)[0]
    raise ConfigurationError(f"unknown expert {name!r}")
