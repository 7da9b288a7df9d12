"""Frozen transformer encoder, trainable mask decoder, and the student network."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .moe import AdapterState, RoutingRecord, adapter_apply, tokens_to_grid
from .params import ParamGroup, normal_init, parameter, uniform_init, zeros
from .tensor import Tensor

PATCH = 4
WIDTH = 32
DEPTH = 4
HEADS = 2
MLP_HIDDEN = 1536
PRIOR_LOGIT = -4.0   # output bias init: targets cover about 2% of pixels or less


# ---------------------------------------------------------------------------
# frozen encoder
# ---------------------------------------------------------------------------
@dataclass
class Block(ParamGroup):
    ln1_w: Tensor
    ln1_b: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    ln2_w: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class FrozenEncoder(ParamGroup):
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    blocks: list = field(default_factory=list)
    patch: int = PATCH
    heads: int = HEADS
    rng_seed: int = 0

    @property
    def width(self) -> int:
        return self.patch_w.shape[1]

    @property
    def depth(self) -> int:
        return len(self.blocks)


def _frozen(rng, shape, std, dtype):
    return normal_init(rng, shape, std, dtype, trainable=False)


def init_frozen_backbone(seed: int = 0, image_size: int = 64, width: int = WIDTH, depth: int = DEPTH,
                         heads: int = HEADS, mlp_hidden: int = MLP_HIDDEN, patch: int = PATCH,
                         dtype=None) -> FrozenEncoder:
    """Deterministic stand-in for a pretrained ViT; every parameter is frozen."""
    rng = np.random.default_rng(seed)
    tokens = (image_size // patch) ** 2
    blocks = []
    for _ in range(depth):
        blocks.append(Block(
            ln1_w=parameter(np.ones(width), False, dtype), ln1_b=parameter(np.zeros(width), False, dtype),
            qkv_w=_frozen(rng, (width, 3 * width), 0.02, dtype), qkv_b=parameter(np.zeros(3 * width), False, dtype),
            proj_w=_frozen(rng, (width, width), 0.02, dtype), proj_b=parameter(np.zeros(width), False, dtype),
            ln2_w=parameter(np.ones(width), False, dtype), ln2_b=parameter(np.zeros(width), False, dtype),
            fc1_w=_frozen(rng, (width, mlp_hidden), 0.02, dtype), fc1_b=parameter(np.zeros(mlp_hidden), False, dtype),
            fc2_w=_frozen(rng, (mlp_hidden, width), 0.02, dtype), fc2_b=parameter(np.zeros(width), False, dtype),
        ))
    return FrozenEncoder(
        patch_w=_frozen(rng, (patch * patch, width), 1.0 / patch, dtype),
        patch_b=parameter(np.zeros(width), False, dtype),
        pos=_frozen(rng, (tokens, width), 0.02, dtype),
        blocks=blocks, patch=patch, heads=heads, rng_seed=seed,
    )


def patch_embed(enc: FrozenEncoder, image) -> Tensor:
    image = T.as_tensor(image)
    if image.ndim != 4 or image.shape[1] != 1:
        raise DimensionError(f"expected (N, 1, H, W) images, got {image.shape}")
    N, _, H, W = image.shape
    p = enc.patch
    if H % p or W % p:
        raise DimensionError(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    if gh != gw:
        raise DimensionError("token grid must be square")
    if gh * gw != enc.pos.shape[0]:
        raise DimensionError(f"encoder built for {enc.pos.shape[0]} tokens, image gives {gh * gw}")
    patches = T.reshape(T.transpose(T.reshape(image, (N, gh, p, gw, p)), (0, 1, 3, 2, 4)), (N, gh * gw, p * p))
    return T.matmul(patches, enc.patch_w) + enc.patch_b + enc.pos


def block_forward(b: Block, x: Tensor, heads: int) -> Tensor:
    N, L, C = x.shape
    d = C // heads
    h = T.layer_norm(x, b.ln1_w, b.ln1_b)
    qkv = T.reshape(T.matmul(h, b.qkv_w) + b.qkv_b, (N, L, 3, heads, d))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax_stable(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d)), axis=-1)
    o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (N, L, C))
    x = x + T.matmul(o, b.proj_w) + b.proj_b
    h = T.layer_norm(x, b.ln2_w, b.ln2_b)
    return x + T.matmul(T.gelu(T.matmul(h, b.fc1_w) + b.fc1_b), b.fc2_w) + b.fc2_b


def encoder_forward(enc: FrozenEncoder, image, adapter: AdapterState | None = None,
                    start_layer: int = 1, tokens=None) -> tuple[Tensor, list[RoutingRecord]]:
    """PatchEmbed, then blocks 1..L; injected layers add the routed adapter.

    To resume from cached activations pass ``tokens`` (the input of block
    ``start_layer``) instead of the image.
    """
    x = patch_embed(enc, image) if tokens is None else T.as_tensor(tokens)
    records = []
    injected = set(adapter.injected_layers) if adapter is not None else set()
    for l in range(start_layer, enc.depth + 1):
        x_in = x
        block_out = block_forward(enc.blocks[l - 1], x_in, enc.heads)
        if l in injected:
            x, rec = adapter_apply(block_out, x_in, l, adapter)
            records.append(rec)
        else:
            x = block_out
    return x, records


def encode_prefix(enc: FrozenEncoder, image, upto_layer: int, batch: int = 32) -> np.ndarray:
    """Input tokens of block ``upto_layer`` with no adapter, computed without a graph."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    outs = []
    with T.no_grad():
        for i in range(0, image.shape[0], batch):
            x = patch_embed(enc, Tensor(image[i:i + batch], dtype=enc.patch_w.dtype))
            for l in range(1, upto_layer):
                x = block_forward(enc.blocks[l - 1], x, enc.heads)
            outs.append(x.data)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# mask decoder
# ---------------------------------------------------------------------------
@dataclass
class MaskDecoder(ParamGroup):
    up1_w: Tensor   # (C, C1, 2, 2)
    up1_b: Tensor
    up2_w: Tensor   # (C1, C2, 2, 2)
    up2_b: Tensor
    head_w: Tensor  # (1, C2, 1, 1)
    head_b: Tensor


def init_decoder(seed: int = 0, width: int = WIDTH, hidden=(32, 16), dtype=None) -> MaskDecoder:
    rng = np.random.default_rng(seed)
    c1, c2 = hidden
    return MaskDecoder(
        up1_w=uniform_init(rng, (width, c1, 2, 2), width, dtype, scale=np.sqrt(3.0)),
        up1_b=zeros((c1,), dtype),
        up2_w=uniform_init(rng, (c1, c2, 2, 2), c1, dtype, scale=np.sqrt(3.0)),
        up2_b=zeros((c2,), dtype),
        head_w=uniform_init(rng, (1, c2, 1, 1), c2, dtype),
        head_b=parameter(np.full(1, PRIOR_LOGIT), True, dtype),
    )


def decode_mask(tokens, dec: MaskDecoder) -> Tensor:
    """Token grid -> full-resolution logits (N, 1, 4*side, 4*side)."""
    tokens = T.as_tensor(tokens)
    grid = tokens_to_grid(tokens) if tokens.ndim == 3 else tokens
    h = T.relu(T.conv_transpose2x2(grid, dec.up1_w, dec.up1_b))
    h = T.relu(T.conv_transpose2x2(h, dec.up2_w, dec.up2_b))
    return T.conv2d(h, dec.head_w, dec.head_b)


# ---------------------------------------------------------------------------
# student
# ---------------------------------------------------------------------------
STUDENT_STAGES = ("enc1", "enc2", "enc3", "bottleneck", "dec3", "dec2", "dec1")


@dataclass
class StudentModel(ParamGroup):
    convs: dict = field(default_factory=dict)   # stage -> {"w", "b"}
    head_w: Tensor = None
    head_b: Tensor = None


def init_student(seed: int = 0, width: int = 16, dtype=None) -> StudentModel:
    rng = np.random.default_rng(seed)
    convs = {}
    for stage in STUDENT_STAGES:
        cin = 1 if stage == "enc1" else width
        convs[stage] = {
            "w": uniform_init(rng, (width, cin, 3, 3), 9 * cin, dtype, scale=np.sqrt(6.0)),
            "b": zeros((width,), dtype),
        }
    return StudentModel(
        convs=convs,
        head_w=uniform_init(rng, (1, width, 1, 1), width, dtype),
        head_b=parameter(np.full(1, PRIOR_LOGIT), True, dtype),
    )


def student_forward(s: StudentModel, image) -> Tensor:
    """Three pooling stages down, three upsampling stages with additive skips."""
    image = T.as_tensor(image)
    if image.ndim != 4 or image.shape[1] != 1:
        raise DimensionError(f"expected (N, 1, H, W) images, got {image.shape}")
    if image.shape[2] % 8 or image.shape[3] % 8:
        raise DimensionError(f"student needs sides divisible by 8, got {image.shape[2:]}")

    def conv(stage, x):
        return T.relu(T.conv2d(x, s.convs[stage]["w"], s.convs[stage]["b"]))

    e1 = conv("enc1", image)
    e2 = conv("enc2", T.max_pool2x2(e1))
    e3 = conv("enc3", T.max_pool2x2(e2))
    b = conv("bottleneck", T.max_pool2x2(e3))
    d3 = conv("dec3", T.upsample_nearest2x(b) + e3)
    d2 = conv("dec2", T.upsample_nearest2x(d3) + e2)
    d1 = conv("dec1", T.upsample_nearest2x(d2) + e1)
    return T.conv2d(d1, s.head_w, s.head_b)
