"""Synthetic infrared scenes, splits, manifests, and bit-exact PGM files.

Directory layout under a data root::

    images/<id>.pgm   16-bit image, value = round(65535 * v)
    masks/<id>.pgm    8-bit ground truth, 0 or 255
    pseudo/<id>.pgm   8-bit teacher masks
    *.tsv             manifests
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage

from .errors import CompletenessError, ConfigurationError, ContractError, FormatError, GenerationError

PROVENANCES = ("labeled", "unlabeled", "pseudo")
GT_DIR = "masks"
PSEUDO_DIR = "pseudo"
IMAGE_DIR = "images"
MAX_ATTEMPTS = 100


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------
@dataclass
class SceneParams:
    size: int = 64
    n_targets: int | tuple = (1, 3)
    target_radius: float | tuple = (1.0, 3.0)
    target_intensity: float | tuple = (0.6, 1.0)
    noise_sigma: float | tuple = (0.02, 0.08)
    clutter_amplitude: float | tuple = (0.1, 0.35)
    background_level: float | tuple = (0.05, 0.3)
    clutter_edges: bool = True
    seed: int = 0

    def __post_init__(self):
        lo, hi = _bounds(self.target_radius)
        if lo < 1.0 or hi > 3.0:
            raise ConfigurationError("target radius must lie in [1, 3] px")
        nlo, nhi = _bounds(self.n_targets)
        if nlo < 1 or nhi > 3:
            raise ConfigurationError("between 1 and 3 targets per scene")
        ilo, ihi = _bounds(self.target_intensity)
        if ilo < 0.6 or ihi > 1.0:
            raise ConfigurationError("target intensity must lie in [0.6, 1.0]")
        if self.size < 16:
            raise ConfigurationError("scenes must be at least 16 px")


def _bounds(v) -> tuple:
    return (v, v) if np.isscalar(v) else (v[0], v[1])


def _draw(rng: np.random.Generator, v) -> float:
    lo, hi = _bounds(v)
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


@dataclass
class Sample:
    image: np.ndarray            # (H, W) float in [0, 1]
    mask: np.ndarray             # (H, W) uint8 in {0, 1}
    id: str = ""
    provenance: str = "unlabeled"
    targets: list = field(default_factory=list)   # (cy, cx, r)


def disk(size: int, cy: int, cx: int, r: float) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _clutter(rng, size: int, amplitude: float) -> np.ndarray:
    field_ = np.zeros((size, size))
    for cells, weight in ((4, 1.0), (8, 0.5), (16, 0.25)):
        coarse = rng.normal(size=(cells, cells))
        field_ += weight * ndimage.zoom(coarse, size / cells, order=3, mode="reflect")[:size, :size]
    field_ -= field_.min()
    peak = field_.max()
    return amplitude * field_ / peak if peak > 0 else field_


def _line(rng, size: int) -> np.ndarray:
    """Anti-aliased straight line across the frame, values in [0, 1]."""
    theta = rng.uniform(0, np.pi)
    py, px = rng.uniform(0, size, 2)
    yy, xx = np.mgrid[:size, :size]
    dist = np.abs((yy - py) * np.cos(theta) - (xx - px) * np.sin(theta))
    return np.clip(1.0 - dist, 0.0, 1.0)


def generate_scene(p: SceneParams, id: str = "") -> Sample:
    """Draw one scene; the mask marks exactly the target disks."""
    rng = np.random.default_rng(p.seed)
    S = p.size
    nlo, nhi = _bounds(p.n_targets)
    n = int(rng.integers(nlo, nhi + 1))
    for _attempt in range(MAX_ATTEMPTS):
        targets = []
        for _ in range(n):
            r = _draw(rng, p.target_radius)
            m = int(math.ceil(r))
            cy, cx = (int(v) for v in rng.integers(m, S - m, size=2))
            targets.append((cy, cx, r))
        if all(math.hypot(a[0] - b[0], a[1] - b[1]) > a[2] + b[2] + 2
               for i, a in enumerate(targets) for b in targets[i + 1:]):
            break
    else:
        raise GenerationError(f"could not place {n} targets without overlap in {MAX_ATTEMPTS} attempts")

    background = np.full((S, S), _draw(rng, p.background_level))
    amp = _draw(rng, p.clutter_amplitude)
    if amp > 0:
        background += _clutter(rng, S, amp)
    mask = np.zeros((S, S), dtype=bool)
    for cy, cx, r in targets:
        mask |= disk(S, cy, cx, r)
    if p.clutter_edges:
        keep_out = ndimage.binary_dilation(mask, iterations=3)
        for _ in range(int(rng.integers(0, 3))):
            background += _draw(rng, (0.15, 0.35)) * _line(rng, S) * ~keep_out

    signal = np.zeros((S, S))
    for cy, cx, r in targets:
        yy, xx = np.mgrid[:S, :S]
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        inside = d2 <= r * r
        signal[inside] = np.maximum(signal[inside], _draw(rng, p.target_intensity) * (1.0 - 0.5 * d2[inside] / (r * r)))
    sigma = _draw(rng, p.noise_sigma)
    noise = rng.normal(0.0, sigma, (S, S)) if sigma > 0 else 0.0
    image = np.clip(background + signal + noise, 0.0, 1.0)

    for cy, cx, r in targets:
        ring = disk(S, cy, cx, r + 5) & ~disk(S, cy, cx, r + 2) & ~mask
        local = float(image[ring].mean()) if ring.any() else float(background.mean())
        peak = float(image[disk(S, cy, cx, r)].max())
        if peak - local < 0.2:
            raise GenerationError(f"target at ({cy}, {cx}) not detectable: peak {peak:.3f}, local {local:.3f}")
    return Sample(image=image, mask=mask.astype(np.uint8), id=id, targets=targets)


def sample_id(index: int) -> str:
    return f"s{index:04d}"


def generate_dataset(n: int, seed: int = 0, params: SceneParams | None = None) -> list[Sample]:
    """``n`` scenes; scene i uses a seed derived from (seed, i)."""
    base = params or SceneParams()
    out = []
    for i in range(n):
        ss = np.random.SeedSequence([seed, i])
        s = generate_scene(replace(base, seed=int(ss.generate_state(1)[0])), id=sample_id(i))
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------
def write_pgm(path, values: np.ndarray, maxval: int) -> None:
    """Binary P5 PGM; 16-bit samples are big-endian."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ContractError(f"PGM data must be 2-D, got {values.shape}")
    if not 0 < maxval < 65536:
        raise ContractError(f"maxval {maxval} out of range")
    if values.min(initial=0) < 0 or values.max(initial=0) > maxval:
        raise ContractError("PGM samples outside [0, maxval]")
    H, W = values.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n{maxval}\n".encode("ascii"))
        fh.write(values.astype(dtype).tobytes())


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header", start)
    return buf[start:pos], pos


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (samples, maxval) of a binary P5 file."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {buf[:2]!r})", 0)
    pos = 2
    fields_ = []
    for what in ("width", "height", "maxval"):
        tok, end = _header_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"{path}: bad {what} {tok!r}", pos)
        fields_.append(int(tok))
        pos = end
    W, H, maxval = fields_
    if not 0 < maxval < 65536 or W <= 0 or H <= 0:
        raise FormatError(f"{path}: invalid header values {fields_}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after maxval", pos)
    pos += 1
    width = 2 if maxval > 255 else 1
    need = W * H * width
    if len(buf) - pos < need:
        raise FormatError(f"{path}: expected {need} data bytes, found {len(buf) - pos}", len(buf))
    if len(buf) - pos > need:
        raise FormatError(f"{path}: {len(buf) - pos - need} trailing bytes", pos + need)
    data = np.frombuffer(buf, dtype=">u2" if width == 2 else "u1", count=W * H, offset=pos)
    return data.reshape(H, W).astype(np.uint16 if width == 2 else np.uint8), maxval


def quantize_image(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)


def write_image(path, image: np.ndarray) -> None:
    write_pgm(path, quantize_image(image), 65535)


def read_image(path) -> np.ndarray:
    values, maxval = read_pgm(path)
    if maxval != 65535:
        raise FormatError(f"{path}: image maxval {maxval}, expected 65535")
    return values.astype(np.float64) / 65535.0


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255, 255)


def read_mask(path) -> np.ndarray:
    values, maxval = read_pgm(path)
    if maxval != 255 or not np.all((values == 0) | (values == 255)):
        raise FormatError(f"{path}: mask must be 8-bit with values 0/255")
    return (values == 255).astype(np.uint8)


def save_sample(s: Sample, root) -> tuple[str, str]:
    """Write image and GT mask; returns their paths relative to ``root``."""
    root = Path(root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    (root / GT_DIR).mkdir(parents=True, exist_ok=True)
    img = f"{IMAGE_DIR}/{s.id}.pgm"
    msk = f"{GT_DIR}/{s.id}.pgm"
    write_image(root / img, s.image)
    write_mask(root / msk, s.mask)
    return img, msk


def sample_io_roundtrip(s: Sample, directory) -> Sample:
    img, msk = save_sample(s, directory)
    return Sample(image=read_image(Path(directory) / img), mask=read_mask(Path(directory) / msk),
                  id=s.id, provenance=s.provenance)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str
    mask: str
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")


@dataclass
class Manifest:
    entries: list
    split_seed: int = 0
    label_fraction: float = 1.0
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def subset(self, provenance: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.provenance == provenance]

    @property
    def labeled(self) -> list[ManifestEntry]:
        return self.subset("labeled")

    @property
    def unlabeled(self) -> list[ManifestEntry]:
        return self.subset("unlabeled")

    def resolve(self, rel: str) -> Path:
        return Path(rel) if self.root is None else Path(self.root) / rel

    def to_text(self) -> str:
        lines = [f"# split_seed={self.split_seed}\tlabel_fraction={self.label_fraction!r}"]
        lines += [f"{e.id}\t{e.image}\t{e.mask}\t{e.provenance}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path, root=None) -> "Manifest":
        path = Path(path)
        text = path.read_text()
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# "):
            raise FormatError(f"{path}: missing manifest header", 0)
        meta = dict(kv.split("=", 1) for kv in lines[0][2:].split("\t"))
        entries = []
        offset = len(lines[0]) + 1
        for line in lines[1:]:
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}: expected 4 tab-separated fields", offset)
            entries.append(ManifestEntry(*parts))
            offset += len(line) + 1
        return cls(entries, int(meta["split_seed"]), float(meta["label_fraction"]),
                   root=Path(root) if root is not None else path.parent)


def _ids_of(samples) -> list[str]:
    return sorted(s.id if isinstance(s, Sample) else str(s) for s in samples)


def labeled_count(total: int, fraction: float) -> int:
    # guard against 0.1 * 400 = 40.000000000000004
    return min(total, max(1, math.ceil(round(fraction * total, 9))))


def make_splits(samples, label_fraction: float = 0.10, split_seed: int = 0, root=None) -> Manifest:
    """Deterministically shuffle ids and label the first ceil(fraction * N)."""
    if not 0.0 < label_fraction <= 1.0:
        raise ConfigurationError(f"label_fraction {label_fraction} outside (0, 1]")
    ids = _ids_of(samples)
    if not ids:
        raise ContractError("cannot split an empty sample list")
    order = np.random.default_rng(split_seed).permutation(len(ids))
    k = labeled_count(len(ids), label_fraction)
    labeled = {ids[i] for i in order[:k]}
    entries = [ManifestEntry(i, f"{IMAGE_DIR}/{i}.pgm", f"{GT_DIR}/{i}.pgm",
                             "labeled" if i in labeled else "unlabeled") for i in ids]
    return Manifest(entries, split_seed, label_fraction, root=Path(root) if root is not None else None)


def holdout_split(samples, fraction: float = 0.2, seed: int = 0) -> tuple[list[str], list[str]]:
    """(train_ids, val_ids) with round(fraction * N) ids held out."""
    ids = _ids_of(samples)
    order = np.random.default_rng(seed + 7919).permutation(len(ids))
    n_val = int(round(fraction * len(ids)))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return train, val


def is_gt_path(rel: str) -> bool:
    parts = Path(rel).parts
    return len(parts) >= 2 and parts[-2] == GT_DIR


def build_pseudo_dataset(manifest: Manifest, teacher_masks: Mapping[str, str]) -> Manifest:
    """Manifest over every id with provenance ``pseudo`` and teacher mask paths."""
    missing = [e.id for e in manifest.entries if e.id not in teacher_masks]
    if missing:
        raise CompletenessError("no teacher mask for", missing)
    entries = []
    for e in manifest.entries:
        rel = str(teacher_masks[e.id])
        if is_gt_path(rel):
            raise ContractError(f"pseudo mask for {e.id} points at ground truth: {rel}")
        entries.append(ManifestEntry(e.id, e.image, rel, "pseudo"))
    return Manifest(entries, manifest.split_seed, manifest.label_fraction, root=manifest.root)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------
LOAD_MODES = ("teacher", "pseudo", "gt", "eval")


def check_entries(entries: Iterable[ManifestEntry], mode: str) -> list[ManifestEntry]:
    """Enforce which rows a training mode may read.

    ``teacher`` reads labeled rows only; ``pseudo`` refuses anything that is
    not a pseudo row or that points into the ground-truth directory.
    """
    entries = list(entries)
    if mode not in LOAD_MODES:
        raise ConfigurationError(f"unknown load mode {mode!r}")
    if mode == "pseudo":
        for e in entries:
            if e.provenance != "pseudo":
                raise ContractError(f"{e.id}: provenance {e.provenance!r} in pseudo mode")
            if is_gt_path(e.mask):
                raise ContractError(f"{e.id}: pseudo mode refuses ground-truth path {e.mask}")
    elif mode == "teacher":
        for e in entries:
            if e.provenance != "labeled":
                raise ContractError(f"{e.id}: teacher training reads labeled rows only")
    return entries


def load_arrays(manifest: Manifest, entries=None, mode: str = "eval") -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Images (N, 1, H, W) float64 and masks (N, 1, H, W) uint8 for the rows."""
    entries = check_entries(manifest.entries if entries is None else entries, mode)
    images, masks, ids = [], [], []
    for e in entries:
        ipath = manifest.resolve(e.image)
        if not ipath.exists():
            raise FileNotFoundError(f"{e.id}: missing image file {ipath}")
        images.append(read_image(ipath))
        masks.append(read_mask(manifest.resolve(e.mask)))
        ids.append(e.id)
    if not images:
        return np.zeros((0, 1, 0, 0)), np.zeros((0, 1, 0, 0), np.uint8), []
    return np.stack(images)[:, None], np.stack(masks)[:, None], ids


def write_dataset(samples: list[Sample], root) -> None:
    root = Path(root)
    for s in samples:
        save_sample(s, root)


def relpath(path, root) -> str:
    return os.path.relpath(path, root).replace(os.sep, "/")
