"""Two-stage training procedures, evaluation, and ablations.

Stage one trains a routed expert adapter plus mask decoder on the labeled
subset while the encoder stays frozen. The trained teacher then labels every
training image, and stage two trains a small student on those masks alone.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as LS
from . import tensor as T
from .checkpoint import Checkpoint, config_hash
from .data import (PSEUDO_DIR, Manifest, build_pseudo_dataset, check_entries,
                   generate_dataset, holdout_split, load_arrays, make_splits, relpath, write_dataset,
                   write_mask)
from .errors import ConfigurationError, ContractError, NonFiniteError
from .experts import EXPERT_NAMES, SHORT_NAMES
from .losses import LossWeights
from .metrics import MetricsReport, segmentation_metrics
from .models import (DEPTH, FrozenEncoder, MaskDecoder, StudentModel, decode_mask, encode_prefix,
                     encoder_forward, init_decoder, init_frozen_backbone, init_student, student_forward)
from .moe import AdapterState, accumulate_routing_stats, init_adapter
from .optim import AdamW, cosine_lr

log = logging.getLogger("irdistill")

INSERTIONS = {
    "none": (),
    "first_half": tuple(range(1, DEPTH // 2 + 1)),
    "last_half": tuple(range(DEPTH // 2 + 1, DEPTH + 1)),
    "all": tuple(range(1, DEPTH + 1)),
    "last_2": (DEPTH - 1, DEPTH),
}
LAMBDA_SPARSE_GRID = (0.001, 0.01, 0.08)
LOG_FIELDS = ("epoch", "L_total", "L_bce", "L_dice", "L_sparse", "L_topo",
              "val_mIoU", "val_nIoU", "val_Pd", "val_Fa", "wall_time")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
@dataclass
class TrainConfig:
    # stage one
    teacher_epochs: int = 30
    teacher_batch: int = 2
    # stage two
    student_epochs: int = 40
    student_batch: int = 16
    student_width: int = 16
    # optimizer, shared by both stages
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    # objective
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    lambda_sparse: float = 0.01
    lambda_topo: float = 0.1
    alpha_sparse: float = 1.0
    dice_smooth: float = 1.0
    # adapter
    insertion: str = "last_2"
    experts: str = "PI+SPD+HP+TG"
    # data
    n_scenes: int = 400
    label_fraction: float = 0.10
    val_fraction: float = 0.20
    data_seed: int = 0
    split_seed: int = 0
    backbone_seed: int = 0
    seed: int = 0
    eval_every: int = 5
    threshold: float = 0.5
    data_root: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.insertion not in INSERTIONS:
            raise ConfigurationError(f"insertion must be one of {sorted(INSERTIONS)}, got {self.insertion!r}")
        parse_experts(self.experts)
        for name in ("teacher_epochs", "teacher_batch", "student_epochs", "student_batch", "n_scenes"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        self.loss_weights()

    @classmethod
    def full_schedule(cls, **kw) -> "TrainConfig":
        """Epoch and batch counts of the full-scale recipe."""
        return cls(**{"teacher_epochs": 100, "teacher_batch": 32, "student_epochs": 400,
                      "student_batch": 16, **kw})

    @property
    def injected_layers(self) -> tuple:
        return INSERTIONS[self.insertion]

    @property
    def expert_names(self) -> tuple:
        return parse_experts(self.experts)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_bce, self.lambda_dice, self.lambda_sparse, self.lambda_topo,
                           self.alpha_sparse, self.dice_smooth)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    def hash(self) -> int:
        return config_hash(self.to_text())


_ABBREV = {v: k for k, v in SHORT_NAMES.items()}   # long name -> short


def parse_experts(spec: str) -> tuple:
    """'PI+SPD' -> ('pimdo', 'spd'); long names are accepted too. Order follows the canonical list."""
    tokens = [t.strip() for t in str(spec).replace(",", "+").split("+") if t.strip()]
    if not tokens:
        raise ContractError("expert subset must be nonempty")
    names = set()
    for t in tokens:
        name = SHORT_NAMES.get(t.upper(), t.lower())
        if name not in EXPERT_NAMES:
            raise ConfigurationError(f"unknown expert {t!r}")
        names.add(name)
    return tuple(n for n in EXPERT_NAMES if n in names)


def _coerce(field_, raw: str):
    kind = field_.type if isinstance(field_.type, str) else field_.type.__name__
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; blank lines and ``#`` comments ignored."""
    known = {f.name: f for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(known[key], value)
        except ValueError as exc:
            raise ConfigurationError(f"config line {lineno}: {exc}") from None
    return out


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------
def prepare_data(config: TrainConfig, root=None) -> Path:
    """Generate scenes, hold out a validation split, and write manifests.

    Writes ``train.tsv`` (labeled/unlabeled rows) and ``val.tsv``.
    """
    root = Path(root or config.data_root)
    samples = generate_dataset(config.n_scenes, seed=config.data_seed)
    write_dataset(samples, root)
    write_splits(config, root, [s.id for s in samples])
    return root


def write_splits(config: TrainConfig, root, ids) -> tuple[Manifest, Manifest]:
    root = Path(root)
    train_ids, val_ids = holdout_split(ids, config.val_fraction, config.split_seed)
    train = make_splits(train_ids, config.label_fraction, config.split_seed, root=root)
    val = make_splits(val_ids, 1.0, config.split_seed, root=root)
    train.write(root / "train.tsv")
    val.write(root / "val.tsv")
    return train, val


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


# ---------------------------------------------------------------------------
# run logs
# ---------------------------------------------------------------------------
@dataclass
class RunLog:
    rows: list = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append({k: row.get(k, "") for k in LOG_FIELDS})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _epoch_row(epoch: int, parts_sum: dict, total_sum: float, n_batches: int, w: LossWeights, t0: float) -> dict:
    parts = {k: v / n_batches for k, v in parts_sum.items()}
    total = total_sum / n_batches
    if abs(total - LS.weighted_total(parts, w)) > 1e-6 * max(1.0, abs(total)):
        raise ContractError(f"epoch {epoch}: logged total {total} != weighted components")
    return {"epoch": epoch, "L_total": total, "L_bce": parts["bce"], "L_dice": parts["dice"],
            "L_sparse": parts["sparse"], "L_topo": parts["topo"], "wall_time": time.perf_counter() - t0}


def _val_columns(report: MetricsReport | None) -> dict:
    if report is None:
        return {}
    return {"val_mIoU": report.mIoU, "val_nIoU": report.nIoU, "val_Pd": report.Pd, "val_Fa": report.Fa}


# ---------------------------------------------------------------------------
# stage one
# ---------------------------------------------------------------------------
@dataclass
class Teacher:
    encoder: FrozenEncoder
    decoder: MaskDecoder
    adapter: AdapterState | None

    @property
    def start_layer(self) -> int:
        """First block whose input can change during training."""
        if self.adapter is None or not self.adapter.layers:
            return self.encoder.depth + 1
        return min(self.adapter.injected_layers)

    def trainable(self) -> list:
        named = list(self.decoder.named_parameters("decoder."))
        if self.adapter is not None:
            named += list(self.adapter.named_parameters())
        return named

    def to_checkpoint(self, epoch=0, cfg_hash=0, rng=None, optimizer=None) -> Checkpoint:
        ck = Checkpoint(epoch=epoch, config_hash=cfg_hash, rng_state=rng.bit_generator.state if rng else None)
        ck.add("encoder.", self.encoder.state_dict())
        ck.add("decoder.", self.decoder.state_dict())
        if self.adapter is not None:
            ck.add("", self.adapter.state_dict())
        if optimizer is not None:
            ck.add("", optimizer.state_dict())
        return ck


def build_teacher(config: TrainConfig, dtype=np.float32) -> Teacher:
    with T.default_dtype(dtype):
        enc = init_frozen_backbone(config.backbone_seed)
        dec = init_decoder(config.seed)
        adapter = None
        if config.injected_layers:
            adapter = init_adapter(np.random.default_rng([config.seed, 1]), enc.width,
                                   config.injected_layers, config.expert_names)
    return Teacher(enc, dec, adapter)


def teacher_logits(t: Teacher, tokens) -> tuple:
    """Run the trainable part of the teacher from cached block inputs."""
    tokens = T.Tensor(tokens, dtype=t.encoder.patch_w.dtype)
    x, records = encoder_forward(t.encoder, None, t.adapter, start_layer=t.start_layer, tokens=tokens)
    return decode_mask(x, t.decoder), records


def predict_teacher(t: Teacher, images=None, batch: int = 32, cache=None) -> np.ndarray:
    """Foreground probabilities; ``cache`` may hold precomputed block inputs."""
    if cache is None:
        cache = encode_prefix(t.encoder, images, t.start_layer)
    out = []
    with T.no_grad():
        for i in range(0, cache.shape[0], batch):
            z, _ = teacher_logits(t, cache[i:i + batch])
            out.append(T._sigmoid_np(z.data))
    return np.concatenate(out)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best_checkpoint: Checkpoint
    log: RunLog
    best_val_mIoU: float | None = None
    final_val: MetricsReport | None = None


class _Validator:
    """Held-out images loaded once; ``prepare`` may cache a transform of them."""

    def __init__(self, manifest: Manifest | None, threshold: float, prepare=None):
        self.active = manifest is not None
        if self.active:
            images, self.masks, _ = load_arrays(manifest, mode="eval")
            self.inputs = prepare(images) if prepare else images.astype(np.float32)
        self.threshold = threshold

    def __call__(self, predict) -> MetricsReport:
        return segmentation_metrics(predict(self.inputs), self.masks, self.threshold)


def train_teacher(config: TrainConfig, manifest: Manifest, val_manifest: Manifest | None = None,
                  log_path=None) -> TrainResult:
    """Fit adapter and decoder on the labeled rows; the encoder never changes."""
    labeled = manifest.labeled
    if not labeled:
        raise ContractError("manifest has no labeled rows; stage one needs a nonempty labeled set")
    _check_disjoint(labeled, val_manifest)
    images, masks, _ = load_arrays(manifest, labeled, mode="teacher")
    teacher = build_teacher(config)
    before = teacher.encoder.checksum()
    cache = encode_prefix(teacher.encoder, images, teacher.start_layer)
    masks = masks.astype(np.float32)

    w = config.loss_weights()
    opt = AdamW(teacher.trainable(), config.lr, (config.beta1, config.beta2), weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 2])
    steps_per_epoch = -(-len(labeled) // config.teacher_batch)
    total_steps = steps_per_epoch * config.teacher_epochs
    frozen = teacher.encoder.parameters()
    validate = _Validator(val_manifest, config.threshold,
                          lambda im: encode_prefix(teacher.encoder, im, teacher.start_layer))
    runlog = RunLog()
    best, best_score = None, -np.inf
    report = None
    t0 = time.perf_counter()
    for epoch in range(1, config.teacher_epochs + 1):
        parts_sum = dict.fromkeys(("bce", "dice", "sparse", "topo"), 0.0)
        total_sum, n_batches = 0.0, 0
        for b, idx in enumerate(_batches(len(labeled), config.teacher_batch, rng)):
            opt.zero_grad()
            z, records = teacher_logits(teacher, cache[idx])
            f, P = accumulate_routing_stats(records) if records else (None, None)
            total, parts = LS.total_loss_stage1(z, masks[idx], f, P, T.sigmoid(z), w)
            if not np.isfinite(total.item()):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            T.backward(total, params=list(opt.params.values()))
            opt.step(cosine_lr(config.lr, opt.step_count, total_steps))
            total_sum += total.item()
            for k in parts_sum:
                parts_sum[k] += parts[k]
            n_batches += 1
        if any(p.grad is not None for p in frozen):
            raise ContractError("frozen encoder received gradients")
        row = _epoch_row(epoch, parts_sum, total_sum, n_batches, w, t0)
        if validate.active and (epoch % config.eval_every == 0 or epoch == config.teacher_epochs):
            report = validate(lambda c: predict_teacher(teacher, cache=c))
            row.update(_val_columns(report))
            if report.mIoU > best_score:
                best_score = report.mIoU
                best = teacher.to_checkpoint(epoch, config.hash())
        runlog.append(**row)
        log.info("teacher epoch %d loss %.4f %s", epoch, row["L_total"],
                 f"val mIoU {row['val_mIoU']:.4f}" if "val_mIoU" in row else "")
    if teacher.encoder.checksum() != before:
        raise ContractError("encoder parameters changed during stage one")
    final = teacher.to_checkpoint(config.teacher_epochs, config.hash(), rng, opt)
    if log_path:
        runlog.write(log_path)
    return TrainResult(final, best or final, runlog, None if best is None else best_score, report)


def load_teacher(ck: Checkpoint) -> Teacher:
    """Rebuild encoder, decoder, and adapter from a checkpoint's block names."""
    enc_state = ck.prefixed("encoder.")
    if not enc_state:
        raise ContractError("checkpoint has no encoder blocks")
    depth = 1 + max(int(k.split(".")[1]) for k in enc_state if k.startswith("blocks."))
    width = enc_state["patch_w"].shape[1]
    mlp = enc_state["blocks.0.fc1_w"].shape[1]
    with T.default_dtype(np.float32):
        enc = init_frozen_backbone(0, width=width, depth=depth, mlp_hidden=mlp)
        enc.load_state_dict(enc_state)
        dec = init_decoder(0, width=width)
        dec.load_state_dict(ck.prefixed("decoder."))
        layers, experts = set(), []
        for name in ck.blocks:
            if name.startswith("layer"):
                head, rest = name.split(".", 1)
                layers.add(int(head[5:]))
                if rest.startswith("expert"):
                    e = rest[6:].split(".", 1)[0]
                    if e not in experts:
                        experts.append(e)
        adapter = None
        if layers:
            adapter = init_adapter(np.random.default_rng(0), width, sorted(layers),
                                   [n for n in EXPERT_NAMES if n in experts])
            adapter.load_state_dict({k: v for k, v in ck.blocks.items() if k.startswith("layer")})
    return Teacher(enc, dec, adapter)


def generate_pseudo_labels(teacher_ck: Checkpoint, manifest: Manifest, out_dir=None) -> Manifest:
    """Label every row, labeled ones included, with the teacher's binarized mask."""
    teacher = load_teacher(teacher_ck)
    data_root = Path(manifest.root or ".")
    target = (Path(out_dir) if out_dir is not None else data_root) / PSEUDO_DIR
    target.mkdir(parents=True, exist_ok=True)
    images, _, ids = load_arrays(manifest, mode="eval")
    probs = predict_teacher(teacher, images)
    paths = {}
    for i, pid in enumerate(ids):
        write_mask(target / f"{pid}.pgm", probs[i, 0] > 0.5)
        paths[pid] = relpath(target / f"{pid}.pgm", data_root)
    return build_pseudo_dataset(manifest, paths)


# ---------------------------------------------------------------------------
# stage two
# ---------------------------------------------------------------------------
STUDENT_MODES = {"pseudo": "pseudo", "gt": "eval", "labeled": "teacher"}


def _student_rows(manifest: Manifest, mode: str) -> list:
    if mode not in STUDENT_MODES:
        raise ConfigurationError(f"student mode must be one of {sorted(STUDENT_MODES)}")
    if mode == "labeled":
        return manifest.labeled
    if mode == "gt":
        return [e for e in manifest.entries if e.provenance != "pseudo"]
    return check_entries(manifest.entries, "pseudo")


def predict_student(s: StudentModel, images, batch: int = 32) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, images.shape[0], batch):
            z = student_forward(s, T.Tensor(images[i:i + batch], dtype=s.head_w.dtype))
            out.append(T._sigmoid_np(z.data))
    return np.concatenate(out)


def student_checkpoint(s: StudentModel, epoch=0, cfg_hash=0, rng=None, optimizer=None) -> Checkpoint:
    ck = Checkpoint(epoch=epoch, config_hash=cfg_hash, rng_state=rng.bit_generator.state if rng else None)
    ck.add("student.", s.state_dict())
    if optimizer is not None:
        ck.add("", optimizer.state_dict())
    return ck


def load_student(ck: Checkpoint) -> StudentModel:
    state = ck.prefixed("student.")
    if not state:
        raise ContractError("checkpoint has no student blocks")
    with T.default_dtype(np.float32):
        s = init_student(0, width=state["head_w"].shape[1])
    s.load_state_dict(state)
    return s


def train_student(config: TrainConfig, manifest: Manifest, mode: str = "pseudo",
                  val_manifest: Manifest | None = None, log_path=None) -> TrainResult:
    """Train a fresh student with BCE + Dice.

    ``pseudo`` reads teacher masks only and refuses ground-truth paths;
    ``gt`` and ``labeled`` are the fully supervised and direct-training
    reference arms.
    """
    rows = _student_rows(manifest, mode)
    if not rows:
        raise ContractError(f"no rows to train on in mode {mode!r}")
    _check_disjoint(rows, val_manifest)
    images, masks, _ = load_arrays(manifest, rows, mode=STUDENT_MODES[mode])
    images = images.astype(np.float32)
    masks = masks.astype(np.float32)
    with T.default_dtype(np.float32):
        student = init_student(config.seed, config.student_width)
    w = config.loss_weights()
    opt = AdamW(student.named_parameters("student."), config.lr, (config.beta1, config.beta2),
                weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 3])
    total_steps = -(-len(rows) // config.student_batch) * config.student_epochs
    validate = _Validator(val_manifest, config.threshold)
    runlog = RunLog()
    best, best_score, report = None, -np.inf, None
    t0 = time.perf_counter()
    for epoch in range(1, config.student_epochs + 1):
        parts_sum = dict.fromkeys(("bce", "dice", "sparse", "topo"), 0.0)
        total_sum, n_batches = 0.0, 0
        for b, idx in enumerate(_batches(len(rows), config.student_batch, rng)):
            opt.zero_grad()
            z = student_forward(student, T.Tensor(images[idx], dtype=np.float32))
            total, parts = LS.total_loss_stage2(z, masks[idx], w)
            if not np.isfinite(total.item()):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            T.backward(total, params=list(opt.params.values()))
            opt.step(cosine_lr(config.lr, opt.step_count, total_steps))
            total_sum += total.item()
            for k in parts_sum:
                parts_sum[k] += parts[k]
            n_batches += 1
        row = _epoch_row(epoch, parts_sum, total_sum, n_batches, w, t0)
        if validate.active and (epoch % config.eval_every == 0 or epoch == config.student_epochs):
            report = validate(lambda im: predict_student(student, im))
            row.update(_val_columns(report))
            if report.mIoU > best_score:
                best_score = report.mIoU
                best = student_checkpoint(student, epoch, config.hash())
        runlog.append(**row)
        log.info("student[%s] epoch %d loss %.4f", mode, epoch, row["L_total"])
    final = student_checkpoint(student, config.student_epochs, config.hash(), rng, opt)
    if log_path:
        runlog.write(log_path)
    return TrainResult(final, best or final, runlog, None if best is None else best_score, report)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------
def _check_disjoint(train_rows, manifest: Manifest | None) -> None:
    if manifest is None:
        return
    overlap = sorted({e.id for e in train_rows} & set(manifest.ids))
    if overlap:
        raise ContractError(f"{len(overlap)} ids appear in both training and evaluation: {overlap[:5]}")


def predict(ck: Checkpoint, images) -> np.ndarray:
    """Foreground probabilities from either a teacher or a student checkpoint."""
    if ck.prefixed("student."):
        return predict_student(load_student(ck), images)
    return predict_teacher(load_teacher(ck), images)


def evaluate_model(ck: Checkpoint, manifest: Manifest, split: str = "val", train_ids=(),
                   csv_path=None, run_id: str = "run", threshold: float = 0.5) -> MetricsReport:
    """Score ``ck`` on the manifest's ground truth; refuses ids seen in training."""
    overlap = sorted(set(train_ids) & set(manifest.ids))
    if overlap:
        raise ContractError(f"{split} split overlaps training ids: {overlap[:5]}")
    images, masks, _ = load_arrays(manifest, [e for e in manifest.entries], mode="eval")
    report = segmentation_metrics(predict(ck, images), masks, threshold)
    if csv_path:
        path = Path(csv_path)
        header = not path.exists() or path.stat().st_size == 0
        with open(path, "a") as fh:
            fh.write(report.to_csv(run_id, split, header=header))
    return report


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------
ARMS = ("semi", "full", "direct")


def run_paradigm(config: TrainConfig, root, seeds=(0, 1, 2), out_dir=None) -> dict:
    """Teacher -> pseudo labels -> student, plus the two reference students.

    ``semi`` trains on pseudo labels, ``full`` on all training GT, and
    ``direct`` on the labeled GT subset only. Returns per-seed val mIoU lists
    keyed by arm, plus the teacher's.
    """
    root = Path(root)
    results = {arm: [] for arm in ("teacher",) + ARMS}
    results["encoder_checksums"] = []
    ids = [p.stem for p in sorted((root / "images").glob("*.pgm"))]
    for seed in seeds:
        cfg = config.replace(seed=seed, split_seed=seed)
        run_dir = Path(out_dir or root / "runs") / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        train, val = write_splits(cfg, run_dir, ids)
        train.root = val.root = root
        teacher = train_teacher(cfg, train, val, log_path=run_dir / "teacher_log.csv")
        teacher.checkpoint.save(run_dir / "teacher.ckpt")
        results["teacher"].append(teacher.final_val.mIoU)
        results["encoder_checksums"].append(load_teacher(teacher.checkpoint).encoder.checksum())
        pseudo = generate_pseudo_labels(teacher.checkpoint, train, run_dir)
        pseudo.write(run_dir / "pseudo.tsv")
        for arm, manifest, mode in (("semi", pseudo, "pseudo"), ("full", train, "gt"), ("direct", train, "labeled")):
            res = train_student(cfg, manifest, mode, val, log_path=run_dir / f"student_{arm}_log.csv")
            results[arm].append(res.final_val.mIoU)
        log.info("seed %d: %s", seed, {k: v[-1] for k, v in results.items() if k in ARMS + ("teacher",)})
    return results


def run_ablation(axis: str, config: TrainConfig, root, values=None, seeds=(0,), csv_path=None) -> list[dict]:
    """Train and evaluate one teacher per (setting, seed) along ``axis``."""
    if axis == "insertion":
        values = values or tuple(INSERTIONS)
        settings = [(v, config.replace(insertion=v)) for v in values]
    elif axis == "experts":
        values = values or [_ABBREV[n] for n in EXPERT_NAMES] + ["+".join(_ABBREV[n] for n in EXPERT_NAMES)]
        settings = [(v, config.replace(experts=v)) for v in values]
    elif axis == "lambda_sparse":
        values = values or LAMBDA_SPARSE_GRID
        settings = [(f"{float(v):g}", config.replace(lambda_sparse=float(v))) for v in values]
    else:
        raise ConfigurationError(f"unknown ablation axis {axis!r}")
    root = Path(root)
    ids = [p.stem for p in sorted((root / "images").glob("*.pgm"))]
    rows = []
    for setting, cfg in settings:
        for seed in seeds:
            cfg_s = cfg.replace(seed=seed, split_seed=seed)
            train, val = write_splits(cfg_s, _scratch_dir(root, axis, setting, seed), ids)
            train.root = val.root = root
            res = train_teacher(cfg_s, train, val)
            rep = res.final_val
            layers = cfg_s.injected_layers
            rows.append({"axis": axis, "setting": setting, "seed": seed,
                         "layers": "+".join(map(str, layers)) or "-",
                         "experts": cfg_s.experts if layers else "-",
                         "lambda_sparse": cfg_s.lambda_sparse,
                         "mIoU": rep.mIoU, "nIoU": rep.nIoU, "Pd": rep.Pd, "Fa": rep.Fa})
            log.info("ablation %s=%s seed %d mIoU %.4f", axis, setting, seed, rep.mIoU)
    if csv_path:
        write_rows(csv_path, rows)
    return rows


def _scratch_dir(root: Path, axis: str, setting: str, seed: int) -> Path:
    d = root / "ablation" / axis / f"{setting.replace('+', '_')}_seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


ABLATION_FIELDS = ("axis", "setting", "seed", "layers", "experts", "lambda_sparse", "mIoU", "nIoU", "Pd", "Fa")


def write_rows(path, rows, fields=ABLATION_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
