"""Command-line entry point.

Exit codes: 0 success, 1 contract/format/configuration error, 2 gradient
check failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .checkpoint import Checkpoint
from .data import Manifest
from .errors import IrDistillError
from .gradcheck import SCOPES, format_report, run_gradcheck
from .pipeline import (STUDENT_MODES, TrainConfig, evaluate_model, generate_pseudo_labels, load_config,
                       prepare_data, run_ablation, train_student, train_teacher, write_splits)

EXIT_OK, EXIT_ERROR, EXIT_GRADCHECK = 0, 1, 2


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of 'key = value' lines; flags override it")
    g = p.add_argument_group("training configuration")
    for f in dataclasses.fields(TrainConfig):
        kind = {"int": int, "float": float}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None,
                       help=f"default {f.default}")


def _config(args) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    return load_config(args.config, {k: v for k, v in vars(args).items() if k in names})


def _manifest(path, cfg: TrainConfig) -> Manifest:
    return Manifest.read(path, root=cfg.data_root)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    root = prepare_data(cfg)
    print(f"wrote {cfg.n_scenes} scenes and train/val manifests under {root}")
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _config(args)
    root = Path(cfg.data_root)
    ids = sorted(p.stem for p in (root / "images").glob("*.pgm"))
    if not ids:
        raise FileNotFoundError(f"no images under {root / 'images'}")
    out = Path(args.out or root)
    out.mkdir(parents=True, exist_ok=True)
    train, val = write_splits(cfg, out, ids)
    print(f"{len(train.labeled)} labeled, {len(train.unlabeled)} unlabeled, {len(val)} validation")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    val = _manifest(args.val, cfg) if args.val else None
    res = train_teacher(cfg, _manifest(args.manifest, cfg), val, log_path=args.log)
    res.checkpoint.save(args.out)
    if args.best:
        res.best_checkpoint.save(args.best)
    print(f"teacher saved to {args.out}")
    return EXIT_OK


def cmd_gen_pseudo(args) -> int:
    cfg = _config(args)
    pseudo = generate_pseudo_labels(Checkpoint.load(args.teacher), _manifest(args.manifest, cfg), args.pseudo_dir)
    target = args.pseudo_manifest or str(Path(cfg.data_root) / "pseudo.tsv")
    pseudo.write(target)
    print(f"{len(pseudo)} pseudo masks, manifest {target}")
    return EXIT_OK


def cmd_train_student(args) -> int:
    cfg = _config(args)
    val = _manifest(args.val, cfg) if args.val else None
    res = train_student(cfg, _manifest(args.manifest, cfg), args.mode, val, log_path=args.log)
    res.checkpoint.save(args.out)
    if args.best:
        res.best_checkpoint.save(args.best)
    print(f"student saved to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    train_ids = _manifest(args.train_manifest, cfg).ids if args.train_manifest else ()
    rep = evaluate_model(Checkpoint.load(args.ckpt), _manifest(args.manifest, cfg), args.split, train_ids,
                         csv_path=args.csv, run_id=args.run_id, threshold=cfg.threshold)
    print(rep.to_csv(args.run_id, args.split), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.scope, seeds=range(args.seeds))
    print(format_report(results), end="")
    return EXIT_OK if all(r.ok for r in results) else EXIT_GRADCHECK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    values = args.values.split(",") if args.values else None
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_ablation(args.axis, cfg, cfg.data_root, values, seeds, csv_path=args.csv)
    for r in rows:
        print(f"{r['setting']}\tseed {r['seed']}\tmIoU {r['mIoU']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic scenes and train/val manifests")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="rewrite train/val manifests for the existing scenes")
    p.add_argument("--out", help="directory for the manifests (default: data root)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-teacher", help="stage one: adapter + decoder on labeled rows")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True, help="final checkpoint path")
    p.add_argument("--best", help="best-validation checkpoint path")
    p.add_argument("--log", help="per-epoch CSV")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("gen-pseudo", help="label every manifest row with the teacher")
    p.add_argument("--teacher", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pseudo-dir", help="where pseudo/ is created (default: data root)")
    p.add_argument("--pseudo-manifest", help="output manifest path")
    p.set_defaults(func=cmd_gen_pseudo)

    p = sub.add_parser("train-student", help="stage two: student on pseudo masks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=sorted(STUDENT_MODES), default="pseudo")
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--best")
    p.add_argument("--log")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-manifest", help="refuse ids that appear here")
    p.add_argument("--split", default="val")
    p.add_argument("--run-id", default="run")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable component")
    p.add_argument("--scope", choices=SCOPES + ("all",), default="all")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="teacher runs along one ablation axis")
    p.add_argument("--axis", choices=("insertion", "experts", "lambda_sparse"), required=True)
    p.add_argument("--values", help="comma-separated settings (default: the full axis)")
    p.add_argument("--seeds", default="0")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_ablate)

    for name in ("gen-data", "split", "train-teacher", "gen-pseudo", "train-student", "eval", "ablate"):
        _add_config_flags(sub.choices[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (IrDistillError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
