"""``gaitenc`` command line.

Every command writes ``<main output>.manifest.json`` recording argv, the
resolved configuration and SHA-256 digests of its outputs; ``gaitenc replay``
re-runs a manifest and checks the digests.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attention import locality_statistic
from .benchmark import average_attention
from .numerics import NumericalError
from .reid import (
    FeatureError,
    RecognizerConfig,
    evaluate,
    extract_features,
    read_features_csv,
    train_recognizer,
    write_features_csv,
    write_report,
)
from .skeldata import DataError, GeneratorConfig, build_sequences, generate_synthetic, \
    load_dataset, save_dataset
from .trainer import CheckpointError, TrainConfig, load_checkpoint, save_checkpoint, train, \
    write_loss_csv

log = logging.getLogger("gaitenc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON in {p}: {exc}") from None


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    return p


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(main_output, argv, command, config, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "tool_version": __version__,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    path = Path(f"{main_output}.manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _overrides(args, mapping: dict) -> dict:
    return {key: getattr(args, attr) for attr, key in mapping.items()
            if getattr(args, attr, None) is not None}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, argv, started):
    cfg_dict = _read_json(args.config)
    cfg_dict.update(_overrides(args, {"identities": "num_identities", "videos": "videos_per_identity",
                                      "frames": "frames_per_video", "noise": "noise"}))
    try:
        cfg = GeneratorConfig.from_dict(cfg_dict)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid generator config: {exc}") from None
    ds = generate_synthetic(cfg.num_identities, cfg.videos_per_identity, cfg.frames_per_video,
                            args.seed, cfg)
    out = Path(args.out)
    save_dataset(ds, out)
    _write_manifest(out, argv, "gen-data", cfg.to_dict(), args.seed,
                    {"config": args.config}, [out], started)
    print(f"wrote {len(ds.videos)} videos of {ds.num_classes} identities to {out}")


TRAIN_FLAGS = {"attention": "attention", "f": "seq_len", "k": "hidden", "D": "window",
               "epochs": "epochs", "seed": "seed", "batch_size": "batch_size", "lr": "lr",
               "momentum": "momentum", "l2": "l2", "lambda_r": "lambda_rec",
               "lambda_a": "lambda_align", "discard": "discard"}


def cmd_train(args, argv, started):
    data_path = _require(args.dataset)
    cfg_dict = _read_json(args.config)
    cfg_dict.update(_overrides(args, TRAIN_FLAGS))
    if args.no_reverse:
        cfg_dict["reverse"] = False
    if args.center:
        cfg_dict["center"] = True
    try:
        cfg = TrainConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None
    ds = load_dataset(data_path)
    resume = load_checkpoint(_require(args.resume)) if args.resume else None
    ckpt, curve = train(ds, cfg, resume=resume,
                        on_epoch=lambda r: log.info("epoch %d total %.6g L_R %.6g L_A %.6g",
                                                    r["epoch"], r["total"], r["rec"], r["align"]))
    out = Path(args.out)
    save_checkpoint(ckpt, out)
    loss_csv = Path(args.loss_csv or f"{out}.loss.csv")
    write_loss_csv(curve, loss_csv)
    _write_manifest(out, argv, "train", cfg.to_dict(), cfg.seed,
                    {"dataset": data_path, "resume": args.resume}, [out, loss_csv], started)
    if curve:
        last = curve[-1]
        print(f"epoch {last['epoch']}: total {last['total']:.6g}  L_R {last['rec']:.6g}  "
              f"L_A {last['align']:.6g}")
    print(f"wrote {out} and {loss_csv}")


def _sequences_for(args, ckpt):
    ds = load_dataset(_require(args.dataset))
    if ds.joints != ckpt.joints:
        raise DataError(f"dataset has {ds.joints} joints, checkpoint expects {ckpt.joints}")
    c = ckpt.config
    seqs = build_sequences(ds, args.split, c.seq_len, c.discard, c.center)
    if not seqs:
        raise DataError(f"no sequences in split '{args.split}'")
    return seqs


def cmd_extract(args, argv, started):
    ckpt = load_checkpoint(_require(args.checkpoint))
    seqs = _sequences_for(args, ckpt)
    kind = args.feature.replace("-", "_")
    fs = extract_features(seqs, ckpt, kind)
    out = Path(args.out)
    write_features_csv(fs, out)
    _write_manifest(out, argv, "extract", {"feature": kind, "split": args.split,
                                           "checkpoint_config": ckpt.config.to_dict()},
                    ckpt.config.seed, {"dataset": args.dataset, "checkpoint": args.checkpoint},
                    [out], started)
    print(f"wrote {fs.values.shape[0]} sequences x {fs.values.shape[1]} steps "
          f"x {fs.width} features to {out}")


def cmd_evaluate(args, argv, started):
    train_fs = read_features_csv(_require(args.train_features))
    test_fs = read_features_csv(_require(args.test_features))
    if train_fs.width != test_fs.width:
        raise DataError(f"feature widths differ: train {train_fs.width}, test {test_fs.width}")
    cfg_dict = _read_json(args.config)
    cfg_dict.update(_overrides(args, {"epochs": "epochs", "seed": "seed", "lr": "lr",
                                      "hidden": "hidden"}))
    try:
        cfg = RecognizerConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid recognizer config: {exc}") from None
    C = args.classes or int(train_fs.labels.max())
    if test_fs.labels.max() > C:
        raise DataError(f"test labels exceed the {C} training classes")
    X, y = train_fs.flat()
    rec = train_recognizer(X, y, C, cfg)
    report = evaluate(test_fs, rec)
    out = Path(args.out)
    cmc = Path(args.cmc or f"{out}.cmc.csv")
    write_report(report, out, cmc)
    _write_manifest(out, argv, "evaluate", {**cfg.to_dict(), "classes": C}, cfg.seed,
                    {"train_features": args.train_features, "test_features": args.test_features},
                    [out, cmc], started)
    print(f"rank-1 {report.rank1:.4f}  nAUC {report.nauc:.4f}  ({len(report.ranks)} sequences, "
          f"{C} classes)")


def write_pgm(matrix: np.ndarray, path, cell: int = 16) -> None:
    """Binary greyscale PGM, min-max scaled to 0..255 (a constant matrix maps to 0)."""
    lo, hi = float(matrix.min()), float(matrix.max())
    scaled = np.zeros_like(matrix) if hi == lo else (matrix - lo) / (hi - lo)
    img = np.rint(scaled * 255).astype(np.uint8)
    img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_matrix_csv(matrix: np.ndarray, path) -> None:
    f = matrix.shape[1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *[f"j{j}" for j in range(1, f + 1)]])
        for t, row in enumerate(matrix, 1):
            w.writerow([t, *map(repr, row.tolist())])


def cmd_export_attention(args, argv, started):
    ckpt = load_checkpoint(_require(args.checkpoint))
    if not ckpt.config.attn.uses_context:
        raise UsageError("checkpoint was trained with attention 'none'; nothing to export")
    seqs = _sequences_for(args, ckpt)
    mats = average_attention(seqs, ckpt)
    outputs, stats = [], {}
    for axis, m in mats.items():
        csv_path = Path(f"{args.out_prefix}_{axis}.csv")
        pgm_path = Path(f"{args.out_prefix}_{axis}.pgm")
        write_matrix_csv(m, csv_path)
        write_pgm(m, pgm_path, args.cell)
        outputs += [csv_path, pgm_path]
        near, far = locality_statistic(m)
        stats[axis] = {"near": near, "far": far}
        print(f"{axis}: mean weight |j-p_t|<=1 {near:.4f}, |j-p_t|>=3 {far:.4f}")
    _write_manifest(f"{args.out_prefix}_attention", argv, "export-attention",
                    {"split": args.split, "cell": args.cell, "locality": stats,
                     "checkpoint_config": ckpt.config.to_dict()},
                    ckpt.config.seed, {"dataset": args.dataset, "checkpoint": args.checkpoint},
                    outputs, started)


def cmd_replay(args, argv, started):
    manifest = json.loads(_require(args.manifest).read_text())
    code = main(manifest["argv"])
    if code != EXIT_OK:
        return code
    bad = [p for p, digest in manifest["outputs"].items() if _sha256(p) != digest]
    for p in bad:
        print(f"MISMATCH {p}", file=sys.stderr)
    if bad:
        return EXIT_DATA
    print(f"reproduced {len(manifest['outputs'])} outputs bit for bit")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gaitenc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic gait dataset (JSONL)")
    g.add_argument("--config", help="generator config JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--identities", type=int)
    g.add_argument("--videos", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--noise", type=float)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="self-supervised training of the gait encoder")
    t.add_argument("dataset")
    t.add_argument("--config", help="train config JSON (flags override it)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss-csv")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--attention", choices=["none", "bas", "mbas", "las"])
    t.add_argument("--no-reverse", action="store_true")
    t.add_argument("--center", action="store_true", help="centre every frame on the root joint")
    t.add_argument("--f", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--D", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--l2", type=float)
    t.add_argument("--lambda-r", type=float)
    t.add_argument("--lambda-a", type=float)
    t.add_argument("--discard", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="write AGE or encoded-state features (CSV)")
    e.add_argument("dataset")
    e.add_argument("checkpoint")
    e.add_argument("--out", required=True)
    e.add_argument("--feature", choices=["age", "encoded-state"], default="age")
    e.add_argument("--split", choices=["train", "test", "all"], default="all")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("evaluate", help="train the recognizer and report Rank-1 / CMC / nAUC")
    v.add_argument("train_features")
    v.add_argument("test_features")
    v.add_argument("--config", help="recognizer config JSON")
    v.add_argument("--out", required=True, help="report JSON path")
    v.add_argument("--cmc", help="CMC CSV path (default <out>.cmc.csv)")
    v.add_argument("--classes", type=int)
    v.add_argument("--epochs", type=int)
    v.add_argument("--seed", type=int)
    v.add_argument("--lr", type=float)
    v.add_argument("--hidden", type=int)
    v.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("export-attention", help="average attention matrices as CSV + PGM")
    a.add_argument("dataset")
    a.add_argument("checkpoint")
    a.add_argument("--out-prefix", required=True)
    a.add_argument("--split", choices=["train", "test", "all"], default="all")
    a.add_argument("--cell", type=int, default=16, help="PGM pixels per matrix cell")
    a.set_defaults(func=cmd_export_attention)

    r = sub.add_parser("replay", help="re-run a manifest and verify its outputs")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        return args.func(args, argv, started) or EXIT_OK
    except UsageError as exc:
        print(f"gaitenc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"gaitenc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FeatureError, CheckpointError, ValueError, OSError) as exc:
        print(f"gaitenc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
