"""Reconstruction-loss curves per attention mode on the toy benchmark.

Writes one loss CSV per (mode, seed) and a summary of the median final L_R.

    python scripts/loss_curves.py --out runs/curves --modes las none --seeds 0 1 2
"""
import argparse
import csv
import logging
from pathlib import Path

from gaitenc.benchmark import RunCache, median
from gaitenc.trainer import write_loss_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/curves"))
    ap.add_argument("--modes", nargs="+", default=["las", "none"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--no-center", action="store_true", help="keep camera-frame coordinates")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    args.out.mkdir(parents=True, exist_ok=True)
    cache = RunCache()
    finals = {}
    for mode in args.modes:
        for seed in args.seeds:
            run = cache.get(attention=mode, seed=seed, epochs=args.epochs, center=not args.no_center)
            write_loss_csv(run.curve, args.out / f"{mode}_seed{seed}.csv")
            finals.setdefault(mode, []).append(run.final_rec)
            logging.info("%-5s seed %d  final L_R %.4f  (%.0fs)", mode, seed, run.final_rec, run.seconds)

    with (args.out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "median_final_L_R", *[f"seed{s}" for s in args.seeds]])
        for mode, vals in finals.items():
            w.writerow([mode, repr(median(vals)), *map(repr, vals)])
    for mode, vals in finals.items():
        print(f"{mode:5s} median final L_R {median(vals):.4f}")


if __name__ == "__main__":
    main()
