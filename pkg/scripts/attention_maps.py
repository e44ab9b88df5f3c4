"""Averaged BAS and LAS attention matrices of toy-benchmark models, as CSV + PGM.

    python scripts/attention_maps.py --out runs/attention --seed 0
"""
import argparse
from pathlib import Path

from gaitenc.attention import locality_statistic
from gaitenc.benchmark import RunCache, average_attention
from gaitenc.cli import write_matrix_csv, write_pgm
from gaitenc.skeldata import build_sequences


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/attention"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--modes", nargs="+", default=["bas", "las"])
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    cache = RunCache()
    for mode in args.modes:
        run = cache.get(attention=mode, seed=args.seed)
        c = run.config
        seqs = build_sequences(cache.ds, "all", c.seq_len, c.discard, c.center)
        for axis, m in average_attention(seqs, run.checkpoint).items():
            write_matrix_csv(m, args.out / f"{mode}_{axis}.csv")
            write_pgm(m, args.out / f"{mode}_{axis}.pgm")
            near, far = locality_statistic(m)
            print(f"{mode} {axis}: |j-p_t|<=1 mean {near:.4f}   |j-p_t|>=3 mean {far:.4f}")


if __name__ == "__main__":
    main()
