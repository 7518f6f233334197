"""Plot training curves from one or more metrics.csv files.

    python scripts/plot_metrics.py runs/base/seed0 runs/no_lstm/seed0 -o curves.png
"""
import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PANELS = ("success_rate", "radius", "mean_return", "critic_loss", "alpha", "mean_q")


def read(run):
    p = Path(run)
    p = p / "metrics.csv" if p.is_dir() else p
    with open(p, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {k: [float(r[k]) if r[k] else float("nan") for r in rows] for k in rows[0]} if rows else {}
    label = f"{p.parent.parent.name}/{p.parent.name}" if p.parent.name.startswith("seed") else p.parent.name
    return label, cols


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("runs", nargs="+", help="run directories or metrics.csv files")
    ap.add_argument("-o", "--out", default="curves.png")
    args = ap.parse_args()
    fig, axes = plt.subplots(2, 3, figsize=(13, 7), sharex=True)
    for run in args.runs:
        label, cols = read(run)
        if not cols:
            continue
        for ax, key in zip(axes.flat, PANELS):
            ax.plot(cols["env_steps"], cols[key], label=label, lw=1)
    for ax, key in zip(axes.flat, PANELS):
        ax.set_title(key)
        ax.set_xlabel("env steps")
    axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
