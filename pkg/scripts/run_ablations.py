"""Train the ablation matrix over seeds and tabulate steps-to-target.

Thin driver over ``navgym ablate``; finished runs are reused, so it can be
stopped and restarted. Example for a quick smoke pass:

    python scripts/run_ablations.py --budget 20000 --seeds 0,1 --configs base,no_perception
"""
import argparse
import json
import sys
from pathlib import Path

from navgym.cli import ABLATION_MATRIX, main as cli_main


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--budget", type=int, default=2_000_000)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--configs", default=",".join(ABLATION_MATRIX))
    ap.add_argument("--config", help="base run config JSON")
    args = ap.parse_args()
    argv = ["ablate", "--out", args.out, "--budget", str(args.budget), "--seeds", args.seeds, "--configs", args.configs]
    if args.config:
        argv += ["--config", args.config]
    code = cli_main(argv)
    if code:
        return code
    rows = json.loads((Path(args.out) / "ablation_summary.json").read_text())
    print(f"{'config':<18}{'median steps':>14}{'p vs base':>12}")
    for r in rows:
        p = f"{r['p']:.4g}" if "p" in r else "-"
        print(f"{r['config']:<18}{r['median_steps_to_target']:>14.0f}{p:>12}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
