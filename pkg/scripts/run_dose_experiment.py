#!/usr/bin/env python3
"""Thermal-dose delivery study: train the short-horizon model and run the
dose controller with and without measurement noise."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from npvdeepc.config import load_config
from npvdeepc.experiments import run_cem


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"))
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)

    doc = run_cem(cfg, out)
    for label, summary in doc["runs"].items():
        print(
            f"{label}: final CEM {summary['final_cem']:.4f} min "
            f"(target {summary['target']:.3f}, overshoot {summary['overshoot']:+.4f}), "
            f"monotone={summary['monotone']}, "
            f"rate band [{summary['rate_min_over_median']:.2f}, {summary['rate_max_over_median']:.2f}] of median"
        )
    print(f"outputs in {out}")


if __name__ == "__main__":
    main()
