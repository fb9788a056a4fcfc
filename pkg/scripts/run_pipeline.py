#!/usr/bin/env python3
"""Run the full toolchain end to end: train -> calibrate -> search-bits ->
quantize -> eval (all three engines) -> simulate (all pipeline modes) -> report.

Example:
    python scripts/run_pipeline.py --out runs/demo --budget-mb 0.012
"""

import argparse
import json
import sys
from pathlib import Path

from potvit.cli import main as potvit_main

DEFAULT_CONFIG = {
    "search": {"population": 10, "children": 8, "iterations": 5, "trace_samples": 4},
    "seed": 0,
}


def run(argv):
    rc = potvit_main(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="artifact directory")
    ap.add_argument("--config", default=None, help="run config JSON (default: built-in demo)")
    ap.add_argument("--budget-mb", type=float, default=0.012, help="model-size budget for search")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.config is None:
        cfg_path = out / "config.json"
        cfg_path.write_text(json.dumps(DEFAULT_CONFIG, indent=2))
    else:
        cfg_path = Path(args.config)
    base = ["--config", str(cfg_path), "--out", str(out)]
    if args.seed is not None:
        base += ["--seed", str(args.seed)]

    run(["train", *base])
    run(["calibrate", *base])
    run(["search-bits", *base, "--budget-mb", str(args.budget_mb)])
    run(["quantize", *base])
    for engine in ("float", "fakequant"):
        run(["eval", *base, "--engine", engine])
    run(["eval", *base, "--engine", "int", "--check"])
    for pipeline in ("none", "inter", "intra", "inter,intra"):
        run(["simulate", *base, "--pipeline", pipeline])
    run(["report", *base])
    print(f"\nall artifacts in {out}")


if __name__ == "__main__":
    main()
