#!/usr/bin/env python3
"""Desk-scale demo on the synthetic dataset: all variants, one seed each."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from idcl.cli import main as idcl_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs")
    parser.add_argument("--seed", default="0")
    parser.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "synthetic.cfg"))
    args = parser.parse_args()

    if idcl_main(["prepare", "--dataset", "synthetic", "--seed", "0", "--out", args.out]) != 0:
        return 1
    for variant in ("idcl", "lightgcn", "no-icl", "no-cr"):
        code = idcl_main([
            "train", "--dataset", "synthetic", "--config", args.config,
            "--variant", variant, "--seed", args.seed, "--out", args.out,
        ])
        if code != 0:
            return code
    idcl_main(["analyze", "--run", f"{args.out}/synthetic/idcl/{args.seed}"])
    return idcl_main(["compare", "--runs", f"{args.out}/synthetic"])


if __name__ == "__main__":
    sys.exit(main())
