#!/usr/bin/env python3
"""Full ML-100k experiment: prepare, train all variants over 3 seeds, compare.

Expects the raw archive under data/ml-100k (see scripts/fetch_ml100k.py).
Writes everything under runs/ and prints the comparison grids at the end.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from idcl.cli import main as idcl_main

VARIANTS = ("idcl", "lightgcn", "no-icl", "no-cr")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs")
    parser.add_argument("--data-dir", default="data")
    parser.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "ml-100k.cfg"))
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--fetch", action="store_true")
    args = parser.parse_args()

    prepare = [
        "prepare", "--dataset", "ml-100k", "--data-dir", args.data_dir,
        "--seed", "0", "--out", args.out,
    ]
    if args.fetch:
        prepare.append("--fetch")
    if idcl_main(prepare) != 0:
        return 1
    for variant in VARIANTS:
        code = idcl_main([
            "train", "--dataset", "ml-100k", "--config", args.config,
            "--variant", variant, "--seeds", args.seeds, "--out", args.out,
        ])
        if code != 0:
            return code
    for variant in VARIANTS:
        for seed in args.seeds.split(","):
            run = f"{args.out}/ml-100k/{variant}/{seed}"
            if variant != "lightgcn":
                idcl_main(["analyze", "--run", run, "--samples", "500", "--seed", "0"])
    return idcl_main(["compare", "--runs", f"{args.out}/ml-100k"])


if __name__ == "__main__":
    sys.exit(main())
