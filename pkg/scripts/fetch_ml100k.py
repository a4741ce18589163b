#!/usr/bin/env python3
"""Download and extract the MovieLens archives into data/.

Needs network access to files.grouplens.org; run on a connected machine and
copy data/ over if the training environment is offline.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from idcl.datasets import fetch_archive


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dataset", default="ml-100k", choices=("ml-100k", "ml-1m"))
    parser.add_argument("--dest", default="data")
    parser.add_argument("--no-verify", action="store_true",
                        help="skip the md5 check (not recommended)")
    args = parser.parse_args()
    extracted = fetch_archive(args.dataset, args.dest, verify=not args.no_verify)
    print(f"extracted to {extracted}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
