"""Run every registered experiment against the trained checkpoints and print the manifest summary."""

import argparse
import json
import sys
from pathlib import Path

from countlab.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--quick", action="store_true", help="use the reduced grid in configs/suite_quick.yaml")
    p.add_argument("--out", default=str(ROOT / "runs" / "experiments"))
    p.add_argument("--only", nargs="+", help="run these experiments instead of all")
    args = p.parse_args(argv)
    config = ROOT / "configs" / ("suite_quick.yaml" if args.quick else "suite.yaml")
    names = args.only or ["all"]
    rc = 0
    for name in names:
        rc |= main(["experiment", "run", name, "--config", str(config), "--out", args.out])
    manifest = Path(args.out) / "manifest.json"
    if manifest.exists():
        m = json.loads(manifest.read_text())
        print(f"coverage complete: {m['coverage_complete']}")
    return rc


if __name__ == "__main__":
    sys.exit(run())
