"""Train the default text and visual checkpoints into runs/train_text and runs/train_visual."""

import argparse
import sys
from pathlib import Path

from countlab.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=str(ROOT / "runs"))
    p.add_argument("--only", choices=("text", "visual"))
    p.add_argument("--steps", type=int, default=None, help="override the committed step budget")
    args = p.parse_args(argv)
    for kind in ("text", "visual"):
        if args.only and kind != args.only:
            continue
        cmd = ["-v", "train", "--config", str(ROOT / "configs" / f"train_{kind}.yaml"),
               "--out", str(Path(args.out) / f"train_{kind}")]
        if args.steps is not None:
            cmd += ["--steps", str(args.steps)]
        rc = main(cmd)
        if rc:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(run())
