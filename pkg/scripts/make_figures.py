"""Render every heatmap CSV under an experiment output directory to PNG."""

import argparse
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from countlab.countscope import read_heatmap_csv  # noqa: E402


def render(csv_path: Path, out: Path) -> Path:
    norm, rows, cols, mat = read_heatmap_csv(csv_path)
    fig, ax = plt.subplots(figsize=(0.5 * len(cols) + 2, 0.4 * len(rows) + 1.5))
    im = ax.imshow(np.ma.masked_invalid(mat), cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(cols)), cols)
    ax.set_yticks(range(len(rows)), rows)
    ax.set_title(f"{csv_path.parent.name}/{csv_path.stem}", fontsize=9)
    fig.colorbar(im, ax=ax, label=norm)
    target = out / csv_path.parent.name / f"{csv_path.stem}.png"
    target.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(target, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return target


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("run_dir", help="output of `countlab experiment run`")
    p.add_argument("--out", default=None, help="figure directory (default: <run_dir>/figures)")
    args = p.parse_args(argv)
    run_dir = Path(args.run_dir)
    out = Path(args.out) if args.out else run_dir / "figures"
    csvs = sorted(c for c in run_dir.glob("*/*.csv") if c.parent.name != "figures")
    for c in csvs:
        try:
            print(render(c, out))
        except ValueError as exc:
            print(f"skipped {c}: {exc}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(run())
