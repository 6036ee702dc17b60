#!/usr/bin/env python3
"""Render a region-set manifest as a crop gallery PNG.

Shows the first N region crops in manifest (shuffled) order, each titled
with its source slice, superpixel id, and cluster assignment when present.

Usage:
  python3 scripts/inspect_regions.py runs/tiny/regions.jsonl --n 36 --out gallery.png
"""

import argparse
import math
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from separeg.superpixel import RegionSetManifest


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("manifest", type=Path)
    ap.add_argument("--n", type=int, default=36, help="Number of crops to show.")
    ap.add_argument("--out", type=Path, default=Path("regions.png"))
    args = ap.parse_args()

    manifest = RegionSetManifest.load(args.manifest)
    records = manifest.records[: args.n]
    if not records:
        print("manifest holds no regions", file=sys.stderr)
        return 1

    cols = math.ceil(math.sqrt(len(records)))
    rows = math.ceil(len(records) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.0 * cols, 2.2 * rows))
    axes = [axes] if rows * cols == 1 else list(axes.ravel())
    for ax in axes[len(records):]:
        ax.axis("off")
    for ax, rec in zip(axes, records):
        ax.imshow(rec.load_crop(manifest.root), cmap="gray", vmin=0, vmax=1)
        title = f"{rec.source[0]} s{rec.source[1]} r{rec.superpixel_id}"
        if rec.cluster_id is not None:
            title += f" c{rec.cluster_id}"
        ax.set_title(title, fontsize=6)
        ax.axis("off")
    fig.suptitle(f"{args.manifest} ({manifest.separation}, {len(manifest.records)} regions)")
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
