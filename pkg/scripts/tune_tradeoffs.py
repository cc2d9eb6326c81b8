"""Generate a dataset and grid-search lambda and mu on its held-out split."""

import argparse
import json
import tempfile
from pathlib import Path

from symdepth import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenes", type=int, default=20)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--grid", default="0.3,1,3")
    ap.add_argument("--holdout", type=float, default=0.1)
    ap.add_argument("--dataset", help="existing dataset directory; generated when omitted")
    a = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(a.dataset) if a.dataset else Path(tmp) / "data"
        if not a.dataset:
            cli.generate_dataset(data, a.scenes, (a.size, a.size), seed=0)
        grid = tuple(float(v) for v in a.grid.split(","))
        doc = cli.tune(cli.dataset_manifests(data), cli.PipelineConfig(), grid, a.holdout)
    for row in sorted(doc["grid"], key=lambda r: r["mean_rel"]):
        print(f"lambda {row['lambda']:6.2f}  mu {row['mu']:6.2f}  mean rel {row['mean_rel']:.4f}")
    print(json.dumps(doc["best"]))


if __name__ == "__main__":
    main()
