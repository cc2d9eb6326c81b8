"""Standard dataset run: initial vs refined depth error with and without the symmetry term."""

import argparse
import time

import numpy as np

from symdepth import metrics, symmetry, synth
from symdepth.solver import SolverConfig, Tradeoffs, refine


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenes", type=int, default=50)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise-seed", type=int, default=1)
    a = ap.parse_args()

    rows = []
    for i in range(a.scenes):
        fam = synth.FAMILIES[i % 3]
        sc = synth.generate_scene(fam, i, a.seed, size=(a.size, a.size))
        deg = synth.corrupt(sc, synth.NoiseSpec(seed=a.noise_seed))
        corr = symmetry.consistency_filter(deg.correspondences)
        row = [metrics.depth_metrics(deg.depth, sc.depth, sc.mask).rel]
        for mu in (1.0, 0.0):
            t0 = time.perf_counter()
            z, _, _ = refine(deg.depth, deg.normals, deg.mask, corr, deg.camera, SolverConfig(Tradeoffs(1.0, mu)))
            row += [metrics.depth_metrics(z, sc.depth, sc.mask).rel, time.perf_counter() - t0]
        rows.append(row)
        print(f"{i:3d} {fam:30s} initial {row[0]:.4f}  mu=1 {row[1]:.4f} ({row[2]:.2f} s)  mu=0 {row[3]:.4f}", flush=True)
    r = np.array(rows)
    print(f"mean rel: initial {r[:, 0].mean():.4f}  mu=1 {r[:, 1].mean():.4f}  mu=0 {r[:, 3].mean():.4f}")
    print(f"reduction {100 * (1 - r[:, 1].mean() / r[:, 0].mean()):.1f}%  slowest mu=1 solve {r[:, 2].max():.2f} s")


if __name__ == "__main__":
    main()
