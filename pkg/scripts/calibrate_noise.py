"""Initial depth error of the noise model over a sweep of depth noise levels."""

import argparse

import numpy as np

from symdepth import metrics, synth


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenes", type=int, default=20)
    ap.add_argument("--log-sigma", type=float, nargs="+", default=[0.1, 0.2, 0.3])
    ap.add_argument("--lowfreq", type=float, nargs="+", default=[0.0, 0.1])
    a = ap.parse_args()

    scenes = [synth.generate_scene(synth.FAMILIES[i % 3], i, 0) for i in range(a.scenes)]
    print("log_sigma lowfreq   mean_rel  min_rel  max_rel")
    for ls in a.log_sigma:
        for lf in a.lowfreq:
            noise = synth.NoiseSpec(depth_log_sigma=ls, depth_lowfreq_amp=lf, seed=1)
            rel = [metrics.depth_metrics(synth.corrupt(sc, noise).depth, sc.depth, sc.mask).rel for sc in scenes]
            print(f"{ls:9.3f} {lf:7.3f}   {np.mean(rel):.4f}   {np.min(rel):.4f}   {np.max(rel):.4f}")


if __name__ == "__main__":
    main()
