"""Run a vanilla / smoothed config pair and print the paired comparison.

    python scripts/compare.py configs/mnist_vanilla.cfg configs/mnist_smoothed.cfg --out results/mnist
    python scripts/compare.py configs/toy_vanilla.cfg configs/toy_smoothed.cfg --out results/toy
    python scripts/compare.py configs/pate_vanilla.cfg configs/pate_smoothed.cfg --out results/pate

Each arm is written to its own subdirectory of --out. Seeds are shared, so the
per-seed differences are paired.
"""

import argparse
from pathlib import Path

import numpy as np

from dplis.harness import load_config, run_experiment

METRIC = {"mnist_mlp": "test_accuracy", "synthetic_blobs": "test_accuracy", "sharpness": "sharpness",
          "pate": "student_accuracy", "toy": "loss"}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("vanilla")
    ap.add_argument("smoothed")
    ap.add_argument("--out", default="results/compare")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args(argv)

    arms = {}
    for name, path in (("vanilla", args.vanilla), ("smoothed", args.smoothed)):
        cfg = load_config(path, seed=args.seed)
        res = run_experiment(cfg, Path(args.out) / name)
        arms[name] = (cfg, res)
        print(f"{name}: {path} -> {Path(args.out) / name}")

    cfg = arms["vanilla"][0]
    metric = METRIC[cfg.task]
    a = np.array([r[metric] for r in arms["vanilla"][1].rows])
    b = np.array([r[metric] for r in arms["smoothed"][1].rows])
    if cfg.task == "toy":
        for name, (_, res) in arms.items():
            s = res.summary
            print(f"{name:9s} flat_capture={s['flat_capture']:.3f} median={s['median_loss']:.4g} "
                  f"p99={s['p99_loss']:.4g} std={s['std_loss']:.4g}")
        return 0
    print(f"{metric}: vanilla mean={a.mean():.4f} std={a.std():.4f} | smoothed mean={b.mean():.4f} std={b.std():.4f}")
    d = b - a
    print(f"paired difference (smoothed - vanilla): mean={d.mean():+.4f} per-seed={np.round(d, 4).tolist()}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
