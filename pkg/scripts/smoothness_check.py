"""Gradient-Lipschitz constant of the Gaussian-smoothed toy loss against L/sigma.

For a raw loss with Lipschitz constant L, smoothing with N(0, sigma^2 I) gives a
gradient that is (L / sigma)-Lipschitz. Both constants are estimated from
random secant pairs in a ball around the sharp basin.

    python scripts/smoothness_check.py --pairs 10000
"""

import argparse

from dplis.landscape import ToyLandscape, estimate_smoothness, smoothed_toy_fns
from dplis.rng import Purpose, stream


def check(sigmas=(1.0, 2.0, 4.0), pairs=10_000, n_mc=2000, radius=8.0, seed=0, slack=1.1):
    land = ToyLandscape()
    center = land.v
    raw = estimate_smoothness(land.loss, center, radius, pairs, stream(seed, Purpose.MC, 1), grad=land.grad)
    out = []
    for s in sigmas:
        f, g = smoothed_toy_fns(s, n_mc, seed=seed, landscape=land)
        est = estimate_smoothness(f, center, radius, pairs, stream(seed, Purpose.MC, 2, int(s * 1000)), grad=g)
        out.append((s, est.lipschitz_grad, slack * raw.lipschitz_fn / s))
    return raw.lipschitz_fn, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=10_000)
    ap.add_argument("--n-mc", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    lip, rows = check(pairs=args.pairs, n_mc=args.n_mc, seed=args.seed)
    print(f"raw loss Lipschitz estimate L = {lip:.4f}")
    for s, beta, bound in rows:
        print(f"sigma={s:g}  beta={beta:.4f}  1.1*L/sigma={bound:.4f}  {'ok' if beta <= bound else 'VIOLATED'}")


if __name__ == "__main__":
    main()
