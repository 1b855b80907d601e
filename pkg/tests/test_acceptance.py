"""End-to-end acceptance checks, one test per criterion.

Each test appends a PASS/FAIL line to the terminal summary before asserting, so
``pytest tests/test_acceptance.py`` ends with a one-line verdict per criterion.
The MNIST-scale experiments need the IDX files under data/mnist (see
scripts/make_mnist_subset.py).
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import central_differences, renyi_mixture_vs_gaussian

from dplis import accountant as acc
from dplis import harness as H
from dplis import landscape as ls
from dplis import pate
from dplis.nn import Batch, MlpSpec, forward_loss, init_params, per_sample_gradients
from dplis.rng import Purpose, stream
from dplis.cli import main as cli_main

pytestmark = pytest.mark.slow

MNIST_CFG = dict(
    task="sharpness",
    dataset="mnist_mlp",
    n_seeds=5,
    subset_size=0,
    test_subset=0,
    hidden=(512, 128),
    lr=0.1536,
    expected_batch=256,
    noise_multiplier=1.1,
    clip=1.0,
    epsilon_target=5.0,
    sharpness_epsilon=0.0045,
    sharpness_restarts=3,
    sharpness_iters=20,
)
PATE_CFG = dict(task="pate", n_seeds=5, pate_flip_rate=0.3, pate_samples=10)
PATE_SMOOTH = 0.2


def verdict(n, ok, detail, seconds=None):
    took = f" [{seconds:.0f}s]" if seconds is not None else ""
    ACCEPTANCE_LINES.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}{took}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


def _mnist_available():
    return bool(H.find_mnist(H.ExperimentConfig().data_dir).get("train"))


@pytest.fixture(scope="module")
def mnist_arms():
    if not _mnist_available():
        pytest.fail("MNIST IDX files missing under data/mnist; run scripts/make_mnist_subset.py")
    out = {}
    for name, extra in (("vanilla", {}), ("smoothed", {"smoothing_radius": 10.0, "smoothing_samples": 5})):
        t = time.time()
        out[name] = H.run_experiment(H.ExperimentConfig(**MNIST_CFG, **extra))
        out[name + "_seconds"] = time.time() - t
    return out


@pytest.fixture(scope="module")
def pate_arms():
    t = time.time()
    a = H.run_experiment(H.ExperimentConfig(**PATE_CFG))
    b = H.run_experiment(H.ExperimentConfig(**PATE_CFG, pate_sigma_smooth=PATE_SMOOTH))
    return a, b, time.time() - t


def test_criterion_01_gradient_oracle():
    t = time.time()
    rng = np.random.default_rng(101)
    worst = 0.0
    for trial in range(100):
        d_in = int(rng.integers(2, 7))
        hidden = tuple(int(h) for h in rng.integers(2, 7, size=rng.integers(0, 3)))
        classes = int(rng.integers(2, 5))
        act = "tanh" if trial % 2 == 0 else "relu"
        spec = MlpSpec(d_in, hidden, classes, act)
        assert spec.n_params <= 200
        params = init_params(spec, trial)
        params = params.with_values(params.values + 0.3 * rng.standard_normal(spec.n_params))
        batch = Batch(rng.standard_normal((3, d_in)), rng.integers(0, classes, size=3))
        G = per_sample_gradients(params, spec, batch)
        for i in range(len(batch)):
            sample = batch.subset([i])
            fd = central_differences(lambda v: forward_loss(params.with_values(v), spec, sample)[0], params.values)
            worst = max(worst, np.max(np.abs(G[i] - fd)) / max(np.max(np.abs(fd)), 1e-12))
    dt = time.time() - t
    verdict(1, worst < 1e-4 and dt < 60, f"max relative error {worst:.2e} over 100 MLPs (< 1e-4)", dt)


def test_criterion_02_clipping_invariant(mnist_arms):
    # the audited run materializes every clipped per-sample gradient and measures it directly
    t = time.time()
    audited = H.run_experiment(H.ExperimentConfig(**{**MNIST_CFG, "task": "mnist_mlp", "n_seeds": 1}, audit_clipping=True))
    dt = time.time() - t
    rows = audited.rows + mnist_arms["vanilla"].rows + mnist_arms["smoothed"].rows
    violations = sum(r["clip_violations"] for r in rows)
    worst = max(r["max_clipped_norm"] for r in rows)
    verdict(2, violations == 0 and worst <= 1.0,
            f"{violations} violations, max clipped norm {worst!r} <= C = 1 (audited run of "
            f"{audited.rows[0]['steps']} steps plus {len(rows) - 1} factor-checked runs)", dt)


def test_criterion_03_accountant_oracle():
    t = time.time()
    worst = 0.0
    for q in (0.001, 0.01, 0.05):
        for sigma in (0.8, 1.1, 3.0):
            for a in range(2, 65):
                ours = acc.rdp_subsampled_gaussian(q, sigma, a)
                ref = renyi_mixture_vs_gaussian(q, sigma, a)
                worst = max(worst, abs(ours - ref) / abs(ref))
    q1 = max(abs(acc.rdp_subsampled_gaussian(1.0, s, a) - a / (2 * s * s))
             for s in (0.8, 1.1, 3.0) for a in acc.DEFAULT_ORDERS)
    eps = [acc.epsilon_for(0.01, 1.1, T).epsilon for T in range(0, 5001, 50)]
    monotone = all(b >= a for a, b in zip(eps, eps[1:]))
    dt = time.time() - t
    ok = worst < 0.01 and q1 <= 1e-12 and monotone and dt < 120
    verdict(3, ok, f"quadrature rel err {worst:.2e} (< 1%), q=1 err {q1:.1e}, eps(T) monotone={monotone}", dt)


def test_criterion_04_toy_reproduction():
    t = time.time()
    stats = {}
    for arm in (False, True):
        res = H.run_experiment(H.ExperimentConfig(task="toy", toy_runs=1000, toy_smoothing=arm))
        stats[arm] = res.summary
    dt = time.time() - t
    v, s = stats[False], stats[True]
    a = s["flat_capture"] > v["flat_capture"]
    b = s["p99_loss"] < v["p99_loss"]
    c = v["p99_loss"] >= 5 * v["median_loss"]
    detail = (f"capture {s['flat_capture']:.3f} > {v['flat_capture']:.3f}: {a}; "
              f"p99 {s['p99_loss']:.3f} < {v['p99_loss']:.3f}: {b}; "
              f"vanilla p99/median {v['p99_loss'] / v['median_loss']:.0f} >= 5: {c}")
    verdict(4, a and b and c and dt < 600, detail, dt)


def test_criterion_05_smoothing_bound():
    t = time.time()
    land = ls.ToyLandscape()
    pairs = 10_000
    raw = ls.estimate_smoothness(land.loss, land.v, 8.0, pairs, stream(0, Purpose.MC, 1), grad=land.grad)
    parts, ok = [], True
    for sigma in (1.0, 2.0, 4.0):
        f, g = ls.smoothed_toy_fns(sigma, 2000, seed=0, landscape=land)
        est = ls.estimate_smoothness(f, land.v, 8.0, pairs, stream(0, Purpose.MC, 2, int(sigma * 1000)), grad=g)
        bound = 1.1 * raw.lipschitz_fn / sigma
        ok &= est.lipschitz_grad <= bound
        parts.append(f"sigma={sigma:g}: {est.lipschitz_grad:.4f} <= {bound:.4f}")
    dt = time.time() - t
    verdict(5, ok and dt < 300, f"L={raw.lipschitz_fn:.4f}; " + "; ".join(parts), dt)


def _acc(res):
    return np.array([r["test_accuracy"] for r in res.rows])


def test_criterion_06_utility_gain(mnist_arms):
    v, s = _acc(mnist_arms["vanilla"]), _acc(mnist_arms["smoothed"])
    d = s - v
    eps = mnist_arms["vanilla"].rows[0]["epsilon"]
    T = mnist_arms["vanilla"].rows[0]["steps"]
    secs = mnist_arms["vanilla_seconds"] + mnist_arms["smoothed_seconds"]
    verdict(6, d.mean() > 0,
            f"paired mean diff {d.mean():+.4f} (vanilla {v.mean():.4f}, smoothed {s.mean():.4f}; "
            f"T={T}, eps={eps:.3f}; per seed {np.round(d, 4).tolist()})", secs)


def test_criterion_07_stability(mnist_arms):
    v, s = _acc(mnist_arms["vanilla"]), _acc(mnist_arms["smoothed"])
    verdict(7, s.std() <= v.std(), f"accuracy std smoothed {s.std():.4f} <= vanilla {v.std():.4f}")


def test_criterion_08_sharpness(mnist_arms):
    v = np.median([r["sharpness"] for r in mnist_arms["vanilla"].rows])
    s = np.median([r["sharpness"] for r in mnist_arms["smoothed"].rows])
    land = ls.ToyLandscape()
    grid_ok = True
    for k, theta in enumerate(([20.0, 0.0], [19.0, 1.0], [0.0, 0.0], [3.0, -2.0], [10.0, 4.0], [22.5, 0.5])):
        th = np.array(theta)
        rep = ls.c_eps_sharpness(land.loss, th, grad=land.grad, rng=stream(k, Purpose.SHARPNESS))
        grid, bound = ls.grid_sharpness(land.loss, th)
        grid_ok &= abs(rep.c_eps_sharpness - grid) <= bound
    verdict(8, s <= v and grid_ok,
            f"median sharpness smoothed {s:.4g} <= vanilla {v:.4g}; toy search within grid resolution: {grid_ok}")


def test_criterion_09_pate(pate_arms):
    # aggregator examples
    n1 = pate.GnMaxConfig(threshold=300, sigma1=1e-9, sigma2=1.0)
    abst = sum(pate.confident_gnmax(pate.VoteHistogram([100] + [0] * 9), n1, stream(i, Purpose.PATE_AGGREGATE))
               == pate.ABSTAIN for i in range(1000))
    n2 = pate.GnMaxConfig(threshold=100, sigma1=1.0, sigma2=1.0)
    unan = sum(pate.confident_gnmax(pate.VoteHistogram([250] + [0] * 9), n2, stream(i, Purpose.PATE_AGGREGATE))
               == 0 for i in range(1000))
    n3 = pate.GnMaxConfig(threshold=0, sigma1=1.0, sigma2=1.0)
    tie = np.array([pate.confident_gnmax(pate.VoteHistogram([125, 125] + [0] * 8), n3,
                                         stream(i, Purpose.PATE_AGGREGATE)) for i in range(10_000)])
    tie_ok = set(np.unique(tie)) <= {0, 1} and abs(np.mean(tie == 0) - 0.5) <= 4 * math.sqrt(0.25 / 10_000)
    agg_ok = abst == 1000 and unan >= 999 and tie_ok

    a, b, secs = pate_arms
    va = np.array([r["student_accuracy"] for r in a.rows])
    vb = np.array([r["student_accuracy"] for r in b.rows])
    # epsilon recomputed from scratch: max_queries compositions of two Gaussian mechanisms
    cfg = H.ExperimentConfig(**PATE_CFG)
    orders = np.array(acc.DEFAULT_ORDERS, dtype=float)
    per_query = acc.gaussian_rdp_curve(cfg.pate_sigma1, 1.0).values + acc.gaussian_rdp_curve(
        cfg.pate_sigma2, math.sqrt(2)).values
    eps_ref = acc.compose_and_convert(acc.RdpCurve(tuple(acc.DEFAULT_ORDERS), per_query), cfg.pate_max_queries,
                                      cfg.delta)[0]
    closed = float(np.min(cfg.pate_max_queries * (orders / (2 * cfg.pate_sigma1**2) + orders / cfg.pate_sigma2**2)
                          + math.log(1 / cfg.delta) / (orders - 1)))
    eps_ok = all(r["epsilon"] == eps_ref for r in a.rows + b.rows) and math.isclose(eps_ref, closed, rel_tol=1e-12)
    ok = agg_ok and vb.mean() >= va.mean() and eps_ok and secs < 600
    verdict(9, ok, f"aggregator examples {agg_ok}; student acc smoothed {vb.mean():.4f} >= plain {va.mean():.4f} "
                   f"at 30% flips; eps {a.rows[0]['epsilon']:.4f} recomputed exactly: {eps_ok}", secs)


def test_criterion_10_determinism(tmp_path, monkeypatch):
    t = time.time()
    cfg = tmp_path / "acc.cfg"
    cfg.write_text("task = accountant\nsampling_rate = 0.01\nsteps = 1000\n")
    commands = {
        "accountant": ["accountant", "--config", str(cfg)],
        "toy": ["toy", "--config", str(_write(tmp_path, "toy.cfg", "toy_runs = 200\ntoy_smoothing = true\n"))],
        "pate": ["pate", "--config", str(_write(tmp_path, "pate.cfg", "pate_flip_rate = 0.3\npate_sigma_smooth = 0.2\n"))],
        "mnist": ["train", "--config", str(_write(tmp_path, "mnist.cfg",
                                                  "task = mnist_mlp\nsubset_size = 0\ntest_subset = 0\n"
                                                  "epsilon_target = 5\nsmoothing_radius = 10\nsmoothing_samples = 5\n"))],
        "slice": ["slice", "--config", str(_write(tmp_path, "slice.cfg", "steps = 100\nhidden = 16\nslice_points = 9\n"))],
    }
    same = {}
    for name, argv in commands.items():
        outs = []
        for rep in range(2):
            d = tmp_path / f"{name}{rep}"
            assert cli_main(argv + ["--seed", "3", "--out", str(d)]) == 0
            outs.append((d / "summary.csv").read_bytes())
        same[name] = outs[0] == outs[1]
    monkeypatch.setenv(H.WORKERS_ENV, "2")
    d = tmp_path / "toy_workers"
    assert cli_main(commands["toy"] + ["--seed", "3", "--out", str(d)]) == 0
    same["toy_2_workers"] = (d / "summary.csv").read_bytes() == (tmp_path / "toy0" / "summary.csv").read_bytes()
    verdict(10, all(same.values()), f"byte-identical summary.csv on rerun: {same}", time.time() - t)


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p
