"""Loss-landscape tools: the two-basin toy objective, Monte Carlo smoothing,
toy DP-SGD runs, (C_eps; A)-sharpness, filter-normalized slices and
empirical smoothness estimates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from .nn import Batch, MlpSpec, ParamVector, evaluate, loss_and_grad
from .rng import Purpose, stream


@dataclass(frozen=True)
class ToyLandscape:
    """Mixture of a flat basin around ``u`` and a sharp basin around ``v``.

    ``L = F_u w_u + F_v (1 - w_u)`` with ``w_u = E_u / (E_u + E_v)`` and
    ``E_x = exp(-||theta - x|| / 2)``. ``F_u = S(r_u/5 - 5/r_u)`` and
    ``F_v = S(2 r_v/5 - 5/(2 r_v))``; both are 0 at their own center.
    """

    u: tuple[float, float] = (0.0, 0.0)
    v: tuple[float, float] = (20.0, 0.0)

    def __post_init__(self):
        if np.linalg.norm(np.subtract(self.u, self.v)) <= 15:
            raise ValueError("basin centers must be more than 15 apart")

    def _parts(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        du = theta - np.asarray(self.u)
        dv = theta - np.asarray(self.v)
        ru = np.linalg.norm(du, axis=-1)
        rv = np.linalg.norm(dv, axis=-1)
        with np.errstate(divide="ignore"):
            au = np.where(ru > 0, ru / 5 - 5 / np.where(ru > 0, ru, 1.0), -np.inf)
            av = np.where(rv > 0, 2 * rv / 5 - 5 / (2 * np.where(rv > 0, rv, 1.0)), -np.inf)
        fu, fv = expit(au), expit(av)
        wu = expit((rv - ru) / 2)
        return du, dv, ru, rv, au, av, fu, fv, wu

    def loss(self, theta) -> np.ndarray:
        _, _, _, _, _, _, fu, fv, wu = self._parts(theta)
        return fv + (fu - fv) * wu

    __call__ = loss

    def grad(self, theta) -> np.ndarray:
        du, dv, ru, rv, au, av, fu, fv, wu = self._parts(theta)
        safe_u = np.where(ru > 0, ru, 1.0)
        safe_v = np.where(rv > 0, rv, 1.0)
        # unit vectors; zero at the centers where F has a removable minimum
        eu = np.where((ru > 0)[..., None], du / safe_u[..., None], 0.0)
        ev = np.where((rv > 0)[..., None], dv / safe_v[..., None], 0.0)
        dfu = np.where(ru > 0, fu * (1 - fu) * (1 / 5 + 5 / safe_u**2), 0.0)
        dfv = np.where(rv > 0, fv * (1 - fv) * (2 / 5 + 5 / (2 * safe_v**2)), 0.0)
        dwu = wu * (1 - wu) / 2
        return (
            (dfu * wu)[..., None] * eu
            + (dfv * (1 - wu))[..., None] * ev
            + ((fu - fv) * dwu)[..., None] * (ev - eu)
        )


def toy_loss(theta, landscape: ToyLandscape | None = None):
    return (landscape or ToyLandscape()).loss(theta)


def smoothed_loss_mc(f: Callable, theta, sigma_smooth: float, n_mc: int, rng: np.random.Generator):
    """Monte Carlo estimate of E[f(theta + Delta)], Delta ~ N(0, sigma_smooth^2 I)."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    if sigma_smooth == 0:
        return f(theta)
    delta = rng.standard_normal((n_mc,) + theta.shape) * sigma_smooth
    return np.mean(f(theta + delta), axis=0)


def smoothed_grad_mc(grad: Callable, theta, sigma_smooth: float, n_mc: int, rng: np.random.Generator):
    """Monte Carlo estimate of grad E[f(theta + Delta)] = E[grad f(theta + Delta)]."""
    theta = np.asarray(theta, dtype=np.float64)
    delta = rng.standard_normal((n_mc,) + theta.shape) * sigma_smooth
    return np.mean(grad(theta + delta), axis=0)


# --- toy DP-SGD ----------------------------------------------------------------


@dataclass(frozen=True)
class ToyConfig:
    """Harness defaults for the toy runs.

    Per-step DP noise lr * sigma * C = 0.1 keeps both raw basins attainable,
    and sigma_smooth = R * lr * sigma * C = 8 is wide enough that the smoothed
    surface has no sharp basin left.
    """

    lr: float = 1.0
    noise_multiplier: float = 0.1
    clip: float = 1.0
    steps: int = 8000
    smoothing_radius: float = 80.0  # sigma_smooth = R * lr * sigma * C (batch size 1)
    smoothing_samples: int = 8
    init_low: tuple[float, float] = (-10.0, -20.0)
    init_high: tuple[float, float] = (30.0, 20.0)

    @property
    def smoothing_std(self) -> float:
        return self.smoothing_radius * self.lr * self.noise_multiplier * self.clip


def _clip_rows(g: np.ndarray, clip: float) -> np.ndarray:
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    return g * np.minimum(1.0, clip / np.where(n > 0, n, 1.0))


def run_toy_experiment(
    n_runs: int,
    cfg: ToyConfig = ToyConfig(),
    smoothing: bool = False,
    seed: int = 0,
    landscape: ToyLandscape | None = None,
    record: dict | None = None,
) -> list[tuple[np.ndarray, float]]:
    """Independent DP-SGD runs on the toy objective; returns (final theta, final loss) per run.

    Run ``i`` uses seed ``seed + i`` for its init, DP noise and smoothing
    draws, so the smoothed and plain arms see identical inits and DP noise.
    All runs advance together as one vectorized array. When ``record`` is a
    dict it receives ``mean_sq_grad_norm``: per run, the average over steps
    of the squared norm of the (pre-clipping) gradient of the objective the
    arm optimizes, i.e. the K-sample estimate of the smoothed gradient when
    smoothing is on.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    land = landscape or ToyLandscape()
    K = cfg.smoothing_samples
    theta = np.empty((n_runs, 2))
    noise = np.empty((n_runs, cfg.steps, 2))
    smooth = np.empty((n_runs, cfg.steps, K, 2)) if smoothing else None
    for i in range(n_runs):
        s = seed + i
        theta[i] = stream(s, Purpose.TOY_INIT).uniform(cfg.init_low, cfg.init_high)
        noise[i] = stream(s, Purpose.DP_NOISE).standard_normal((cfg.steps, 2))
        if smoothing:
            smooth[i] = stream(s, Purpose.SMOOTH).standard_normal((cfg.steps, K, 2))
    sq = np.zeros(n_runs)
    for t in range(cfg.steps):
        if smoothing:
            pts = theta[:, None, :] + cfg.smoothing_std * smooth[:, t]
            g = land.grad(pts).mean(axis=1)
        else:
            g = land.grad(theta)
        if record is not None:
            sq += np.sum(g**2, axis=1)
        g = _clip_rows(g, cfg.clip)
        theta = theta - cfg.lr * (g + cfg.noise_multiplier * cfg.clip * noise[:, t])
    losses = land.loss(theta)
    if record is not None:
        record["mean_sq_grad_norm"] = sq / max(cfg.steps, 1)
    return [(theta[i].copy(), float(losses[i])) for i in range(n_runs)]


# --- (C_eps; A)-sharpness ------------------------------------------------------


@dataclass(frozen=True)
class SharpnessReport:
    c_eps_sharpness: float
    epsilon: float
    restarts: int
    best_y: np.ndarray
    base_loss: float
    max_loss: float


def sharpness_box(theta, epsilon: float) -> np.ndarray:
    """Half-widths of C_eps(theta) for A = I: eps * (|theta_i| + 1)."""
    return epsilon * (np.abs(np.asarray(theta, dtype=np.float64)) + 1.0)


def _sharpness_value(fmax: float, f0: float) -> float:
    return (fmax - f0) / (1.0 + f0) * 100.0


def c_eps_sharpness(
    f: Callable[[np.ndarray], float],
    theta,
    epsilon: float = 0.0045,
    restarts: int = 10,
    iters: int = 100,
    grad: Callable[[np.ndarray], np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
    value_and_grad: Callable | None = None,
) -> SharpnessReport:
    """(C_eps; A)-sharpness with A = I by projected sign-gradient ascent.

    Restart 0 starts at y = 0, the rest at uniform points of the box. The step
    per coordinate is a tenth of the box half-width. ``grad`` defaults to
    central differences; ``value_and_grad`` saves a pass when both come
    from one evaluation. The reported maximum is the best value seen, so it
    is never below f(theta).
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if restarts < 1 or iters < 0:
        raise ValueError("restarts must be >= 1 and iters >= 0")
    theta = np.asarray(theta, dtype=np.float64)
    f0 = float(f(theta))
    if not np.isfinite(f0):
        raise FloatingPointError("loss at theta is not finite")
    rng = rng or stream(0, Purpose.SHARPNESS)
    if value_and_grad is None:
        grad_fn = grad or (lambda x: _fd_grad(f, x))
        value_and_grad = lambda x: (f(x), grad_fn(x))
    half = sharpness_box(theta, epsilon)
    step = half / 10.0
    best_val, best_y = f0, np.zeros_like(theta)
    for r in range(restarts):
        y = np.zeros_like(theta) if r == 0 else rng.uniform(-half, half)
        for it in range(iters):
            val, direction = value_and_grad(theta + y)
            if float(val) > best_val:
                best_val, best_y = float(val), y.copy()
            y = np.clip(y + step * np.sign(direction), -half, half)
        val = float(f(theta + y))
        if val > best_val:
            best_val, best_y = val, y.copy()
    return SharpnessReport(_sharpness_value(best_val, f0), epsilon, restarts, best_y, f0, best_val)


def grid_sharpness(f: Callable, theta, epsilon: float = 0.0045, per_axis: int = 201) -> tuple[float, float]:
    """Dense-grid sharpness of a 2-D objective; returns (value, resolution bound).

    The bound is the largest change between neighbouring grid points, scaled
    like the sharpness value; the true box maximum cannot exceed the grid
    maximum by more than that for a function monotone within each cell.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (2,):
        raise ValueError("grid oracle is for 2-D objectives")
    half = sharpness_box(theta, epsilon)
    gx = np.linspace(-half[0], half[0], per_axis)
    gy = np.linspace(-half[1], half[1], per_axis)
    pts = theta + np.stack(np.meshgrid(gx, gy, indexing="ij"), axis=-1)
    vals = np.asarray(f(pts))
    f0 = float(f(theta))
    jump = max(np.abs(np.diff(vals, axis=0)).max(), np.abs(np.diff(vals, axis=1)).max())
    return _sharpness_value(float(vals.max()), f0), float(jump / (1.0 + f0) * 100.0)


def _fd_grad(f: Callable, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def mlp_loss_fns(spec: MlpSpec, data: Batch, shape_map):
    """(loss, value_and_grad) callables on a flat vector for the mean loss over ``data``."""

    def f(flat):
        return loss_and_grad(ParamVector(flat, shape_map), spec, data)[0]

    def vg(flat):
        return loss_and_grad(ParamVector(flat, shape_map), spec, data)

    return f, vg


# --- filter-normalized 1-D slice ---------------------------------------------


@dataclass(frozen=True)
class SliceRow:
    alpha: float
    loss: float
    accuracy: float


def filter_normalized_direction(params: ParamVector, rng: np.random.Generator) -> np.ndarray:
    """Gaussian direction with each filter rescaled to the norm of the matching filter of theta.

    Filters whose theta norm is zero keep their raw Gaussian entries.
    """
    d = rng.standard_normal(params.values.size)
    ids = params.filter_ids()
    n_f = int(ids.max()) + 1
    theta_norm = np.sqrt(np.bincount(ids, weights=params.values**2, minlength=n_f))
    d_norm = np.sqrt(np.bincount(ids, weights=d**2, minlength=n_f))
    scale = np.where(theta_norm > 0, theta_norm / np.where(d_norm > 0, d_norm, 1.0), 1.0)
    return d * scale[ids]


def filter_normalized_slice(
    params: ParamVector,
    spec: MlpSpec,
    dataset: Batch,
    alphas,
    rng: np.random.Generator,
) -> list[SliceRow]:
    """Loss and accuracy along theta + alpha * d for a filter-normalized direction d."""
    alphas = np.sort(np.asarray(alphas, dtype=np.float64))
    if alphas.size == 0 or alphas[0] < -0.8 or alphas[-1] > 0.8:
        raise ValueError("alphas must be a nonempty grid within [-0.8, 0.8]")
    if len(dataset) == 0:
        raise ValueError("cannot slice on an empty dataset")
    d = filter_normalized_direction(params, rng)
    rows = []
    for a in alphas:
        acc, loss = evaluate(params.with_values(params.values + a * d), spec, dataset)
        rows.append(SliceRow(float(a), loss, acc))
    return rows


# --- empirical smoothness ------------------------------------------------------


@dataclass(frozen=True)
class SmoothnessEstimate:
    lipschitz_grad: float
    lipschitz_fn: float
    pairs: int
    grad_trace: np.ndarray  # running maximum of the gradient ratio


def sample_ball(center, radius: float, n: int, rng: np.random.Generator) -> np.ndarray:
    center = np.asarray(center, dtype=np.float64)
    d = center.size
    z = rng.standard_normal((n, d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / d)
    return center + r * z


def estimate_smoothness(
    f: Callable,
    center,
    radius: float,
    n_pairs: int,
    rng: np.random.Generator,
    grad: Callable | None = None,
) -> SmoothnessEstimate:
    """Running-max secant estimates of the gradient and function Lipschitz constants.

    ``f`` and ``grad`` take a batch of points (n, d). Without ``grad`` the
    gradient is taken by central differences.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    x = sample_ball(center, radius, n_pairs, rng)
    y = sample_ball(center, radius, n_pairs, rng)
    if grad is None:
        grad = lambda pts: _batch_fd_grad(f, pts)
    dist = np.linalg.norm(x - y, axis=1)
    ok = dist > 0
    gr = np.zeros(n_pairs)
    fr = np.zeros(n_pairs)
    gr[ok] = np.linalg.norm(grad(x) - grad(y), axis=1)[ok] / dist[ok]
    fr[ok] = np.abs(np.asarray(f(x)) - np.asarray(f(y)))[ok] / dist[ok]
    trace = np.maximum.accumulate(gr)
    return SmoothnessEstimate(float(trace[-1]), float(fr.max()), n_pairs, trace)


def _batch_fd_grad(f: Callable, pts: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.empty_like(pts)
    for k in range(pts.shape[1]):
        e = np.zeros(pts.shape[1])
        e[k] = h
        g[:, k] = (np.asarray(f(pts + e)) - np.asarray(f(pts - e))) / (2 * h)
    return g


def smoothed_toy_fns(sigma_smooth: float, n_mc: int, seed: int = 0, landscape: ToyLandscape | None = None):
    """Smoothed toy loss and gradient with one fixed set of perturbations (common random numbers).

    Evaluating every point against the same draws makes the estimate a
    deterministic average of shifted copies of the raw loss.
    """
    land = landscape or ToyLandscape()
    delta = stream(seed, Purpose.MC).standard_normal((n_mc, 2)) * sigma_smooth

    def _chunks(pts, fn):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        step = max(1, 2_000_000 // (n_mc * 2))
        return np.concatenate([fn(pts[i : i + step, None, :] + delta) for i in range(0, len(pts), step)])

    def f(pts):
        return _chunks(pts, lambda p: land.loss(p).mean(axis=1))

    def g(pts):
        return _chunks(pts, lambda p: land.grad(p).mean(axis=1))

    return f, g
