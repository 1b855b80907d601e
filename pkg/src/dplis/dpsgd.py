"""DP-SGD and DP-SGD with loss smoothing (DPlis).

One step: Poisson-sample a batch with rate L/N, compute per-sample
gradients (averaged over K random parameter perturbations of scale
``R * (lr / L) * sigma * C`` when smoothing), clip each to C, add
N(0, sigma^2 C^2 I), divide by the *expected* batch size L and descend.

Randomness is drawn from counter-based streams keyed by the config seed,
the step index, the sample index and a purpose tag, so a run is a pure
function of its config.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import accountant
from .nn import (
    Batch,
    ClippedSum,
    MlpSpec,
    ParamVector,
    clip_factors,
    clipped_gradient_sum,
    evaluate,
    implicit_noise_sizes,
    init_params,
    loss_and_grad,
    per_sample_gradients,
    smoothed_clipped_gradient_sum,
)
from .rng import Purpose, stream

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, step: int, what: str = "gradient"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class DpSgdConfig:
    lr: float
    expected_batch: int
    noise_multiplier: float
    clip: float
    steps: int
    dataset_size: int
    smoothing_radius: float = 0.0
    smoothing_samples: int = 1
    seed: int = 0
    delta: float = accountant.DEFAULT_DELTA
    # "implicit": exact-in-law sampling of the perturbed products (fast);
    # "explicit": draw every perturbation vector densely (reference route).
    perturbation: str = "implicit"

    def __post_init__(self):
        vals = (self.lr, self.noise_multiplier, self.clip, self.smoothing_radius, self.delta)
        if not all(np.isfinite(vals)):
            raise ValueError("config values must be finite")
        if self.lr <= 0 or self.clip <= 0:
            raise ValueError("lr and clip must be positive")
        if self.noise_multiplier < 0 or self.smoothing_radius < 0:
            raise ValueError("noise_multiplier and smoothing_radius must be >= 0")
        if self.expected_batch < 1 or self.dataset_size < 1 or self.expected_batch > self.dataset_size:
            raise ValueError("need 1 <= expected_batch <= dataset_size")
        if self.steps < 0 or self.smoothing_samples < 1:
            raise ValueError("steps must be >= 0 and smoothing_samples >= 1")
        if self.perturbation not in ("implicit", "explicit"):
            raise ValueError(f"unknown perturbation route {self.perturbation!r}")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")

    @property
    def sampling_rate(self) -> float:
        return self.expected_batch / self.dataset_size

    @property
    def smoothing_std(self) -> float:
        """Per-coordinate std of the smoothing perturbation, R*(lr/L)*sigma*C."""
        return self.smoothing_radius * self.lr / self.expected_batch * self.noise_multiplier * self.clip

    def replace(self, **kw) -> "DpSgdConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class StepStats:
    step: int
    batch_size: int
    clipped_norm_mean: float
    max_clipped_norm: float
    param_norm: float
    grad_sq_norm: float | None = None
    clip_violations: int = 0


@dataclass
class RunRecord:
    seed: int
    config: DpSgdConfig
    steps: list[StepStats]
    params: ParamVector
    test_accuracy: float
    test_loss: float
    epsilon: float
    delta: float
    best_test_accuracy: float | None = None
    eval_trace: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def mean_sq_grad_norm(self) -> float | None:
        vals = [s.grad_sq_norm for s in self.steps if s.grad_sq_norm is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def clip_violations(self) -> int:
        return sum(s.clip_violations for s in self.steps)

    @property
    def max_clipped_norm(self) -> float:
        return max((s.max_clipped_norm for s in self.steps), default=0.0)


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices included independently with probability q (possibly none)."""
    if not 0 < q <= 1:
        raise ValueError("sampling probability must be in (0, 1]")
    return np.flatnonzero(rng.random(n) < q)


def clip_gradient(g: np.ndarray, clip: float) -> np.ndarray:
    """Scale ``g`` into the l2 ball of radius ``clip``; never returns a norm above it."""
    if clip <= 0:
        raise ValueError("clip threshold must be positive")
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("cannot clip a non-finite gradient")
    norm = float(np.linalg.norm(g))
    if norm <= clip:
        return g.copy()
    factor = clip / norm
    out = g * factor
    while np.linalg.norm(out) > clip:
        factor = np.nextafter(factor, 0.0)
        out = g * factor
    return out


def smoothed_per_sample_gradient(
    params: ParamVector, spec: MlpSpec, sample: Batch, cfg: DpSgdConfig, rng: np.random.Generator
) -> np.ndarray:
    """Average gradient of one sample's loss over K perturbed copies of the parameters.

    Draws ``nu_j ~ N(0, sigma^2 C^2 I)`` densely and evaluates at
    ``theta + R * (lr / L) * nu_j``.
    """
    if len(sample) != 1:
        raise ValueError("expected a single sample")
    scale = cfg.smoothing_radius * cfg.lr / cfg.expected_batch
    if scale == 0:
        return per_sample_gradients(params, spec, sample)[0]
    grad = lambda v: per_sample_gradients(params.with_values(v), spec, sample)[0]
    return smoothed_gradient(grad, params.values, scale, cfg.noise_multiplier * cfg.clip,
                             cfg.smoothing_samples, rng)


def smoothed_gradient(grad, theta: np.ndarray, scale: float, std: float, k: int,
                      rng: np.random.Generator) -> np.ndarray:
    """(1/k) sum_j grad(theta + scale * nu_j) with nu_j ~ N(0, std^2 I)."""
    acc = np.zeros_like(theta)
    for _ in range(k):
        nu = rng.standard_normal(theta.size) * std
        acc += grad(theta + scale * nu)
    return acc / k


def _explicit_clipped_sum(params, spec, batch, ids, cfg, step) -> ClippedSum:
    grads = np.stack(
        [
            smoothed_per_sample_gradient(params, spec, batch.subset(slice(k, k + 1)), cfg,
                                         stream(cfg.seed, Purpose.SMOOTH, step, int(ids[k])))
            for k in range(len(batch))
        ]
    ) if len(batch) else np.zeros((0, params.values.size))
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite per-sample gradient")
    norms = np.linalg.norm(grads, axis=1)
    f = clip_factors(norms, cfg.clip)
    total = f @ grads if len(batch) else np.zeros_like(params.values)
    cs = ClippedSum(total, norms, f)
    cs.extras["direct_clipped_norms"] = np.linalg.norm(grads * f[:, None], axis=1)
    return cs


def _implicit_clipped_sum(params, spec, batch, ids, cfg, step) -> ClippedSum:
    K = cfg.smoothing_samples
    nf, nb = implicit_noise_sizes(spec)
    fwd = np.empty((len(batch), K, nf))
    bwd = np.empty((len(batch), K, nb))
    for k, i in enumerate(ids):
        g = stream(cfg.seed, Purpose.SMOOTH_IMPLICIT, step, int(i))
        fwd[k] = g.standard_normal((K, nf))
        bwd[k] = g.standard_normal((K, nb))
    return smoothed_clipped_gradient_sum(params, spec, batch, cfg.clip, cfg.smoothing_std, fwd, bwd)


def dp_sgd_step(
    params: ParamVector,
    spec: MlpSpec,
    data: Batch,
    cfg: DpSgdConfig,
    step: int,
    *,
    smoothing_path: bool | None = None,
    audit: bool = False,
    track_grad: bool = False,
) -> tuple[ParamVector, StepStats]:
    """One DP-SGD update; the step index keys every random stream it uses.

    ``smoothing_path`` forces the smoothed (True) or plain (False) gradient
    code; by default smoothing is used iff the radius is positive. With
    ``audit`` every clipped per-sample gradient is materialized and its
    norm measured directly.
    """
    ids = poisson_sample(len(data), cfg.sampling_rate, stream(cfg.seed, Purpose.BATCH, step))
    batch = data.subset(ids)
    smoothing = cfg.smoothing_radius > 0 if smoothing_path is None else smoothing_path
    try:
        if not smoothing:
            cs = clipped_gradient_sum(params, spec, batch, cfg.clip)
        elif cfg.perturbation == "explicit":
            cs = _explicit_clipped_sum(params, spec, batch, ids, cfg, step)
        else:
            cs = _implicit_clipped_sum(params, spec, batch, ids, cfg, step)
    except FloatingPointError as exc:
        raise NonFiniteGradientError(step) from exc

    noise = stream(cfg.seed, Purpose.DP_NOISE, step).standard_normal(params.values.size)
    noisy = (cs.total + noise * (cfg.noise_multiplier * cfg.clip)) / cfg.expected_batch
    new = params.values - cfg.lr * noisy
    if not np.all(np.isfinite(new)):
        raise NonFiniteGradientError(step, "parameter")

    clipped = cs.clipped_norms
    violations = int(np.sum(clipped > cfg.clip))
    if audit and len(batch):
        direct = cs.extras.get("direct_clipped_norms")
        if direct is None:
            direct = _audit_norms(params, spec, batch, cs, cfg, step, ids, smoothing)
        clipped = np.maximum(clipped, direct)
        violations = int(np.sum(direct > cfg.clip))
    grad_sq = None
    if track_grad:
        grad_sq = float(np.sum(loss_and_grad(params, spec, data)[1] ** 2))
    stats = StepStats(
        step=step,
        batch_size=len(batch),
        clipped_norm_mean=float(clipped.mean()) if len(batch) else 0.0,
        max_clipped_norm=float(clipped.max()) if len(batch) else 0.0,
        param_norm=float(np.linalg.norm(new)),
        grad_sq_norm=grad_sq,
        clip_violations=violations,
    )
    return params.with_values(new), stats


AUDIT_CHUNK = 32  # samples per materialized gradient block


def _audit_norms(params, spec, batch, cs, cfg, step, ids, smoothing) -> np.ndarray:
    if not smoothing:
        out = np.empty(len(batch))
        for lo in range(0, len(batch), AUDIT_CHUNK):
            sl = slice(lo, lo + AUDIT_CHUNK)
            g = per_sample_gradients(params, spec, batch.subset(sl))
            out[sl] = np.linalg.norm(g * cs.factors[sl, None], axis=1)
        return out
    # rebuild each sample's smoothed gradient from the same noise draws
    out = np.empty(len(batch))
    for k in range(len(batch)):
        sub = _implicit_clipped_sum(params, spec, batch.subset([k]), ids[[k]], cfg, step)
        # a single-sample clipped sum is that sample's clipped gradient
        vec = sub.total / sub.factors[0] * cs.factors[k]
        out[k] = np.linalg.norm(vec)
    return out


def train(
    spec: MlpSpec,
    train_data: Batch,
    test_data: Batch,
    cfg: DpSgdConfig,
    *,
    eval_every: int = 0,
    audit: bool = False,
    track_grad: bool = False,
    init: ParamVector | None = None,
) -> RunRecord:
    """Run ``cfg.steps`` DP-SGD steps from a seeded init and account the spend."""
    if len(train_data) == 0 or len(test_data) == 0:
        raise ValueError("train and test data must be nonempty")
    if len(train_data) != cfg.dataset_size:
        raise ValueError(f"config dataset_size {cfg.dataset_size} != {len(train_data)} training samples")
    params = init if init is not None else init_params(spec, cfg.seed)
    trace: list[StepStats] = []
    evals: list[tuple[int, float, float]] = []
    for t in range(cfg.steps):
        params, st = dp_sgd_step(params, spec, train_data, cfg, t, audit=audit, track_grad=track_grad)
        trace.append(st)
        if eval_every and (t + 1) % eval_every == 0:
            acc, loss = evaluate(params, spec, test_data)
            evals.append((t + 1, acc, loss))
            log.debug("seed %d step %d acc %.4f loss %.4f", cfg.seed, t + 1, acc, loss)
    acc, loss = evaluate(params, spec, test_data)
    spend = spend_for(cfg)
    best = max([a for _, a, _ in evals] + [acc]) if eval_every else None
    return RunRecord(
        seed=cfg.seed,
        config=cfg,
        steps=trace,
        params=params,
        test_accuracy=acc,
        test_loss=loss,
        epsilon=spend.epsilon,
        delta=spend.delta,
        best_test_accuracy=best,
        eval_trace=evals,
    )


def spend_for(cfg: DpSgdConfig) -> accountant.PrivacySpend:
    if cfg.steps == 0:
        return accountant.PrivacySpend(0.0, cfg.delta, cfg.noise_multiplier, cfg.sampling_rate, 0)
    if cfg.noise_multiplier == 0:
        return accountant.PrivacySpend(float("inf"), cfg.delta, 0.0, cfg.sampling_rate, cfg.steps)
    return accountant.epsilon_for(cfg.sampling_rate, cfg.noise_multiplier, cfg.steps, cfg.delta)


def plain_sgd(
    spec: MlpSpec,
    data: Batch,
    *,
    lr: float,
    batch_size: int,
    epochs: int,
    seed: int,
    purpose: Purpose = Purpose.PATE_TEACHER,
    sigma_smooth: float = 0.0,
    smoothing_samples: int = 1,
    init: ParamVector | None = None,
    lr_schedule=None,
    callback=None,
) -> ParamVector:
    """Non-private minibatch SGD, optionally on the K-sample Gaussian-smoothed loss.

    The smoothed loss is ``(1/K) sum_j L(theta + N(0, sigma_smooth^2 I))``;
    with ``sigma_smooth == 0`` the run is exactly plain SGD. Each epoch
    shuffles with a stream keyed by ``(seed, purpose, epoch)``.
    """
    params = init if init is not None else init_params(spec, seed)
    n = len(data)
    K = smoothing_samples
    n_batches = max(1, -(-n // batch_size))
    for epoch in range(epochs):
        order = stream(seed, purpose, epoch).permutation(n)
        eta = lr if lr_schedule is None else lr_schedule(epoch)
        for b in range(n_batches):
            idx = order[b * batch_size : (b + 1) * batch_size]
            batch = data.subset(idx)
            if sigma_smooth == 0:
                _, g = loss_and_grad(params, spec, batch)
            else:
                g = _smoothed_mean_grad(params, spec, batch, sigma_smooth, K,
                                        stream(seed, purpose, epoch, b + 1))
            new = params.values - eta * g
            if not np.all(np.isfinite(new)):
                raise NonFiniteGradientError(epoch * n_batches + b, "parameter")
            params = params.with_values(new)
        if callback is not None:
            callback(epoch, params)
    return params


def _smoothed_mean_grad(params, spec, batch, sigma_smooth, K, rng) -> np.ndarray:
    """Gradient of (1/K) sum_j mean-batch-loss(theta + nu_j), nu_j ~ N(0, sigma_smooth^2 I)."""
    acc = np.zeros_like(params.values)
    for _ in range(K):
        nu = rng.standard_normal(params.values.size) * sigma_smooth
        acc += loss_and_grad(params.with_values(params.values + nu), spec, batch)[1]
    return acc / K
