"""Privacy accounting for DP-SGD.

Covers the classic Gaussian-mechanism calibration, the advanced composition
theorem, and Renyi-DP accounting for the Poisson-subsampled Gaussian
mechanism at integer orders, with additive composition over steps and
conversion to (epsilon, delta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

DEFAULT_DELTA = 1e-5
DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256, 512)


class AccountantError(ValueError):
    pass


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        orders = np.asarray(self.orders, dtype=np.float64)
        if orders.size != values.size:
            raise AccountantError("orders and values differ in length")
        if orders.size and (np.any(orders <= 1) or np.any(np.diff(orders) <= 0)):
            raise AccountantError("orders must be strictly increasing and > 1")
        if np.any(values < 0):
            raise AccountantError("RDP values must be non-negative")

    def __mul__(self, steps: int) -> "RdpCurve":
        return RdpCurve(self.orders, self.values * steps)

    __rmul__ = __mul__

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if tuple(self.orders) != tuple(other.orders):
            raise AccountantError("cannot add curves on different order grids")
        return RdpCurve(self.orders, self.values + other.values)


@dataclass(frozen=True)
class PrivacySpend:
    epsilon: float
    delta: float
    sigma: float
    q: float
    steps: int
    order: float | None = None


def gaussian_sigma_for(epsilon: float, delta: float, l2_sensitivity: float = 1.0) -> float:
    """Noise std for the classic (epsilon, delta) Gaussian mechanism, epsilon in (0, 1)."""
    if not 0 < epsilon < 1:
        raise AccountantError("classic Gaussian calibration needs 0 < epsilon < 1")
    if not 0 < delta < 1 or l2_sensitivity <= 0:
        raise AccountantError("need 0 < delta < 1 and positive sensitivity")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * l2_sensitivity / epsilon


def advanced_composition(eps: float, delta: float, delta_prime: float, k: int) -> tuple[float, float]:
    """(eps', k*delta + delta') for k-fold adaptive composition."""
    if eps < 0 or delta < 0 or delta_prime < 0 or k < 1:
        raise AccountantError("invalid composition arguments")
    if eps == 0:
        return 0.0, k * delta + delta_prime
    eps_prime = math.sqrt(2 * k * math.log(1 / delta_prime)) * eps + k * eps * math.expm1(eps)
    return eps_prime, k * delta + delta_prime


def _log_add(a: float, b: float) -> float:
    lo, hi = min(a, b), max(a, b)
    if lo == -math.inf:
        return hi
    return hi + math.log1p(math.exp(lo - hi))


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """RDP of the Poisson-subsampled Gaussian mechanism at integer order ``alpha``.

    For q < 1 this is ``log(A_alpha) / (alpha - 1)`` with

        A_alpha = sum_k C(alpha, k) (1-q)^(alpha-k) q^k exp((k^2 - k) / (2 sigma^2)),

    accumulated in the log domain.
    """
    if not 0 <= q <= 1:
        raise AccountantError(f"sampling rate {q} outside [0, 1]")
    if int(alpha) != alpha or alpha < 2:
        raise AccountantError("only integer orders >= 2 are supported")
    alpha = int(alpha)
    if q == 0:
        return 0.0
    if sigma <= 0:
        return math.inf
    if q == 1:
        return alpha / (2 * sigma**2)
    log_q, log_1mq = math.log(q), math.log1p(-q)
    log_a = -math.inf
    for k in range(alpha + 1):
        term = (
            special.gammaln(alpha + 1)
            - special.gammaln(k + 1)
            - special.gammaln(alpha - k + 1)
            + k * log_q
            + (alpha - k) * log_1mq
            + (k * k - k) / (2 * sigma**2)
        )
        log_a = _log_add(log_a, float(term))
    # A_alpha >= 1 mathematically; rounding can dip just below for tiny q
    return max(log_a, 0.0) / (alpha - 1)


def rdp_curve(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    """Single-step RDP curve of the subsampled Gaussian mechanism."""
    values = [rdp_subsampled_gaussian(q, sigma, a) for a in orders]
    if any(math.isinf(v) for v in values):
        raise AccountantError("zero noise with q > 0 gives unbounded privacy loss")
    return RdpCurve(tuple(orders), np.array(values))


def gaussian_rdp_curve(sigma: float, sensitivity: float = 1.0, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    """Plain Gaussian mechanism RDP, alpha * sens^2 / (2 sigma^2)."""
    if sigma <= 0:
        raise AccountantError("sigma must be positive")
    a = np.asarray(orders, dtype=np.float64)
    return RdpCurve(tuple(orders), a * sensitivity**2 / (2 * sigma**2))


def compose_and_convert(
    curve: RdpCurve, steps: int, delta: float = DEFAULT_DELTA, conversion: str = "classic"
) -> tuple[float, float]:
    """Compose ``steps`` copies of ``curve`` and convert to epsilon.

    Returns ``(epsilon, best_order)``. The classic conversion is
    ``eps = min_a T * rdp(a) + log(1/delta) / (a - 1)``; ``"improved"`` uses
    the tighter bound ``T*rdp(a) + log((a-1)/a) - (log(delta) + log(a)) / (a-1)``.
    """
    if len(curve.orders) == 0:
        raise AccountantError("empty order grid")
    if steps < 0 or not 0 < delta < 1:
        raise AccountantError("need steps >= 0 and 0 < delta < 1")
    a = np.asarray(curve.orders, dtype=np.float64)
    total = curve.values * steps
    if conversion == "classic":
        eps = total + math.log(1 / delta) / (a - 1)
    elif conversion == "improved":
        eps = total + np.log1p(-1 / a) - (math.log(delta) + np.log(a)) / (a - 1)
    else:
        raise AccountantError(f"unknown conversion {conversion!r}")
    i = int(np.argmin(eps))
    return max(float(eps[i]), 0.0), float(a[i])


def epsilon_for(q: float, sigma: float, steps: int, delta: float = DEFAULT_DELTA,
                orders: Sequence[int] = DEFAULT_ORDERS) -> PrivacySpend:
    """Spent (epsilon, delta) after ``steps`` DP-SGD steps."""
    if steps == 0:
        return PrivacySpend(0.0, delta, sigma, q, 0, None)
    eps, order = compose_and_convert(rdp_curve(q, sigma, orders), steps, delta)
    return PrivacySpend(eps, delta, sigma, q, steps, order)


def steps_for_budget(epsilon_target: float, delta: float, q: float, sigma: float,
                     orders: Sequence[int] = DEFAULT_ORDERS, max_steps: int = 10**9) -> int:
    """Largest T whose composed epsilon stays within ``epsilon_target``."""
    if epsilon_target <= 0:
        raise AccountantError("epsilon target must be positive")
    curve = rdp_curve(q, sigma, orders)
    floor, _ = compose_and_convert(curve, 0, delta)
    if epsilon_target < floor:
        raise AccountantError(f"target {epsilon_target} is below the T=0 floor {floor:.5f}")

    def fits(t: int) -> bool:
        return compose_and_convert(curve, t, delta)[0] <= epsilon_target

    if not fits(1):
        return 0
    if not curve.values.any():
        return max_steps
    lo, hi = 1, 2
    while fits(hi):
        lo, hi = hi, hi * 2
        if hi > max_steps:
            return max_steps
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo
