"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

RDP budgets are evaluated on integer orders with the exact binomial series
for the sampled Gaussian mechanism, composed additively over steps and
converted to (epsilon, delta) with the classic conversion

    eps = min_alpha [ rdp(alpha) + log(1/delta) / (alpha - 1) ].
"""

from __future__ import annotations

import enum
import functools
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from dpfb.errors import CalibrationError, NumericError, ParameterError

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 257))
DEFAULT_DELTA = 6e-6
MIN_SIGMA = 1e-3
SIGMA_BRACKET = (0.05, 1e4)


@dataclass(frozen=True)
class PrivacyParams:
    noise_multiplier: float
    sampling_prob: float
    steps: int
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        _check_sigma(self.noise_multiplier)
        _check_q(self.sampling_prob)
        if int(self.steps) != self.steps or self.steps < 1:
            raise ParameterError(f"steps must be a positive integer, got {self.steps}")
        _check_delta(self.delta)


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise ParameterError("orders and values must have equal length")
        if any(a < 2 for a in self.orders):
            raise ParameterError("Renyi orders must be >= 2")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise ParameterError("Renyi orders must be strictly ascending")
        if any(not v >= 0 for v in self.values):
            raise ParameterError("RDP values must be non-negative")

    def value_at(self, order: int) -> float:
        return self.values[self.orders.index(order)]


@dataclass(frozen=True)
class PrivacySpend:
    epsilon: float
    delta: float
    optimal_order: int | None
    # set when the minimising order sits on the edge of the grid
    at_grid_edge: bool = False


class EpsilonRange(enum.Enum):
    STRICT = "0<eps<1"
    MEDIUM = "1<eps<3"
    LOOSE = "3<eps<10"
    OVER = "eps>=10"
    NON_PRIVATE = "eps=inf"


class BoundaryWarning(UserWarning):
    """Epsilon fell exactly on a range boundary and was assigned downwards."""


def _check_sigma(sigma: float) -> None:
    if not (sigma >= MIN_SIGMA and math.isfinite(sigma)):
        raise ParameterError(
            f"noise multiplier must be finite and >= {MIN_SIGMA}, got {sigma}")


def _check_q(q: float) -> None:
    if not 0.0 < q <= 1.0:
        raise ParameterError(f"sampling probability must be in (0, 1], got {q}")


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must be in (0, 1), got {delta}")


def _check_order(alpha: int) -> None:
    if int(alpha) != alpha or alpha < 2:
        raise ParameterError(f"Renyi order must be an integer >= 2, got {alpha}")


def gaussian_rdp(sigma: float, alpha: int) -> float:
    """RDP of order ``alpha`` for the unit-sensitivity Gaussian mechanism."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    _check_order(alpha)
    return alpha / (2.0 * sigma * sigma)


@functools.lru_cache(maxsize=8)
def _series_table(orders: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(log binomials, k grid, a - k) for an order grid; out-of-range k masked."""
    amax = max(orders)
    k = np.arange(amax + 1, dtype=np.float64)[None, :]
    a = np.asarray(orders, dtype=np.float64)[:, None]
    valid = k <= a
    with np.errstate(invalid="ignore"):
        log_binom = np.where(valid, gammaln(a + 1) - gammaln(k + 1) - gammaln(a - k + 1), -np.inf)
    return log_binom, k, np.where(valid, a - k, 0.0)


def _log_series(q: float, sigma: float, orders: tuple[int, ...]) -> np.ndarray:
    """log A_alpha for each order, A_alpha being the binomial series."""
    log_binom, k, a_minus_k = _series_table(orders)
    # 0 * log(0) at k == a when q == 1 must contribute 0
    tail = a_minus_k * math.log1p(-q) if q < 1.0 else np.where(a_minus_k > 0, -np.inf, 0.0)
    terms = log_binom + tail + k * math.log(q) + k * (k - 1) / (2.0 * sigma * sigma)
    return logsumexp(terms, axis=1)


def subsampled_gaussian_rdp_orders(q: float, sigma: float,
                                   orders: Sequence[int] = DEFAULT_ORDERS) -> np.ndarray:
    """Vectorised :func:`subsampled_gaussian_rdp` over an order grid."""
    if q == 0:
        return np.zeros(len(orders))
    _check_q(q)
    _check_sigma(sigma)
    for a in orders:
        _check_order(a)
    orders_arr = np.asarray(orders, dtype=np.int64)
    log_a = _log_series(q, sigma, tuple(int(a) for a in orders))
    rdp = log_a / (orders_arr - 1)
    if not np.all(np.isfinite(rdp)):
        bad = orders_arr[~np.isfinite(rdp)]
        raise NumericError(
            f"RDP series overflowed for q={q}, sigma={sigma} at orders {bad.tolist()}")
    # log A_alpha >= 0 mathematically; clamp round-off below zero
    return np.maximum(rdp, 0.0)


def subsampled_gaussian_rdp(q: float, sigma: float, alpha: int) -> float:
    """RDP of order ``alpha`` for the Poisson-subsampled Gaussian mechanism.

    Sums ``C(a,k) (1-q)^(a-k) q^k exp(k(k-1)/(2 sigma^2))`` over k = 0..a in
    log space and divides the log by ``a - 1``. ``q = 0`` returns 0.
    """
    return float(subsampled_gaussian_rdp_orders(q, sigma, (alpha,))[0])


def compose(curve: RdpCurve, steps: int) -> RdpCurve:
    if int(steps) != steps or steps < 1:
        raise ParameterError(f"steps must be a positive integer, got {steps}")
    return RdpCurve(curve.orders, tuple(v * steps for v in curve.values))


def rdp_to_eps(curve: RdpCurve, delta: float) -> PrivacySpend:
    """Convert an RDP curve to (epsilon, delta); ties go to the smallest order."""
    _check_delta(delta)
    if not curve.orders:
        raise ParameterError("cannot convert an empty RDP curve")
    orders = np.asarray(curve.orders, dtype=np.float64)
    eps = np.asarray(curve.values) + math.log(1.0 / delta) / (orders - 1.0)
    idx = int(np.argmin(eps))  # argmin returns the first minimum
    edge = len(orders) > 1 and idx in (0, len(orders) - 1)
    return PrivacySpend(float(eps[idx]), delta, int(curve.orders[idx]), edge)


def rdp_curve(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    values = subsampled_gaussian_rdp_orders(q, sigma, orders)
    return RdpCurve(tuple(int(a) for a in orders), tuple(float(v) for v in values))


def epsilon_for(params: PrivacyParams, orders: Sequence[int] = DEFAULT_ORDERS) -> PrivacySpend:
    curve = rdp_curve(params.sampling_prob, params.noise_multiplier, orders)
    return rdp_to_eps(compose(curve, int(params.steps)), params.delta)


def _eps(sigma: float, q: float, steps: int, delta: float) -> float:
    return epsilon_for(PrivacyParams(sigma, q, steps, delta)).epsilon


def calibrate_sigma(target_eps: float, q: float, steps: int, delta: float = DEFAULT_DELTA,
                    rel_tol: float = 1e-3, bracket: tuple[float, float] = SIGMA_BRACKET) -> float:
    """Smallest-noise sigma (to tolerance) whose epsilon does not exceed the target.

    Bisection on sigma; epsilon is non-increasing in sigma. The upper end of
    the final bracket is returned so the achieved epsilon never exceeds
    ``target_eps``.
    """
    if not (target_eps > 0 and math.isfinite(target_eps)):
        raise ParameterError(f"target epsilon must be positive and finite, got {target_eps}")
    PrivacyParams(1.0, q, steps, delta)  # validates q, steps, delta

    lo, hi = bracket
    eps_lo, eps_hi = _eps(lo, q, steps, delta), _eps(hi, q, steps, delta)
    if eps_hi > target_eps or eps_lo < target_eps:
        raise CalibrationError(
            f"target eps={target_eps:g} outside the reachable range: "
            f"sigma={lo:g} gives eps={eps_lo:.6g}, sigma={hi:g} gives eps={eps_hi:.6g}")

    # geometric bisection; epsilon varies roughly like 1/sigma
    while hi / lo - 1.0 > rel_tol * 1e-3:
        mid = math.sqrt(lo * hi)
        if _eps(mid, q, steps, delta) > target_eps:
            lo = mid
        else:
            hi = mid
    return hi


def classify_epsilon_range(eps: float) -> EpsilonRange:
    """Map an achieved epsilon onto the reporting ranges.

    Values exactly on 1, 3 or 10 go to the lower range and emit a
    :class:`BoundaryWarning`.
    """
    if math.isnan(eps) or eps <= 0:
        raise ParameterError(f"epsilon must be positive, got {eps}")
    if math.isinf(eps):
        return EpsilonRange.NON_PRIVATE
    if eps in (1.0, 3.0, 10.0):
        warnings.warn(f"epsilon={eps:g} lies on a range boundary; assigned to the lower range",
                      BoundaryWarning, stacklevel=2)
    if eps <= 1.0:
        return EpsilonRange.STRICT
    if eps <= 3.0:
        return EpsilonRange.MEDIUM
    if eps <= 10.0:
        return EpsilonRange.LOOSE
    return EpsilonRange.OVER
