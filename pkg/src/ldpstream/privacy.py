"""Two-coin randomized response: randomizer, count estimator, privacy cost.

Every function here is pure given an explicit random source. A device flips
a first coin with heads-probability ``p``; on heads it reports its true bit,
on tails it reports a second coin with heads-probability ``q``. So

    P(1 | truth=1) = p + (1 - p) q
    P(1 | truth=0) = (1 - p) q

and an aggregator that saw ``y_r`` ones among ``n`` answers estimates the
number of true ones as ``(y_r - (1 - p) q n) / p``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    EncodingError,
    InfeasibleTargetError,
    ParameterDomainError,
    UndefinedMetricError,
)

DEFAULT_P_MIN = 0.05


def param_violations(p: float, q: float, p_min: float = DEFAULT_P_MIN) -> list[str]:
    """Return human-readable problems with a (p, q) pair; empty when valid."""
    problems = []
    if not (isinstance(p, (int, float)) and math.isfinite(p)) or not 0 < p <= 1:
        problems.append(f"p={p!r} must lie in (0, 1]")
    elif p < p_min:
        problems.append(f"p={p!r} is below the floor p_min={p_min!r}")
    if not (isinstance(q, (int, float)) and math.isfinite(q)) or not 0 <= q <= 1:
        problems.append(f"q={q!r} must lie in [0, 1]")
    return problems


@dataclass(frozen=True)
class RandomizationParams:
    """Coin probabilities for one query. Validated on construction."""

    p: float
    q: float
    p_min: float = DEFAULT_P_MIN

    def __post_init__(self) -> None:
        if not 0 < self.p_min <= 1:
            raise ParameterDomainError(f"p_min={self.p_min!r} must lie in (0, 1]")
        problems = param_violations(self.p, self.q, self.p_min)
        if problems:
            raise ParameterDomainError("; ".join(problems))

    @property
    def prob_one_given_one(self) -> float:
        return self.p + (1 - self.p) * self.q

    @property
    def prob_one_given_zero(self) -> float:
        return (1 - self.p) * self.q


@dataclass(frozen=True)
class PrivacyCost:
    epsilon_per_bit: float
    epsilon_per_query: float


@dataclass(frozen=True)
class EstimateResult:
    """Estimated true count for one index of one batch."""

    y_raw: float
    y_clamped: float
    n_answers: int
    stddev: float


def make_rng(seed=0, *, os_entropy: bool = False) -> np.random.Generator:
    """Build the random source used by devices and simulations.

    Seeded (deterministic) unless ``os_entropy`` is set, in which case the
    seed is ignored and the generator draws from the operating system.
    """
    if os_entropy:
        return np.random.default_rng()
    return np.random.default_rng(seed)


def randomize_bits(truth, params: RandomizationParams, rng) -> np.ndarray:
    """Vectorized randomizer: one independent coin pair per element.

    Both coins are always drawn (first the whole first-coin array, then the
    whole second-coin array) so the amount of randomness consumed depends
    only on the shape, never on the data.
    """
    truth = np.asarray(truth, dtype=np.uint8)
    first = rng.random(truth.shape) < params.p
    second = rng.random(truth.shape) < params.q
    return np.where(first, truth, second).astype(np.uint8)


def randomize_bit(truth: int, params: RandomizationParams, rng) -> int:
    if truth not in (0, 1):
        raise EncodingError(f"truth must be 0 or 1, got {truth!r}")
    first = rng.random() < params.p
    second = rng.random() < params.q
    return int(truth) if first else int(second)


def randomize_answer(
    truthful: Sequence[int], params: RandomizationParams, rng, n: int | None = None
) -> np.ndarray:
    """Privatize a one-hot (or all-zero) answer vector bit by bit.

    ``n`` is the query's bucket count; when given, a length mismatch raises
    :class:`EncodingError`. The output need not be one-hot.
    """
    bits = np.asarray(truthful)
    if bits.ndim != 1:
        raise EncodingError("answer must be a flat bit vector")
    if n is not None and bits.shape[0] != n:
        raise EncodingError(f"answer has {bits.shape[0]} bits, query has {n} buckets")
    if bits.size and not np.isin(bits, (0, 1)).all():
        raise EncodingError("answer bits must be 0 or 1")
    if int(bits.sum()) > 1:
        raise EncodingError("truthful answer must have at most one bit set")
    return randomize_bits(bits, params, rng)


def estimator_stddev(n: int, y_true_hypothesis: float, params: RandomizationParams) -> float:
    """Standard deviation of the count estimator for a batch of ``n`` answers,
    assuming ``y_true_hypothesis`` of them are truly 1."""
    if n < 0 or not 0 <= y_true_hypothesis <= n:
        raise ParameterDomainError(
            f"need 0 <= y_true_hypothesis <= n, got {y_true_hypothesis!r}, n={n!r}"
        )
    a = params.prob_one_given_one
    b = params.prob_one_given_zero
    var = y_true_hypothesis * a * (1 - a) + (n - y_true_hypothesis) * b * (1 - b)
    return math.sqrt(max(var, 0.0)) / params.p


def estimate_true_count(y_r: int, n: int, params: RandomizationParams) -> EstimateResult:
    y_r = int(y_r)
    n = int(n)
    if n < 0 or y_r < 0:
        raise ParameterDomainError(f"counts must be nonnegative, got y_r={y_r}, n={n}")
    if y_r > n:
        raise ParameterDomainError(f"y_r={y_r} exceeds the number of answers n={n}")
    p, q = params.p, params.q
    y_raw = (y_r - (1 - p) * q * n) / p
    y_clamped = min(max(y_raw, 0.0), float(n))
    return EstimateResult(
        y_raw=y_raw,
        y_clamped=y_clamped,
        n_answers=n,
        stddev=estimator_stddev(n, y_clamped, params),
    )


def relative_error(y_true: float, y_est: float) -> float:
    """``|y_true - y_est| / |y_true|``; undefined (raises) when y_true is 0."""
    if y_true == 0:
        raise UndefinedMetricError("relative error is undefined for a zero true count")
    return abs(y_true - y_est) / abs(y_true)


def epsilon_of(params: RandomizationParams) -> PrivacyCost:
    """Local-DP cost of one reported bit, and of one one-hot answer.

    The likelihood ratios for output 1 and output 0 are
    ``1 + p / ((1-p) q)`` and ``1 + p / ((1-p) (1-q))``; the larger one
    (smaller of q, 1-q in the denominator) sets the cost.
    """
    p, q = params.p, params.q
    denom = (1 - p) * min(q, 1 - q)
    eps = math.inf if denom == 0 else math.log1p(p / denom)
    return PrivacyCost(epsilon_per_bit=eps, epsilon_per_query=2 * eps)


def params_for_target(
    epsilon_target: float,
    q: float,
    p_min: float = DEFAULT_P_MIN,
    tol: float = 1e-9,
) -> RandomizationParams:
    """Largest p whose per-bit cost stays within ``epsilon_target`` (bisection)."""
    if not epsilon_target > 0:
        raise ParameterDomainError(f"epsilon_target={epsilon_target!r} must be positive")
    if not 0 < q < 1:
        raise ParameterDomainError(f"q={q!r} must lie strictly inside (0, 1)")

    def cost(p: float) -> float:
        return epsilon_of(RandomizationParams(p, q, p_min)).epsilon_per_bit

    if cost(p_min) > epsilon_target:
        raise InfeasibleTargetError(
            f"epsilon={epsilon_target!r} needs p below the floor p_min={p_min!r}"
        )
    lo, hi = p_min, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cost(mid) <= epsilon_target:
            lo = mid
        else:
            hi = mid
    return RandomizationParams(lo, q, p_min)
