"""Gaussian-mechanism calibration, gradient clipping, and RDP accounting.

Noise conventions
-----------------
* DP-SGD adds a single N(0, I C^2 sigma^2) draw to the *sum* of clipped
  per-sample gradients before dividing by the realized batch size.
* Output perturbation adds N(0, I (sensitivity * sigma)^2) to the optimal
  parameters, with sensitivity 2 / (n * lambda) for the regularized objective.

``calibrate_sigma`` computes the smallest noise multiplier satisfying the
exact Gaussian-CDF privacy condition

    Phi(1/(2 sigma) - eps sigma) - e^eps Phi(-1/(2 sigma) - eps sigma) <= delta

by bisection, which is never larger than the classical
sqrt(2 ln(1.25/delta)) / eps multiplier.

The accountant tracks integer-order Renyi divergences of the subsampled
Gaussian mechanism (binomial expansion in log space) and converts composed
values to (eps, delta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.stats import norm

DEFAULT_ORDERS = tuple(range(2, 65))


class CalibrationError(RuntimeError):
    """Noise calibration failed to converge."""


def clip(g: np.ndarray, clip_bound: float) -> np.ndarray:
    """Project a gradient onto the L2 ball of radius ``clip_bound``.

    Vectors already inside the ball are returned unchanged (bit-exact), so the
    operation is idempotent; the zero vector maps to itself.
    """
    g = np.asarray(g, dtype=np.float64)
    return clip_rows(g[None, :], clip_bound)[0]


def clip_rows(G: np.ndarray, clip_bound: float) -> np.ndarray:
    """Row-wise clip of an (n, P) per-sample gradient matrix."""
    if clip_bound <= 0:
        raise ValueError(f"clip bound must be positive, got {clip_bound}")
    G = np.asarray(G, dtype=np.float64)
    norms = np.linalg.norm(G, axis=1)
    factors = np.ones_like(norms)
    over = norms > clip_bound
    factors[over] = clip_bound / norms[over]
    out = G * factors[:, None]
    # rounding can leave a rescaled row an ulp outside the ball (and different
    # norm code paths round differently); pull any scaled row that landed
    # within an ulp of the boundary a hair inside (relative 1e-15, far below
    # every numeric tolerance used downstream)
    boundary = clip_bound * (1.0 - 5e-16)
    bad = over & (np.linalg.norm(out, axis=1) > boundary)
    while np.any(bad):
        shrink = (1.0 - 1e-15) * clip_bound / np.linalg.norm(out[bad], axis=1)
        out[bad] *= shrink[:, None]
        bad = over & (np.linalg.norm(out, axis=1) > boundary)
    return out


def output_pert_sensitivity(n: int, lam: float) -> float:
    """L2 sensitivity 2 / (n lambda) of the regularized ERM minimizer."""
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    if lam <= 0:
        raise ValueError(f"regularization parameter must be positive, got {lam}")
    return 2.0 / (n * lam)


def gaussian_mechanism_delta(sigma: float, epsilon: float) -> float:
    """Exact delta of the Gaussian mechanism with noise multiplier ``sigma``.

    ``sigma`` is the ratio of the noise standard deviation to the sensitivity;
    the expression depends on the pair only through that ratio.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    a = 1.0 / (2.0 * sigma)
    b = epsilon * sigma
    return float(norm.cdf(a - b) - math.exp(epsilon) * norm.cdf(-a - b))


def classical_gaussian_sigma(epsilon: float, delta: float) -> float:
    """The sufficient-condition multiplier sqrt(2 ln(1.25/delta)) / eps (eps < 1)."""
    return math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def calibrate_sigma(
    epsilon: float,
    delta: float,
    sensitivity: float = 1.0,
    rel_tol: float = 1e-6,
    max_iter: int = 200,
) -> float:
    """Smallest noise multiplier meeting the exact (eps, delta) condition.

    Returns the multiplier sigma; the mechanism's per-coordinate standard
    deviation is ``sigma * sensitivity``.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if sensitivity <= 0:
        raise ValueError(f"sensitivity must be positive, got {sensitivity}")

    hi = max(classical_gaussian_sigma(epsilon, delta), 1e-3)
    grow = 0
    while gaussian_mechanism_delta(hi, epsilon) > delta:
        hi *= 2.0
        grow += 1
        if grow > 60:
            raise CalibrationError("failed to bracket the calibration condition")
    lo = hi / 2.0
    while lo > 1e-12 and gaussian_mechanism_delta(lo, epsilon) <= delta:
        hi = lo
        lo /= 2.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if gaussian_mechanism_delta(mid, epsilon) <= delta:
            hi = mid
        else:
            lo = mid
        if hi - lo <= rel_tol * hi:
            return hi
    raise CalibrationError(f"bisection did not converge within {max_iter} iterations")


def epsilon_for_sigma(sigma: float, delta: float, rel_tol: float = 1e-9) -> float:
    """Smallest epsilon for which a given multiplier meets the exact condition."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    lo, hi = 1e-12, 1.0
    while gaussian_mechanism_delta(sigma, hi) > delta:
        hi *= 2.0
        if hi > 1e6:
            raise CalibrationError("failed to bracket epsilon")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gaussian_mechanism_delta(sigma, mid) <= delta:
            hi = mid
        else:
            lo = mid
        if hi - lo <= rel_tol * hi:
            break
    return hi


def rdp_subsampled_gaussian(
    q: float, sigma: float, orders=DEFAULT_ORDERS
) -> np.ndarray:
    """Per-order RDP of one subsampled Gaussian step.

    For q = 1 this is the plain Gaussian value alpha / (2 sigma^2); for q < 1
    the integer-order binomial-expansion bound is evaluated in log space:

        RDP(alpha) = log( sum_j C(alpha, j) (1-q)^(alpha-j) q^j
                          exp(j (j-1) / (2 sigma^2)) ) / (alpha - 1).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling probability must be in [0, 1], got {q}")
    orders = list(orders)
    if not orders:
        raise ValueError("order grid must be non-empty")
    for a in orders:
        if int(a) != a or a < 2:
            raise ValueError(f"orders must be integers >= 2, got {a}")

    out = np.zeros(len(orders))
    if q == 0.0:
        return out
    for i, alpha in enumerate(int(a) for a in orders):
        if q == 1.0:
            out[i] = alpha / (2.0 * sigma * sigma)
            continue
        j = np.arange(alpha + 1)
        log_terms = (
            special.gammaln(alpha + 1)
            - special.gammaln(j + 1)
            - special.gammaln(alpha - j + 1)
            + j * math.log(q)
            + (alpha - j) * math.log1p(-q)
            + j * (j - 1) / (2.0 * sigma * sigma)
        )
        out[i] = special.logsumexp(log_terms) / (alpha - 1)
    return out


def rdp_to_eps(rdp: np.ndarray, delta: float, steps: int, orders=DEFAULT_ORDERS):
    """Convert composed RDP values to (epsilon, best order).

    epsilon = min_alpha [ steps * RDP(alpha) + ln(1/delta) / (alpha - 1) ].
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if steps < 1:
        raise ValueError(f"composed step count must be >= 1, got {steps}")
    orders = np.asarray(list(orders), dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    if orders.size == 0 or rdp.size != orders.size:
        raise ValueError("order grid must be non-empty and match the RDP values")
    eps = steps * rdp + math.log(1.0 / delta) / (orders - 1.0)
    best = int(np.argmin(eps))
    return float(eps[best]), int(orders[best])


@dataclass
class PrivacySpec:
    """Privacy parameters for one training configuration.

    Exactly one of ``epsilon`` / ``sigma`` may be left unset; the calibrator
    fills the missing one for output perturbation, while DP-SGD requires
    ``sigma`` and a positive ``clip_bound``.
    """

    delta: float
    epsilon: float | None = None
    sigma: float | None = None
    clip_bound: float = 0.1
    sensitivity: float = 0.0
    q: float = 0.0
    iterations: int = 1
    mechanism: str = "dpsgd"      # "dpsgd" | "output_perturbation"

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.epsilon is None and self.sigma is None:
            raise ValueError("one of epsilon or sigma must be set")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if self.mechanism not in ("dpsgd", "output_perturbation"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism == "dpsgd" and self.clip_bound <= 0:
            raise ValueError("DP-SGD requires a positive clip bound")


class RdpAccountant:
    """Composes subsampled-Gaussian RDP over steps and reports epsilon.

    One instance belongs to a single training loop; rows mirror the accountant
    log schema (step, q, sigma, alpha_star, epsilon, delta).
    """

    LOG_HEADER = ("step", "q", "sigma", "alpha_star", "epsilon", "delta")

    def __init__(self, q: float, sigma: float, delta: float, orders=DEFAULT_ORDERS):
        self.q = q
        self.sigma = sigma
        self.delta = delta
        self.orders = tuple(orders)
        self.steps = 0
        self._per_step = (
            rdp_subsampled_gaussian(q, sigma, self.orders) if sigma > 0 else None
        )
        self.rows: list[tuple] = []

    def step(self) -> float:
        """Record one more composed step and return epsilon spent so far."""
        self.steps += 1
        if self._per_step is None:
            eps, alpha = math.inf, 0
        else:
            eps, alpha = rdp_to_eps(self._per_step, self.delta, self.steps, self.orders)
        self.rows.append((self.steps, self.q, self.sigma, alpha, eps, self.delta))
        return eps

    @property
    def epsilon(self) -> float:
        return self.rows[-1][4] if self.rows else 0.0
