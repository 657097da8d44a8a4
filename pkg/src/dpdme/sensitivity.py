"""High-probability sensitivity of stochastic quantization, and a coupling sampler to check it.

All distances are in grid steps of the quantizer (units of
``2 xmax / (k-1)``), which is the integer scale the Binomial noise is added
on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dpdme.quantize import QuantizerConfig, bin_position, clip_coordinates


@dataclass(frozen=True)
class SensitivityBounds:
    delta_1: float
    delta_2: float
    delta_inf: float
    holds_with_delta: float


def sensitivity_bounds(D: float, xmax: float, k: int, d: int, delta: float) -> SensitivityBounds:
    """Worst-case l1/l2/l-inf sensitivity of the summed levels.

    Holds with probability ``1 - delta`` for any two neighbouring datasets
    whose client vectors have l2 norm at most ``D``. With ``q = xmax/(k-1)``::

        delta_inf = k + 1
        delta_1   = sqrt(d) D / q + sqrt(2 sqrt(d) D log(2/delta) / q) + 4/3 log(2/delta)
        delta_2   = D / q + sqrt(delta_1 + sqrt(2 sqrt(d) D log(2/delta) / q))
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if D < 0 or xmax <= 0 or d < 1:
        raise ValueError("need D >= 0, xmax > 0, d >= 1")
    q = xmax / (k - 1)
    log_term = math.log(2.0 / delta)
    cross = math.sqrt(2.0 * math.sqrt(d) * D * log_term / q)
    delta_1 = math.sqrt(d) * D / q + cross + 4.0 / 3.0 * log_term
    delta_2 = D / q + math.sqrt(delta_1 + cross)
    return SensitivityBounds(delta_1=delta_1, delta_2=delta_2, delta_inf=float(k + 1), holds_with_delta=delta)


@dataclass(frozen=True)
class DistanceBounds:
    l1: float
    l2: float
    linf: float


def pairwise_bounds(x, x_prime, cfg: QuantizerConfig, delta: float) -> DistanceBounds:
    """Input-specific bounds on ``|y - y'|`` for one coupled client pair.

    ``a = ||x - x'||_1 / w`` with ``w`` the grid spacing::

        linf <= ||x - x'||_inf / w + 2
        l1   <= a + sqrt(2 a log(2/delta)) + 4/3 log(2/delta)
        l2   <= ||x - x'||_2 / w + sqrt(a + sqrt(8 a log(2/delta)) + 4/3 log(2/delta))
    """
    x, _ = clip_coordinates(x, cfg)
    xp, _ = clip_coordinates(x_prime, cfg)
    diff = np.abs(x - xp) / cfg.spacing
    a = float(diff.sum())
    log_term = math.log(2.0 / delta)
    return DistanceBounds(
        l1=a + math.sqrt(2.0 * a * log_term) + 4.0 / 3.0 * log_term,
        l2=float(np.sqrt(np.sum(diff**2))) + math.sqrt(a + math.sqrt(8.0 * a * log_term) + 4.0 / 3.0 * log_term),
        linf=float(diff.max(initial=0.0)) + 2.0,
    )


@dataclass
class CoupledPair:
    y: np.ndarray
    y_prime: np.ndarray
    l1_dist: np.ndarray | float
    l2_dist: np.ndarray | float
    linf_dist: np.ndarray | float
    # Per-coordinate dominating variable L_j >= |y_j - y'_j| from the coupling.
    coupling_bound: np.ndarray


def sample_coupled_levels(x, x_prime, cfg: QuantizerConfig, rng: np.random.Generator, trials: int) -> CoupledPair:
    """Draw ``trials`` coupled quantizations of ``(x, x')``; arrays have shape ``(trials, d)``.

    Coordinates that fall in the same bin share one uniform draw, so their
    levels differ only with probability ``|x_j - x'_j| / w``. Coordinates in
    different bins are quantized independently. Either way each marginal is
    exactly that of :func:`dpdme.quantize.stochastic_quantize`.
    """
    x, _ = clip_coordinates(x, cfg)
    xp, _ = clip_coordinates(x_prime, cfg)
    if x.shape != xp.shape or x.ndim != 1:
        raise ValueError("x and x_prime must be vectors of equal length")
    r, frac = bin_position(x, cfg)
    rp, fracp = bin_position(xp, cfg)
    same = r == rp

    u = rng.random((trials, x.size))
    u_other = rng.random((trials, x.size))
    u_prime = np.where(same, u, u_other)
    up = u < frac
    up_prime = u_prime < fracp
    y = r + up
    yp = rp + up_prime

    diff = np.abs(y - yp)
    # Different bins: order the pair so that "hi" is the larger input.
    x_is_hi = x >= xp
    r_hi = np.where(x_is_hi, r, rp)
    r_lo = np.where(x_is_hi, rp, r)
    hi_up = np.where(x_is_hi, up, up_prime)
    lo_down = ~np.where(x_is_hi, up_prime, up)
    spread = r_hi - r_lo + 1 + hi_up.astype(np.int64) + lo_down.astype(np.int64)
    bound = np.where(same, diff, spread)

    return CoupledPair(
        y=y,
        y_prime=yp,
        l1_dist=diff.sum(axis=-1).astype(np.float64),
        l2_dist=np.sqrt((diff.astype(np.float64) ** 2).sum(axis=-1)),
        linf_dist=diff.max(axis=-1).astype(np.float64),
        coupling_bound=bound,
    )


def coupled_quantize_pair(x, x_prime, cfg: QuantizerConfig, rng: np.random.Generator) -> CoupledPair:
    """Single coupled draw; distances are scalars."""
    pair = sample_coupled_levels(x, x_prime, cfg, rng, trials=1)
    return CoupledPair(
        y=pair.y[0],
        y_prime=pair.y_prime[0],
        l1_dist=float(pair.l1_dist[0]),
        l2_dist=float(pair.l2_dist[0]),
        linf_dist=float(pair.linf_dist[0]),
        coupling_bound=pair.coupling_bound[0],
    )


@dataclass
class SensitivityCheckReport:
    trials: int
    delta: float
    violations: int
    violation_rate: float
    threshold: float
    passed: bool
    bounds: DistanceBounds
    max_l1: float
    max_l2: float
    max_linf: float

    def as_dict(self) -> dict:
        out = dict(vars(self))
        out["bounds"] = dict(vars(self.bounds))
        return out


MIN_CHECK_TRIALS = 1000


def empirical_sensitivity_check(
    x_n,
    x_n_prime,
    cfg: QuantizerConfig,
    delta: float,
    trials: int,
    rng: np.random.Generator,
    chunk: int = 20000,
) -> SensitivityCheckReport:
    """Monte Carlo check that coupled distances respect :func:`pairwise_bounds`.

    A trial is a violation when any of the three distances exceeds its
    bound. The check passes when the violation frequency is at most
    ``delta + 3 * sqrt(delta (1 - delta) / trials)``.
    """
    if trials < MIN_CHECK_TRIALS:
        raise ValueError(f"need at least {MIN_CHECK_TRIALS} trials, got {trials}")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    bounds = pairwise_bounds(x_n, x_n_prime, cfg, delta)
    violations = 0
    max_l1 = max_l2 = max_linf = 0.0
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        pair = sample_coupled_levels(x_n, x_n_prime, cfg, rng, size)
        bad = (pair.l1_dist > bounds.l1) | (pair.l2_dist > bounds.l2) | (pair.linf_dist > bounds.linf)
        violations += int(bad.sum())
        max_l1 = max(max_l1, float(pair.l1_dist.max()))
        max_l2 = max(max_l2, float(pair.l2_dist.max()))
        max_linf = max(max_linf, float(pair.linf_dist.max()))
        done += size
    rate = violations / trials
    threshold = delta + 3.0 * math.sqrt(delta * (1.0 - delta) / trials)
    return SensitivityCheckReport(
        trials=trials,
        delta=delta,
        violations=violations,
        violation_rate=rate,
        threshold=threshold,
        passed=rate <= threshold,
        bounds=bounds,
        max_l1=max_l1,
        max_l2=max_l2,
        max_linf=max_linf,
    )
