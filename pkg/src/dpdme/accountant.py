"""Privacy and error accounting for the Gaussian and Binomial mechanisms.

Every function here is pure. Natural logarithms are used throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from dpdme._checks import require_finite


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        require_finite(epsilon=self.epsilon, delta=self.delta)
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class GaussianSpec:
    sigma: float

    def __post_init__(self):
        require_finite(sigma=self.sigma)
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class BinomialSpec:
    """Noise ``(Z - N p) * s`` with ``Z ~ Bin(N, p)`` per coordinate."""

    trials: int
    success_prob: float
    scale: float = 1.0

    def __post_init__(self):
        require_finite(success_prob=self.success_prob, scale=self.scale)
        if int(self.trials) != self.trials or self.trials < 1:
            raise ValueError(f"trials must be a positive integer, got {self.trials}")
        if not 0 < self.success_prob < 1:
            raise ValueError(f"success_prob must lie in (0, 1), got {self.success_prob}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def variance(self) -> float:
        """Variance of ``Z`` (unscaled)."""
        p = self.success_prob
        return self.trials * p * (1.0 - p)


@dataclass(frozen=True)
class BinomialConstants:
    b_p: float
    c_p: float
    d_p: float


@dataclass(frozen=True)
class ConditionCheck:
    name: str
    required: float
    actual: float

    @property
    def ok(self) -> bool:
        return self.actual >= self.required


@dataclass
class EpsilonReport:
    epsilon: float
    term_gaussian_like: float
    term_l2_l1: float
    term_linf: float
    conditions_ok: bool
    condition_details: list[ConditionCheck] = field(default_factory=list)

    def failed_conditions(self) -> list[ConditionCheck]:
        return [c for c in self.condition_details if not c.ok]


def gaussian_epsilon(delta_2: float, sigma: float, delta: float) -> float:
    """Epsilon of the Gaussian mechanism with l2 sensitivity ``delta_2``.

    The classical guarantee only applies when
    ``sigma >= delta_2 * sqrt(2 log(1.25/delta))``; use
    :func:`gaussian_condition_holds` to check it. The value is returned
    either way.
    """
    require_finite(delta_2=delta_2, sigma=sigma, delta=delta)
    if delta_2 < 0:
        raise ValueError("delta_2 must be nonnegative")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    _check_delta(delta)
    return delta_2 / sigma * math.sqrt(2.0 * math.log(1.25 / delta))


def gaussian_condition_holds(delta_2: float, sigma: float, delta: float) -> bool:
    return sigma >= delta_2 * math.sqrt(2.0 * math.log(1.25 / delta))


def gaussian_mechanism_error(d: int, sigma: float) -> float:
    """Expected squared l2 error ``d * sigma**2``."""
    return d * sigma * sigma


@dataclass(frozen=True)
class GaussianDmeGuarantee:
    epsilon: float
    mse_per_d: float
    condition_ok: bool

    def mse(self, d: int) -> float:
        return d * self.mse_per_d


def gaussian_dme_epsilon(n: int, D: float, sigma: float, delta: float) -> GaussianDmeGuarantee:
    """Guarantee of the client-side Gaussian DME baseline.

    Changing one of ``n`` client vectors (each of norm at most ``D``) moves
    the mean by at most ``2D/n``; the averaged noise has standard deviation
    ``sigma / sqrt(n)``.
    """
    require_finite(D=D, sigma=sigma, delta=delta)
    if n < 1:
        raise ValueError("n must be a positive integer")
    if D < 0 or sigma <= 0:
        raise ValueError("D must be nonnegative and sigma positive")
    _check_delta(delta)
    root = math.sqrt(2.0 * math.log(1.25 / delta))
    eps = 2.0 * D / (math.sqrt(n) * sigma) * root
    ok = sigma >= 2.0 * D / math.sqrt(n) * root
    return GaussianDmeGuarantee(epsilon=eps, mse_per_d=sigma * sigma / n, condition_ok=ok)


def gaussian_sigma_for_dme(n: int, D: float, epsilon: float, delta: float) -> float:
    """Smallest per-client sigma for which the Gaussian DME baseline is (epsilon, delta)-DP."""
    _check_delta(delta)
    return 2.0 * D / (math.sqrt(n) * epsilon) * math.sqrt(2.0 * math.log(1.25 / delta))


def binomial_constants(p: float) -> BinomialConstants:
    # The bounds are symmetric in p <-> 1-p and derived for p <= 1/2.
    require_finite(p=p)
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    p = min(p, 1.0 - p)
    q = 1.0 - p
    sq = p * p + q * q
    b_p = 2.0 * sq / 3.0 + (1.0 - 2.0 * p)
    c_p = math.sqrt(2.0) * (3.0 * p**3 + 3.0 * q**3 + 2.0 * sq)
    d_p = 4.0 / 3.0 * sq
    return BinomialConstants(b_p=b_p, c_p=c_p, d_p=d_p)


# Lower bound on N p (1-p) required by the tail bound behind the second and third terms.
MIN_BINOMIAL_VARIANCE = 39.0


def binomial_conditions(spec: BinomialSpec, delta_inf: float, d: int, delta: float) -> list[ConditionCheck]:
    v = spec.variance
    return [
        ConditionCheck("Np(1-p) >= 23 log(10d/delta)", 23.0 * math.log(10.0 * d / delta), v),
        ConditionCheck("Np(1-p) >= 2 Delta_inf / s", 2.0 * delta_inf / spec.scale, v),
        ConditionCheck("Np(1-p) >= 39", MIN_BINOMIAL_VARIANCE, v),
    ]


def binomial_epsilon(spec: BinomialSpec, bounds, d: int, delta: float) -> EpsilonReport:
    """Epsilon of the d-dimensional Binomial mechanism.

    Args:
        spec: noise parameters ``(N, p, s)``.
        bounds: any object with ``delta_1``, ``delta_2`` and ``delta_inf``
            attributes (normally :class:`dpdme.sensitivity.SensitivityBounds`).
        d: dimension of the released vector.
        delta: target delta.

    Returns:
        An :class:`EpsilonReport`. When a precondition fails the report has
        ``conditions_ok=False`` and ``epsilon`` set to ``inf``; the three
        terms are still filled in for inspection.
    """
    _check_delta(delta)
    if d < 1:
        raise ValueError("d must be a positive integer")
    d1, d2, dinf = float(bounds.delta_1), float(bounds.delta_2), float(bounds.delta_inf)
    require_finite(delta_1=d1, delta_2=d2, delta_inf=dinf)

    p = min(spec.success_prob, 1.0 - spec.success_prob)
    s = spec.scale
    var = spec.trials * p * (1.0 - p)
    consts = binomial_constants(p)

    term1 = d2 * math.sqrt(2.0 * math.log(1.25 / delta)) / (s * math.sqrt(var))
    term2 = (d2 * consts.c_p * math.sqrt(math.log(10.0 / delta)) + d1 * consts.b_p) / (
        s * var * (1.0 - delta / 10.0)
    )
    term3 = (
        2.0 / 3.0 * dinf * math.log(1.25 / delta)
        + dinf * consts.d_p * math.log(20.0 * d / delta) * math.log(10.0 / delta)
    ) / (s * var)

    checks = binomial_conditions(spec, dinf, d, delta)
    ok = all(c.ok for c in checks)
    eps = term1 + term2 + term3 if ok else math.inf
    return EpsilonReport(
        epsilon=eps,
        term_gaussian_like=term1,
        term_l2_l1=term2,
        term_linf=term3,
        conditions_ok=ok,
        condition_details=checks,
    )


def binomial_mechanism_error(d: int, spec: BinomialSpec) -> float:
    """Expected squared l2 error ``d * s**2 * N p (1-p)``."""
    return d * spec.scale**2 * spec.variance


@dataclass(frozen=True)
class ComposedBudget:
    basic: PrivacyBudget
    advanced: PrivacyBudget | None

    @property
    def best(self) -> PrivacyBudget:
        if self.advanced is None or self.basic.epsilon <= self.advanced.epsilon:
            return self.basic
        return self.advanced


def compose_rounds(per_round: PrivacyBudget, T: int, delta_slack: float | None = None) -> ComposedBudget:
    """Compose ``T`` adaptive runs of an (epsilon, delta) mechanism.

    Returns basic composition ``(T eps, T delta)`` and, when ``delta_slack``
    is given, the advanced composition bound
    ``eps' = sqrt(2 T log(1/delta_slack)) eps + T eps (e^eps - 1)`` with
    ``delta' = T delta + delta_slack``.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    eps, delta = per_round.epsilon, per_round.delta
    # PrivacyBudget rejects a composed delta >= 1: no guarantee remains.
    basic = PrivacyBudget(T * eps, T * delta)
    advanced = None
    if delta_slack is not None:
        require_finite(delta_slack=delta_slack)
        if not 0 < delta_slack < 1:
            raise ValueError(f"delta_slack must lie in (0, 1), got {delta_slack}")
        adv_eps = math.sqrt(2.0 * T * math.log(1.0 / delta_slack)) * eps + T * eps * math.expm1(eps)
        advanced = PrivacyBudget(adv_eps, T * delta + delta_slack)
    return ComposedBudget(basic=basic, advanced=advanced)


def _check_delta(delta: float) -> None:
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
