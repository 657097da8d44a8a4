"""Private distributed mean estimation protocols.

Three protocols are provided:

* ``gaussian``: every client adds N(0, sigma^2 I) to its vector and sends reals.
* ``binomial``: clients clip to ``[-xmax, xmax]``, stochastically quantize to
  ``k`` levels, add ``Bin(m, p)`` noise to each level and send the integers.
  The server averages and subtracts the known noise mean.
* ``binomial`` with ``rotate=True``: as above after a shared random Hadamard
  rotation; the server rotates the average back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from dpdme import accountant
from dpdme.accountant import BinomialSpec, EpsilonReport, PrivacyBudget
from dpdme.quantize import (
    HEADER_BITS,
    MessageHeader,
    QuantizerConfig,
    add_binomial_noise,
    as_fraction,
    bits_per_symbol,
    clip_coordinates,
    decode_message,
    encode_message,
    payload_bytes,
    stochastic_quantize,
)
from dpdme.sensitivity import sensitivity_bounds
from dpdme.transform import (
    GENERATOR_PCG64,
    RotationSeed,
    inverse_rotate,
    inverse_rotate_with_signs,
    next_power_of_two,
    rotate,
    rotate_with_signs,
    xmax_bound,
)

# Stream tags mixed into the master seed.
_ROTATION_STREAM = 0x524F54
_CLIENT_STREAM = 0x434C49

NORM_TOLERANCE = 1e-9
MAX_WIRE_INT = 2**32 - 1


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class DmeConfig:
    n: int
    d: int
    D: float
    k: int
    m: int
    p: Fraction = Fraction(1, 2)
    delta: float = 1e-9
    rotate: bool = False
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "p", as_fraction(self.p))
        problems = self.violations()
        if problems:
            raise ValueError("invalid DmeConfig: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.n < 1:
            out.append(f"n must be >= 1 (got {self.n})")
        if self.d < 1:
            out.append(f"d must be >= 1 (got {self.d})")
        if not (math.isfinite(self.D) and self.D > 0):
            out.append(f"D must be positive (got {self.D})")
        if not 2 <= self.k <= MAX_WIRE_INT:
            out.append(f"k must be in [2, 2^32) (got {self.k})")
        if not 0 <= self.m <= MAX_WIRE_INT:
            out.append(f"m must be in [0, 2^32) (got {self.m})")
        if not 0 < self.delta < 1:
            out.append(f"delta must be in (0, 1) (got {self.delta})")
        if not 0 <= self.master_seed < 2**64:
            out.append("master_seed must be a 64-bit unsigned integer")
        return out

    @property
    def padded_dim(self) -> int:
        return next_power_of_two(self.d)

    @property
    def coding_dim(self) -> int:
        """Number of coordinates each client transmits."""
        return self.padded_dim if self.rotate else self.d

    @property
    def xmax(self) -> float:
        if self.rotate:
            return xmax_bound(self.D, self.n, self.padded_dim, self.delta)
        return self.D

    @property
    def quantizer(self) -> QuantizerConfig:
        return QuantizerConfig(levels=self.k, xmax=self.xmax)

    @property
    def rotation_seed(self) -> RotationSeed | None:
        if not self.rotate:
            return None
        state = np.random.SeedSequence([self.master_seed, _ROTATION_STREAM]).generate_state(1, np.uint64)
        return RotationSeed(seed=int(state[0]), dim=self.d, generator=GENERATOR_PCG64)

    @property
    def header(self) -> MessageHeader:
        seed = self.rotation_seed
        return MessageHeader(
            d=self.d,
            k=self.k,
            m=self.m,
            p=self.p,
            xmax=self.xmax,
            rotate=self.rotate,
            generator=seed.generator if seed else 0,
            rotation_seed=seed.seed if seed else 0,
        )

    def client_rng(self, client_index: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.master_seed, _CLIENT_STREAM, client_index]))


@dataclass
class ClientMessage:
    """Wire bytes plus the number of clipped coordinates (kept locally, not sent)."""

    data: bytes
    clip_events: int = 0


def client_encode(x, cfg: DmeConfig, client_index: int) -> ClientMessage:
    """Rotate (optionally), clip, quantize, noise and pack one client's vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.d,):
        raise ValueError(f"client vector must have shape ({cfg.d},), got {x.shape}")
    norm = float(np.linalg.norm(x))
    if not math.isfinite(norm) or norm > cfg.D * (1.0 + NORM_TOLERANCE):
        raise ValueError(f"client vector norm {norm} exceeds D = {cfg.D}")
    if cfg.rotate:
        x = rotate(x, cfg.rotation_seed).values
    rng = cfg.client_rng(client_index)
    quantizer = cfg.quantizer
    _, clipped = clip_coordinates(x, quantizer)
    levels = stochastic_quantize(x, quantizer, rng)
    noised = add_binomial_noise(levels, cfg.m, cfg.p, rng)
    return ClientMessage(data=encode_message(noised, cfg.header), clip_events=clipped)


@dataclass
class PrivacyOfRun:
    report: EpsilonReport
    delta: float
    delta_multiplier: int

    @property
    def epsilon(self) -> float:
        return self.report.epsilon

    @property
    def delta_total(self) -> float:
        return self.delta_multiplier * self.delta

    @property
    def conditions_ok(self) -> bool:
        return self.report.conditions_ok


@dataclass
class DmeResult:
    estimate: np.ndarray
    comm_bits_total: int
    clip_events: int
    epsilon_report: EpsilonReport
    mse_bound: float
    delta_multiplier: int
    delta_total: float = field(default=0.0)


def debiased_mean(totals: np.ndarray, cfg: DmeConfig) -> np.ndarray:
    """Mean estimate in the coding basis from per-coordinate sums of received symbols.

    Implements ``(1/n) sum_i (-xmax + w v_i) - w m p`` with ``w`` the grid
    spacing. The centring ``sum_i v_i - n m p`` is done in exact integer
    arithmetic (``p`` is rational), so the result is independent of the
    order in which messages were summed.
    """
    num, den = cfg.p.numerator, cfg.p.denominator
    offset = cfg.n * cfg.m * num
    totals = np.asarray(totals)
    if cfg.n * (cfg.k + cfg.m) * den < 2**62:
        centred = totals.astype(np.int64) * den - offset
    else:
        centred = np.array([int(t) * den - offset for t in totals.reshape(-1)], dtype=object).reshape(totals.shape)
    spacing = cfg.quantizer.spacing
    return -cfg.xmax + spacing * (centred.astype(np.float64) / (den * cfg.n))


def server_aggregate(messages, cfg: DmeConfig) -> DmeResult:
    """Decode, validate and average ``n`` client messages."""
    if len(messages) != cfg.n:
        raise ProtocolError(f"expected {cfg.n} messages, got {len(messages)}")
    expected = cfg.header
    totals = np.zeros(cfg.coding_dim, dtype=np.int64)
    bits = 0
    clip_events = 0
    for index, msg in enumerate(messages):
        data = msg.data if isinstance(msg, ClientMessage) else bytes(msg)
        clip_events += msg.clip_events if isinstance(msg, ClientMessage) else 0
        values, header = decode_message(data)
        if header != expected:
            raise ProtocolError(f"message {index} header {header} does not match configuration {expected}")
        totals += values
        bits += 8 * len(data)
    estimate = debiased_mean(totals, cfg)
    if cfg.rotate:
        estimate = inverse_rotate(estimate, cfg.rotation_seed)
    privacy = privacy_of_run(cfg)
    return DmeResult(
        estimate=estimate,
        comm_bits_total=bits,
        clip_events=clip_events,
        epsilon_report=privacy.report,
        mse_bound=theoretical_mse_bound(cfg),
        delta_multiplier=privacy.delta_multiplier,
        delta_total=privacy.delta_total,
    )


def run_protocol(X, cfg: DmeConfig) -> DmeResult:
    """Encode every row of ``X`` as a client and aggregate."""
    X = np.asarray(X, dtype=np.float64)
    messages = [client_encode(X[i], cfg, i) for i in range(cfg.n)]
    return server_aggregate(messages, cfg)


def theoretical_mse_bound(cfg: DmeConfig) -> float:
    """Upper bound on ``E||estimate - mean||^2``.

    Without rotation (``xmax = D``)::

        d D^2 / (n (k-1)^2) + (d/n) 4 m p (1-p) D^2 / (k-1)^2

    With rotation, ``xmax^2 = 4 D^2 L / d'`` where ``L = log(2 n d' / delta)``.
    Substituting into the per-coordinate variances ``w^2/4`` (rounding) and
    ``w^2 m p (1-p)`` (noise), ``w = 2 xmax / (k-1)``, gives::

        4 L D^2 / (n (k-1)^2) + 16 L m p (1-p) D^2 / (n (k-1)^2) + 4 D^2 delta

    The last term covers rotations that force clipping (probability at most
    ``delta``, squared bias at most ``4 D^2``).
    """
    p = float(cfg.p)
    pq = p * (1.0 - p)
    D2 = cfg.D**2
    k1 = (cfg.k - 1) ** 2
    if not cfg.rotate:
        return cfg.d * D2 / (cfg.n * k1) + cfg.d / cfg.n * 4.0 * cfg.m * pq * D2 / k1
    log_term = math.log(2.0 * cfg.n * cfg.padded_dim / cfg.delta)
    return (
        4.0 * log_term * D2 / (cfg.n * k1)
        + 16.0 * log_term * cfg.m * pq * D2 / (cfg.n * k1)
        + 4.0 * D2 * cfg.delta
    )


def clipping_bias_bound(cfg: DmeConfig) -> float:
    """Bound on ``||E[estimate] - mean||``: zero without rotation, ``2 D delta`` with it."""
    return 2.0 * cfg.D * cfg.delta if cfg.rotate else 0.0


def privacy_of_run(cfg: DmeConfig) -> PrivacyOfRun:
    """Epsilon of one protocol run against the aggregate noise ``Bin(m n, p)``.

    The accountant works in grid steps: ``s = 1`` and the sensitivities are
    step counts. The run is ``(epsilon, 2 delta)``-DP without rotation and
    ``(epsilon, 3 delta)``-DP with it.
    """
    multiplier = 3 if cfg.rotate else 2
    bounds = sensitivity_bounds(cfg.D, cfg.xmax, cfg.k, cfg.coding_dim, cfg.delta)
    if cfg.m == 0:
        report = EpsilonReport(
            epsilon=math.inf,
            term_gaussian_like=math.inf,
            term_l2_l1=math.inf,
            term_linf=math.inf,
            conditions_ok=False,
            condition_details=[accountant.ConditionCheck("m >= 1", 1.0, 0.0)],
        )
        return PrivacyOfRun(report=report, delta=cfg.delta, delta_multiplier=multiplier)
    spec = BinomialSpec(trials=cfg.m * cfg.n, success_prob=float(cfg.p), scale=1.0)
    report = accountant.binomial_epsilon(spec, bounds, cfg.coding_dim, cfg.delta)
    return PrivacyOfRun(report=report, delta=cfg.delta, delta_multiplier=multiplier)


def comm_cost_bits(cfg: DmeConfig) -> int:
    """Total bits sent by all clients, headers included."""
    return cfg.n * (8 * payload_bytes(cfg.coding_dim, cfg.k, cfg.m) + HEADER_BITS)


def gaussian_dme(X, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Average of ``X_i + Z_i`` with ``Z_i ~ N(0, sigma^2 I)``."""
    X = np.asarray(X, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    noise = rng.normal(0.0, sigma, size=X.shape) if sigma > 0 else 0.0
    return (X + noise).mean(axis=0)


# -- batched simulation ------------------------------------------------------


def simulate_estimates(X, cfg: DmeConfig, trials: int, rng: np.random.Generator, chunk: int = 4096) -> np.ndarray:
    """Vectorized Monte Carlo of the Binomial protocol; returns ``(trials, d)`` estimates.

    Draws the same distributions as :func:`run_protocol` (a fresh rotation
    per trial when ``cfg.rotate``) but skips serialization, so it is suited
    to large trial counts. Estimates go through :func:`debiased_mean`.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (cfg.n, cfg.d):
        raise ValueError(f"X must have shape ({cfg.n}, {cfg.d})")
    quantizer = cfg.quantizer
    out = np.empty((trials, cfg.d))
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        if cfg.rotate:
            signs = 1.0 - 2.0 * rng.integers(0, 2, size=(size, 1, cfg.padded_dim))
            data = rotate_with_signs(np.broadcast_to(X, (size, cfg.n, cfg.d)), signs)
        else:
            data = np.broadcast_to(X, (size, cfg.n, cfg.d))
        levels = stochastic_quantize(data, quantizer, rng)
        noised = add_binomial_noise(levels, cfg.m, cfg.p, rng)
        est = debiased_mean(noised.sum(axis=1), cfg)
        if cfg.rotate:
            est = inverse_rotate_with_signs(est, signs[:, 0, :], cfg.d)
        out[done : done + size] = est
        done += size
    return out


# -- parameter selection -----------------------------------------------------


class InfeasibleError(RuntimeError):
    def __init__(self, message: str, details: dict):
        super().__init__(message)
        self.details = details


@dataclass
class Selection:
    config: DmeConfig
    epsilon: float
    delta_total: float
    mse_bound: float
    gaussian_mse: float
    bits_per_coordinate: int
    comm_bits: int
    candidates: list[dict]
    # The accuracy guarantee this search targets is stated for epsilon <= 1.
    outside_regime: bool = False


def _smallest_private_m(base: DmeConfig, target_eps: float, m_max: int) -> int | None:
    def private(m: int) -> bool:
        report = privacy_of_run(replace(base, m=m)).report
        return report.conditions_ok and report.epsilon <= target_eps

    if not private(m_max):
        return None
    lo, hi = 1, m_max
    while lo < hi:
        mid = (lo + hi) // 2
        if private(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def select_parameters(
    target: PrivacyBudget,
    n: int,
    d: int,
    D: float,
    *,
    rotate: bool = True,
    p: Fraction = Fraction(1, 2),
    match_gaussian_error: bool = True,
    max_log2_k: int = 31,
    m_max: int = MAX_WIRE_INT,
    master_seed: int = 0,
) -> Selection:
    """Cheapest ``(k, m)`` whose run is ``target``-private and, optionally, no less accurate than Gaussian.

    The per-run delta is ``target.delta`` divided by the protocol's delta
    multiplier, so the returned configuration's total delta equals
    ``target.delta``. ``k`` ranges over powers of two; for each ``k`` the
    smallest private ``m`` is found by bisection (epsilon decreases in
    ``m``, while the error bound increases). The Gaussian reference error
    is that of the client-side Gaussian baseline at the same
    ``(epsilon, delta)``.

    Raises:
        InfeasibleError: when no candidate satisfies the constraints.
    """
    multiplier = 3 if rotate else 2
    delta_run = target.delta / multiplier
    sigma = accountant.gaussian_sigma_for_dme(n, D, target.epsilon, target.delta)
    gaussian_mse = d * sigma**2 / n
    candidates = []
    best = None
    for log2_k in range(1, max_log2_k + 1):
        k = 2**log2_k
        if best is not None and log2_k >= best.bits_per_coordinate:
            break
        base = DmeConfig(n=n, d=d, D=D, k=k, m=1, p=p, delta=delta_run, rotate=rotate, master_seed=master_seed)
        m = _smallest_private_m(base, target.epsilon, m_max)
        row = {"k": k, "m": m, "feasible": False}
        candidates.append(row)
        if m is None:
            continue
        cfg = replace(base, m=m)
        mse = theoretical_mse_bound(cfg)
        row.update(mse_bound=mse, bits=bits_per_symbol(k, m))
        if match_gaussian_error and mse > gaussian_mse:
            continue
        row["feasible"] = True
        bits = bits_per_symbol(k, m)
        if best is None or bits < best.bits_per_coordinate or (
            bits == best.bits_per_coordinate and mse < best.mse_bound
        ):
            privacy = privacy_of_run(cfg)
            best = Selection(
                config=cfg,
                epsilon=privacy.epsilon,
                delta_total=privacy.delta_total,
                mse_bound=mse,
                gaussian_mse=gaussian_mse,
                bits_per_coordinate=bits,
                comm_bits=comm_cost_bits(cfg),
                candidates=candidates,
                outside_regime=target.epsilon > 1.0,
            )
    if best is None:
        raise InfeasibleError(
            f"no (k, m) with k <= 2^{max_log2_k}, m <= {m_max} meets the target",
            {"target": target, "gaussian_mse": gaussian_mse, "candidates": candidates},
        )
    return best
