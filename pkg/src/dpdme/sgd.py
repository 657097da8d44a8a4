"""Synchronous distributed SGD with private mean estimation of clipped gradients.

Each round samples ``n`` of ``M`` clients without replacement, clips their
local gradients to norm ``D``, aggregates them with the configured mean
estimation protocol and takes a step ``w <- w - lr * estimate``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from dpdme import dme
from dpdme._checks import require_finite, require_finite_array
from dpdme.accountant import ComposedBudget, PrivacyBudget, compose_rounds, gaussian_dme_epsilon

PROTOCOLS = ("binomial", "gaussian", "none")
FLOAT_BITS = 64

# Stream tags mixed into the training seed.
_SAMPLE_STREAM = 0x53414D
_DME_STREAM = 0x444D45
_GAUSS_STREAM = 0x474155

LOG_COLUMNS = (
    "round",
    "loss",
    "grad_norm_sq",
    "mse_round",
    "comm_bits_round",
    "epsilon_composed_basic",
    "epsilon_composed_advanced",
    "delta_total",
)


def clip_gradient(g, D: float) -> np.ndarray:
    """Scale ``g`` down to l2 norm ``D`` if it is longer; otherwise return it unchanged."""
    g = np.asarray(g, dtype=np.float64)
    require_finite_array("g", g)
    require_finite(D=D)
    if D <= 0:
        raise ValueError("D must be positive")
    norm = float(np.linalg.norm(g))
    if norm <= D:
        return g.copy()
    return g * (D / norm)


def clip_rows(G: np.ndarray, D: float) -> np.ndarray:
    """Row-wise :func:`clip_gradient`."""
    G = np.asarray(G, dtype=np.float64)
    require_finite_array("G", G)
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    scale = np.minimum(1.0, D / np.maximum(norms, np.finfo(float).tiny))
    return G * scale


# -- models ------------------------------------------------------------------


@dataclass
class QuadraticModel:
    """``f_i(w) = ||w - c_i||^2 / 2`` with ``F`` the mean over clients; ``L = 1``.

    Attributes:
        centers: ``(M, d)`` array of client centres.
    """

    centers: np.ndarray
    name: str = field(default="quadratic", init=False)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        require_finite_array("centers", self.centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def num_clients(self) -> int:
        return self.centers.shape[0]

    @property
    def smoothness(self) -> float:
        return 1.0

    @property
    def minimizer(self) -> np.ndarray:
        return self.centers.mean(axis=0)

    def loss(self, w) -> float:
        diff = np.asarray(w) - self.centers
        return 0.5 * float(np.mean(np.sum(diff * diff, axis=1)))

    def gradient(self, w) -> np.ndarray:
        return np.asarray(w, dtype=np.float64) - self.minimizer

    def client_gradients(self, w, clients) -> np.ndarray:
        return np.asarray(w, dtype=np.float64) - self.centers[clients]

    def initial_gap(self, w0) -> float:
        """``F(w0) - F*``, exact."""
        diff = np.asarray(w0) - self.minimizer
        return 0.5 * float(diff @ diff)


@dataclass
class LogisticModel:
    """Binary logistic regression, one labelled example per client.

    ``f_i(w) = log(1 + exp(-y_i a_i.w)) + reg/2 ||w||^2`` with ``y_i`` in
    ``{-1, +1}``. The smoothness constant is ``lambda_max(mean a a^T)/4 + reg``.
    """

    features: np.ndarray
    labels: np.ndarray
    reg: float = 0.0
    name: str = field(default="logistic", init=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        require_finite_array("features", self.features)
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_clients(self) -> int:
        return self.features.shape[0]

    @property
    def smoothness(self) -> float:
        A = self.features
        return float(np.linalg.eigvalsh(A.T @ A / A.shape[0])[-1]) / 4.0 + self.reg

    def loss(self, w) -> float:
        margins = self.labels * (self.features @ np.asarray(w))
        return float(np.mean(np.logaddexp(0.0, -margins))) + 0.5 * self.reg * float(np.dot(w, w))

    def client_gradients(self, w, clients) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        A = self.features[clients]
        y = self.labels[clients]
        # d/dm log(1 + e^{-m}) = -sigmoid(-m)
        coef = -y * _sigmoid(-y * (A @ w))
        return coef[:, None] * A + self.reg * w

    def gradient(self, w) -> np.ndarray:
        return self.client_gradients(w, np.arange(self.num_clients)).mean(axis=0)

    def initial_gap(self, w0) -> float | None:
        # F* has no closed form.
        return None


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def make_quadratic(M: int, d: int, rng: np.random.Generator, spread: float = 0.25) -> QuadraticModel:
    """Centres drawn uniformly from the ball of radius ``spread``."""
    directions = rng.normal(size=(M, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = spread * rng.random(M) ** (1.0 / d)
    return QuadraticModel(centers=directions * radii[:, None])


def make_logistic(M: int, d: int, rng: np.random.Generator, separation: float = 1.0, reg: float = 0.0) -> LogisticModel:
    """Two Gaussian clusters at ``+-mu`` with ``||mu|| = separation``, features scaled to norm <= 1."""
    labels = np.where(rng.random(M) < 0.5, -1.0, 1.0)
    mu = rng.normal(size=d)
    mu *= separation / np.linalg.norm(mu)
    feats = labels[:, None] * mu + rng.normal(size=(M, d))
    feats /= max(1.0, float(np.linalg.norm(feats, axis=1).max()))
    return LogisticModel(features=feats, labels=labels, reg=reg)


def make_model(name: str, M: int, d: int, seed: int):
    rng = np.random.default_rng(seed)
    if name == "quadratic":
        return make_quadratic(M, d, rng)
    if name == "logistic":
        return make_logistic(M, d, rng)
    raise ValueError(f"unknown model {name!r}; choose quadratic or logistic")


def gradient_oracle_check(model, w, step: float = 1e-5) -> float:
    """Largest coordinate gap between the analytic and central-difference gradient of ``F``.

    The gap is divided by ``max(||grad||_inf, 1e-8)``, so it is relative to
    the gradient's scale.
    """
    w = np.asarray(w, dtype=np.float64)
    analytic = model.gradient(w)
    numeric = np.empty_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = step
        numeric[j] = (model.loss(w + e) - model.loss(w - e)) / (2.0 * step)
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), 1e-8)
    return float(np.max(np.abs(numeric - analytic), initial=0.0)) / scale


def sampling_variance(model, w, n: int) -> float:
    """``E||mean of n sampled gradients - grad F||^2`` for uniform sampling without replacement."""
    M = model.num_clients
    if n >= M:
        return 0.0
    G = model.client_gradients(w, np.arange(M))
    spread = float(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1)))
    return spread * (M - n) / (n * (M - 1))


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainingConfig:
    """One distributed SGD run.

    ``dme`` fixes the per-round Binomial protocol (its ``n``, ``d`` and
    ``D`` must match this config); its ``master_seed`` is replaced every
    round by one derived from ``seed``. ``gaussian_sigma`` is the per-client
    noise of the Gaussian protocol.
    """

    rounds: int
    clients_total: int
    clients_per_round: int
    learning_rate: float
    clip_norm: float
    dme: dme.DmeConfig
    model: object
    seed: int = 0
    protocol: str = "binomial"
    gaussian_sigma: float = 0.0
    delta_slack: float | None = None
    w0: np.ndarray | None = None

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("invalid TrainingConfig: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.rounds < 1:
            out.append(f"rounds must be >= 1 (got {self.rounds})")
        if self.clients_per_round < 1 or self.clients_per_round > self.clients_total:
            out.append(f"need 1 <= clients_per_round <= clients_total (got {self.clients_per_round}, {self.clients_total})")
        if self.model.num_clients != self.clients_total:
            out.append(f"model has {self.model.num_clients} clients, config says {self.clients_total}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            out.append(f"learning_rate must be >= 0 (got {self.learning_rate})")
        if not (math.isfinite(self.clip_norm) and self.clip_norm > 0):
            out.append(f"clip_norm must be positive (got {self.clip_norm})")
        if self.dme.d != self.model.dim:
            out.append(f"dme.d = {self.dme.d} but model dimension is {self.model.dim}")
        if self.dme.D != self.clip_norm:
            out.append(f"dme.D = {self.dme.D} but clip_norm = {self.clip_norm}")
        if self.dme.n != self.clients_per_round:
            out.append(f"dme.n = {self.dme.n} but clients_per_round = {self.clients_per_round}")
        if self.protocol not in PROTOCOLS:
            out.append(f"protocol must be one of {PROTOCOLS} (got {self.protocol!r})")
        if self.protocol == "gaussian" and not self.gaussian_sigma > 0:
            out.append("gaussian protocol needs gaussian_sigma > 0")
        if self.delta_slack is not None and not 0 < self.delta_slack < 1:
            out.append(f"delta_slack must lie in (0, 1) (got {self.delta_slack})")
        if self.w0 is not None and np.shape(self.w0) != (self.model.dim,):
            out.append(f"w0 must have shape ({self.model.dim},)")
        return out

    def initial_point(self) -> np.ndarray:
        if self.w0 is None:
            return np.zeros(self.model.dim)
        return np.array(self.w0, dtype=np.float64)

    def round_privacy(self) -> PrivacyBudget | None:
        """Per-round ``(epsilon, delta)``; ``None`` when the round is not private."""
        if self.protocol == "binomial":
            run = dme.privacy_of_run(self.dme)
            if not run.conditions_ok:
                return None
            return PrivacyBudget(run.epsilon, run.delta_total)
        if self.protocol == "gaussian":
            guarantee = gaussian_dme_epsilon(self.clients_per_round, self.clip_norm, self.gaussian_sigma, self.dme.delta)
            return PrivacyBudget(guarantee.epsilon, self.dme.delta)
        return None


@dataclass
class RoundStats:
    round: int
    loss: float
    grad_norm_sq: float
    mse_round: float
    comm_bits_round: int
    clip_events: int
    # Exact gradient, mean of clipped sampled gradients, and protocol output.
    full_gradient: np.ndarray
    clipped_mean: np.ndarray
    estimate: np.ndarray


def _derived_seed(seed: int, stream: int, index: int) -> int:
    state = np.random.SeedSequence([seed, stream, index]).generate_state(1, np.uint64)
    return int(state[0])


def sgd_round(w, cfg: TrainingConfig, round_index: int) -> tuple[np.ndarray, RoundStats]:
    """One round: sample, clip, aggregate privately, step."""
    w = np.asarray(w, dtype=np.float64)
    model = cfg.model
    sampler = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SAMPLE_STREAM, round_index]))
    clients = np.sort(sampler.choice(cfg.clients_total, size=cfg.clients_per_round, replace=False))
    raw = model.client_gradients(w, clients)
    clipped = clip_rows(raw, cfg.clip_norm)
    clip_events = int(np.count_nonzero(np.linalg.norm(raw, axis=1) > cfg.clip_norm))
    clipped_mean = clipped.mean(axis=0)

    if cfg.protocol == "binomial":
        round_dme = replace(cfg.dme, master_seed=_derived_seed(cfg.seed, _DME_STREAM, round_index))
        result = dme.run_protocol(clipped, round_dme)
        estimate = result.estimate
        comm = result.comm_bits_total
    elif cfg.protocol == "gaussian":
        noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _GAUSS_STREAM, round_index]))
        estimate = dme.gaussian_dme(clipped, cfg.gaussian_sigma, noise_rng)
        comm = FLOAT_BITS * model.dim * cfg.clients_per_round
    else:
        estimate = clipped_mean
        comm = FLOAT_BITS * model.dim * cfg.clients_per_round

    full_grad = model.gradient(w)
    stats = RoundStats(
        round=round_index,
        loss=model.loss(w),
        grad_norm_sq=float(full_grad @ full_grad),
        mse_round=float(np.sum((estimate - clipped_mean) ** 2)),
        comm_bits_round=int(comm),
        clip_events=clip_events,
        full_gradient=full_grad,
        clipped_mean=clipped_mean,
        estimate=np.asarray(estimate, dtype=np.float64),
    )
    return w - cfg.learning_rate * stats.estimate, stats


def convergence_bound(L: float, D_F: float, sigma: float, T: int, D: float, B: float) -> float:
    """``2 D_F L / T + 2 sqrt(2) sigma sqrt(L D_F) / sqrt(T) + D B``."""
    return 2.0 * D_F * L / T + 2.0 * math.sqrt(2.0) * sigma * math.sqrt(L * D_F) / math.sqrt(T) + D * B


def prescribed_learning_rate(L: float, D_F: float, sigma: float, T: int) -> float:
    """``min(1/L, sqrt(2 D_F) / (sigma sqrt(L T)))``."""
    if sigma <= 0:
        return 1.0 / L
    return min(1.0 / L, math.sqrt(2.0 * D_F) / (sigma * math.sqrt(L * T)))


def gradient_sigma_bound(cfg: TrainingConfig, w=None) -> float:
    """A priori ``sigma``: ``2 * sampling variance + 2 * protocol error bound``, square-rooted.

    The sampling variance is evaluated at ``w`` (default: the initial
    point); it does not depend on ``w`` for the quadratic model.
    """
    w = cfg.initial_point() if w is None else w
    if cfg.protocol == "binomial":
        err = dme.theoretical_mse_bound(cfg.dme)
    elif cfg.protocol == "gaussian":
        err = cfg.model.dim * cfg.gaussian_sigma**2 / cfg.clients_per_round
    else:
        err = 0.0
    return math.sqrt(2.0 * sampling_variance(cfg.model, w, cfg.clients_per_round) + 2.0 * err)


@dataclass
class ConvergenceReport:
    """Trajectory averages over ``runs`` seeded replicas.

    ``sigma_sq`` and ``bias_norm`` are the empirical counterparts of the
    variance and bias terms of the convergence bound, with expectations
    replaced by averages over runs. ``bound`` is ``None`` unless the model
    provides exact ``L`` and ``D_F``.
    """

    runs: int
    rounds: int
    loss: np.ndarray
    grad_norm_sq: np.ndarray
    sigma_sq: float
    bias_norm: float
    mean_grad_norm_sq: float
    run_mean_grad_norm_sq: np.ndarray
    smoothness: float | None
    initial_gap: float | None
    clip_norm: float
    clip_events: int
    bound: float | None
    bound_without_bias: float | None

    @property
    def confidence_interval(self) -> tuple[float, float]:
        """Normal-approximation 95% interval for ``mean_grad_norm_sq`` across runs."""
        vals = self.run_mean_grad_norm_sq
        if vals.size < 2:
            return (self.mean_grad_norm_sq, self.mean_grad_norm_sq)
        half = 1.96 * float(vals.std(ddof=1)) / math.sqrt(vals.size)
        return (self.mean_grad_norm_sq - half, self.mean_grad_norm_sq + half)


@dataclass
class TrainingResult:
    report: ConvergenceReport
    budget: ComposedBudget | None
    history: list[RoundStats]
    w_final: np.ndarray
    round_budget: PrivacyBudget | None


def _single_run(cfg: TrainingConfig) -> tuple[list[RoundStats], np.ndarray]:
    w = cfg.initial_point()
    history = []
    for t in range(cfg.rounds):
        w, stats = sgd_round(w, cfg, t)
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"iterate diverged at round {t}")
        history.append(stats)
    return history, w


def run_training(cfg: TrainingConfig, runs: int = 1) -> TrainingResult:
    """Train ``runs`` replicas (seeds ``cfg.seed``, ``cfg.seed + 1``, ...) and measure convergence.

    The gradient-norm average is over the ``T`` iterates at which gradients
    were taken (``w^0 .. w^{T-1}``). The returned history and final iterate
    belong to the first replica.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    histories = []
    w_final = None
    for r in range(runs):
        hist, w = _single_run(replace(cfg, seed=cfg.seed + r))
        histories.append(hist)
        if r == 0:
            w_final = w

    T = cfg.rounds
    loss = np.array([[s.loss for s in h] for h in histories])
    gns = np.array([[s.grad_norm_sq for s in h] for h in histories])
    sampling_err = np.array([[np.sum((s.clipped_mean - s.full_gradient) ** 2) for s in h] for h in histories])
    quant_err = np.array([[np.sum((s.clipped_mean - s.estimate) ** 2) for s in h] for h in histories])
    bias = np.array([[s.clipped_mean - s.estimate for s in h] for h in histories])
    sigma_sq = 2.0 * float(sampling_err.mean(axis=0).max()) + 2.0 * float(quant_err.mean(axis=0).max())
    bias_norm = float(np.linalg.norm(bias.mean(axis=0), axis=1).max())
    run_means = gns.mean(axis=1)

    model = cfg.model
    L = model.smoothness
    D_F = model.initial_gap(cfg.initial_point())
    bound = bound0 = None
    if D_F is not None:
        sigma = math.sqrt(sigma_sq)
        bound = convergence_bound(L, D_F, sigma, T, cfg.clip_norm, bias_norm)
        bound0 = convergence_bound(L, D_F, sigma, T, cfg.clip_norm, 0.0)

    report = ConvergenceReport(
        runs=runs,
        rounds=T,
        loss=loss.mean(axis=0),
        grad_norm_sq=gns.mean(axis=0),
        sigma_sq=sigma_sq,
        bias_norm=bias_norm,
        mean_grad_norm_sq=float(run_means.mean()),
        run_mean_grad_norm_sq=run_means,
        smoothness=L,
        initial_gap=D_F,
        clip_norm=cfg.clip_norm,
        clip_events=int(sum(s.clip_events for h in histories for s in h)),
        bound=bound,
        bound_without_bias=bound0,
    )
    per_round = cfg.round_privacy()
    budget = compose_rounds(per_round, T, cfg.delta_slack) if per_round is not None else None
    return TrainingResult(report=report, budget=budget, history=histories[0], w_final=w_final, round_budget=per_round)


def training_log_rows(result: TrainingResult, delta_slack: float | None) -> list[dict]:
    """Rows of the training log, with the privacy spent after each round.

    ``delta_total`` pairs with the advanced-composition epsilon (it includes
    ``delta_slack``); without slack it is the basic-composition delta.
    Unprivate runs report ``inf`` epsilons and ``nan`` delta.
    """
    rows = []
    per_round = result.round_budget
    for stats in result.history:
        t = stats.round + 1
        if per_round is None:
            basic, advanced, delta_total = math.inf, math.inf, math.nan
        else:
            composed = compose_rounds(per_round, t, delta_slack)
            basic = composed.basic.epsilon
            advanced = composed.advanced.epsilon if composed.advanced else math.nan
            delta_total = composed.advanced.delta if composed.advanced else composed.basic.delta
        rows.append(
            {
                "round": stats.round,
                "loss": stats.loss,
                "grad_norm_sq": stats.grad_norm_sq,
                "mse_round": stats.mse_round,
                "comm_bits_round": stats.comm_bits_round,
                "epsilon_composed_basic": basic,
                "epsilon_composed_advanced": advanced,
                "delta_total": delta_total,
            }
        )
    return rows


def write_training_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
