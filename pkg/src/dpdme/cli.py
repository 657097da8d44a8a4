"""Command-line interface: ``dpdme <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 an analytic
condition failed, 3 an invariant check failed.

Every command accepts ``--config FILE`` with a JSON object whose keys are
the command's option names (dashes or underscores); flags given on the
command line override values from the file.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from dpdme import accountant, dme, sgd
from dpdme.accountant import BinomialSpec, PrivacyBudget
from dpdme.quantize import QuantizerConfig
from dpdme.sensitivity import MIN_CHECK_TRIALS, empirical_sensitivity_check

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONDITION = 2
EXIT_INVARIANT = 3

DME_COLUMNS = (
    "protocol",
    "n",
    "d",
    "D",
    "k",
    "m",
    "p",
    "rotate",
    "epsilon",
    "delta_total",
    "mse_empirical",
    "mse_bound",
    "bias_empirical",
    "comm_bits",
    "trials",
    "seed",
)
SWEEP_COLUMNS = ("mechanism", "scale", "epsilon_target", "epsilon", "N", "sigma", "error")

# Largest Binomial trial count the sweep will search.
SWEEP_MAX_TRIALS = 2**62
# z-score above which a coordinate's empirical bias counts as a violation.
BIAS_Z_LIMIT = 5.0


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse with exit status 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- argument types ----------------------------------------------------------


def probability(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return value


def positive_float(text: str) -> float:
    value = float(text)
    if not (math.isfinite(value) and value > 0):
        raise argparse.ArgumentTypeError(f"must be a positive number, got {text}")
    return value


def nonnegative_float(text: str) -> float:
    value = float(text)
    if not (math.isfinite(value) and value >= 0):
        raise argparse.ArgumentTypeError(f"must be a nonnegative number, got {text}")
    return value


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def nonnegative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be a nonnegative integer, got {text}")
    return value


def grid(text: str) -> list[float]:
    """``a,b,c`` or ``geom:start:stop:count``."""
    if text.startswith("geom:"):
        try:
            _, start, stop, count = text.split(":")
            values = np.geomspace(float(start), float(stop), int(count))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad geometric grid {text!r}: {exc}") from exc
        out = [float(v) for v in values]
    else:
        try:
            out = [float(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from exc
    if not out:
        raise argparse.ArgumentTypeError("grid must be non-empty")
    if not all(math.isfinite(v) and v > 0 for v in out):
        raise argparse.ArgumentTypeError("grid values must be positive")
    return out


# -- output helpers ----------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    return "" if value is None else str(value)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _json_default(value):
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    with open(out, "w", newline="") as fh:
        fh.write(text)


# -- accountant --------------------------------------------------------------


def cmd_accountant_gaussian(args) -> int:
    eps = accountant.gaussian_epsilon(args.delta2, args.sigma, args.delta)
    ok = accountant.gaussian_condition_holds(args.delta2, args.sigma, args.delta)
    record = {"mechanism": "gaussian", "epsilon": eps, "delta": args.delta, "conditions_ok": ok}
    if not ok:
        record["condition"] = "sigma >= Delta_2 sqrt(2 log(1.25/delta)) fails"
    _emit(_json_text(record), args.out)
    return EXIT_OK if ok else EXIT_CONDITION


def cmd_accountant_binomial(args) -> int:
    spec = BinomialSpec(trials=args.N, success_prob=args.p, scale=args.s)
    delta_1 = args.delta1 if args.delta1 is not None else math.sqrt(args.d) * args.delta2
    bounds = _Bounds(delta_1, args.delta2, args.delta_inf)
    report = accountant.binomial_epsilon(spec, bounds, args.d, args.delta)
    record = {
        "mechanism": "binomial",
        "epsilon": report.epsilon,
        "delta": args.delta,
        "term_gaussian_like": report.term_gaussian_like,
        "term_l2_l1": report.term_l2_l1,
        "term_linf": report.term_linf,
        "conditions_ok": report.conditions_ok,
        "conditions": [
            {"name": c.name, "required": c.required, "actual": c.actual, "ok": c.ok} for c in report.condition_details
        ],
    }
    _emit(_json_text(record), args.out)
    return EXIT_OK if report.conditions_ok else EXIT_CONDITION


def cmd_accountant_compose(args) -> int:
    composed = accountant.compose_rounds(PrivacyBudget(args.epsilon, args.delta), args.T, args.delta_slack)
    record = {
        "T": args.T,
        "basic": {"epsilon": composed.basic.epsilon, "delta": composed.basic.delta},
        "advanced": None
        if composed.advanced is None
        else {"epsilon": composed.advanced.epsilon, "delta": composed.advanced.delta},
    }
    _emit(_json_text(record), args.out)
    return EXIT_OK


@dataclass(frozen=True)
class _Bounds:
    delta_1: float
    delta_2: float
    delta_inf: float


# -- sweep -------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """A privacy/error sweep: one Gaussian row and one Binomial row per scale, per epsilon."""

    epsilons: tuple[float, ...]
    scales: tuple[float, ...]
    d: int
    delta: float
    delta_1: float
    delta_2: float
    delta_inf: float
    p: float = 0.5
    trials: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.epsilons:
            raise ValueError("epsilon grid must be non-empty")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


def smallest_binomial_trials(target_eps: float, spec: ExperimentSpec, scale: float) -> int | None:
    """Smallest ``N`` whose Binomial mechanism at ``scale`` meets ``target_eps`` (``None`` if above the cap)."""
    bounds = _Bounds(spec.delta_1, spec.delta_2, spec.delta_inf)

    def private(N: int) -> bool:
        report = accountant.binomial_epsilon(BinomialSpec(N, spec.p, scale), bounds, spec.d, spec.delta)
        return report.conditions_ok and report.epsilon <= target_eps

    hi = 1
    while not private(hi):
        if hi >= SWEEP_MAX_TRIALS:
            return None
        hi = min(2 * hi, SWEEP_MAX_TRIALS)
    lo = hi // 2 + 1 if hi > 1 else 1
    while lo < hi:
        mid = (lo + hi) // 2
        if private(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def sweep_rows(spec: ExperimentSpec) -> list[dict]:
    """Error at each target epsilon, sorted by (mechanism, scale, epsilon)."""
    rows = []
    root = math.sqrt(2.0 * math.log(1.25 / spec.delta))
    for eps in sorted(spec.epsilons):
        sigma = spec.delta_2 * root / eps
        rows.append(
            {
                "mechanism": "gaussian",
                "scale": None,
                "epsilon_target": eps,
                "epsilon": accountant.gaussian_epsilon(spec.delta_2, sigma, spec.delta),
                "N": None,
                "sigma": sigma,
                "error": accountant.gaussian_mechanism_error(spec.d, sigma),
            }
        )
    for scale in sorted(spec.scales, reverse=True):
        for eps in sorted(spec.epsilons):
            N = smallest_binomial_trials(eps, spec, scale)
            if N is None:
                rows.append(
                    {"mechanism": "binomial", "scale": scale, "epsilon_target": eps, "epsilon": math.inf,
                     "N": None, "sigma": math.inf, "error": math.inf}
                )
                continue
            bspec = BinomialSpec(N, spec.p, scale)
            bounds = _Bounds(spec.delta_1, spec.delta_2, spec.delta_inf)
            report = accountant.binomial_epsilon(bspec, bounds, spec.d, spec.delta)
            rows.append(
                {
                    "mechanism": "binomial",
                    "scale": scale,
                    "epsilon_target": eps,
                    "epsilon": report.epsilon,
                    "N": N,
                    "sigma": scale * math.sqrt(bspec.variance),
                    "error": accountant.binomial_mechanism_error(spec.d, bspec),
                }
            )
    return rows


def cmd_sweep(args) -> int:
    spec = ExperimentSpec(
        epsilons=tuple(args.eps),
        scales=tuple(args.scales or ()),
        d=args.d,
        delta=args.delta,
        delta_1=args.delta1 if args.delta1 is not None else math.sqrt(args.d) * args.delta2,
        delta_2=args.delta2,
        delta_inf=args.delta_inf,
        p=args.p,
        trials=args.trials,
        seed=args.seed,
    )
    _emit(_csv_text(SWEEP_COLUMNS, sweep_rows(spec)), args.out)
    return EXIT_OK


# -- dme ---------------------------------------------------------------------


def random_interior_inputs(n: int, d: int, D: float, rng: np.random.Generator, fill: float = 0.9) -> np.ndarray:
    """``n`` random vectors with norms uniform in ``[0, fill * D]``."""
    X = rng.normal(size=(n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X * (fill * D * rng.random(n))[:, None]


def _dme_record(args, eps, delta_total, errors, mean_err, bound, comm, k=None, m=None, p=None) -> dict:
    return {
        "protocol": args.protocol,
        "n": args.n,
        "d": args.d,
        "D": args.D,
        "k": k,
        "m": m,
        "p": p,
        "rotate": bool(args.rotate),
        "epsilon": eps,
        "delta_total": delta_total,
        "mse_empirical": float(errors.mean()),
        "mse_bound": bound,
        "bias_empirical": float(np.linalg.norm(mean_err)),
        "comm_bits": comm,
        "trials": args.trials,
        "seed": args.seed,
    }


def _dme_invariants(errors: np.ndarray, residuals: np.ndarray, bound: float, bias_allowance: float) -> list[str]:
    failures = []
    trials = errors.size
    se = float(errors.std(ddof=1)) / math.sqrt(trials) if trials > 1 else 0.0
    if errors.mean() - 4.0 * se > bound:
        failures.append(f"empirical MSE {errors.mean():.6g} exceeds bound {bound:.6g} by more than 4 SE")
    if trials >= 30:
        mean = residuals.mean(axis=0)
        coord_se = residuals.std(axis=0, ddof=1) / math.sqrt(trials)
        excess = np.abs(mean) - bias_allowance
        z = np.where(coord_se > 0, excess / np.where(coord_se > 0, coord_se, 1.0), np.where(excess > 1e-12, np.inf, 0.0))
        if np.max(z) > BIAS_Z_LIMIT:
            failures.append(f"bias z-score {np.max(z):.3g} exceeds {BIAS_Z_LIMIT}")
    return failures


def cmd_dme(args) -> int:
    rng = np.random.default_rng(args.seed)
    X = random_interior_inputs(args.n, args.d, args.D, rng)
    xbar = X.mean(axis=0)
    if args.protocol == "gaussian":
        if args.sigma is None:
            raise UsageError("--sigma is required for the gaussian protocol")
        estimates = np.stack([dme.gaussian_dme(X, args.sigma, rng) for _ in range(args.trials)])
        guarantee = accountant.gaussian_dme_epsilon(args.n, args.D, args.sigma, args.delta)
        bound = args.d * args.sigma**2 / args.n
        residuals = estimates - xbar
        errors = np.sum(residuals**2, axis=1)
        record = _dme_record(args, guarantee.epsilon, args.delta, errors, residuals.mean(axis=0), bound,
                             sgd.FLOAT_BITS * args.d * args.n)
        failures = _dme_invariants(errors, residuals, bound, 0.0)
    else:
        cfg = dme.DmeConfig(n=args.n, d=args.d, D=args.D, k=args.k, m=args.m, p=Fraction(args.p).limit_denominator(2**32 - 1),
                            delta=args.delta, rotate=bool(args.rotate), master_seed=args.seed)
        wire = dme.run_protocol(X, cfg)
        estimates = dme.simulate_estimates(X, cfg, args.trials, rng)
        residuals = estimates - xbar
        errors = np.sum(residuals**2, axis=1)
        privacy = dme.privacy_of_run(cfg)
        bound = dme.theoretical_mse_bound(cfg)
        record = _dme_record(args, privacy.epsilon, privacy.delta_total, errors, residuals.mean(axis=0), bound,
                             dme.comm_cost_bits(cfg), k=cfg.k, m=cfg.m, p=cfg.p)
        failures = _dme_invariants(errors, residuals, bound, dme.clipping_bias_bound(cfg) / math.sqrt(args.d))
        if wire.comm_bits_total != dme.comm_cost_bits(cfg):
            failures.append("wire bit count differs from comm_cost_bits")
    _emit(_csv_text(DME_COLUMNS, [record]), args.out)
    for failure in failures:
        print(f"invariant failed: {failure}", file=sys.stderr)
    return EXIT_INVARIANT if failures else EXIT_OK


# -- select ------------------------------------------------------------------


def cmd_select(args) -> int:
    target = PrivacyBudget(args.epsilon, args.delta)
    try:
        sel = dme.select_parameters(
            target, args.n, args.d, args.D, rotate=bool(args.rotate), match_gaussian_error=not args.ignore_error,
            max_log2_k=args.max_log2_k,
        )
    except dme.InfeasibleError as exc:
        record = {"feasible": False, "reason": str(exc), "gaussian_mse": exc.details["gaussian_mse"],
                  "candidates": exc.details["candidates"]}
        _emit(_json_text(record), args.out)
        return EXIT_CONDITION
    cfg = sel.config
    record = {
        "feasible": True,
        "k": cfg.k,
        "m": cfg.m,
        "p": cfg.p,
        "rotate": cfg.rotate,
        "delta_per_run": cfg.delta,
        "epsilon": sel.epsilon,
        "delta_total": sel.delta_total,
        "mse_bound": sel.mse_bound,
        "gaussian_mse": sel.gaussian_mse,
        "bits_per_coordinate": sel.bits_per_coordinate,
        "comm_bits": sel.comm_bits,
        "outside_regime": sel.outside_regime,
    }
    _emit(_json_text(record), args.out)
    return EXIT_OK


# -- validate ----------------------------------------------------------------


def _vector(text: str | None) -> np.ndarray | None:
    if text is None:
        return None
    if isinstance(text, list):
        return np.array(text, dtype=np.float64)
    return np.array([float(v) for v in str(text).split(",")], dtype=np.float64)


def cmd_validate(args) -> int:
    if args.trials < MIN_CHECK_TRIALS:
        raise UsageError(f"--trials must be at least {MIN_CHECK_TRIALS}")
    rng = np.random.default_rng(args.seed)
    cfg = QuantizerConfig(levels=args.k, xmax=args.xmax)
    x = _vector(args.x)
    x_prime = _vector(args.x_prime)
    if x is None:
        x = rng.uniform(-args.xmax, args.xmax, size=args.d)
    if x_prime is None:
        x_prime = x.copy() if args.same else rng.uniform(-args.xmax, args.xmax, size=x.size)
    if x.shape != x_prime.shape:
        raise UsageError("x and x' must have the same length")
    report = empirical_sensitivity_check(x, x_prime, cfg, args.delta, args.trials, rng)
    record = report.as_dict()
    record.update(x=x, x_prime=x_prime, k=args.k, xmax=args.xmax, seed=args.seed)
    _emit(_json_text(record), args.out)
    return EXIT_OK if report.passed else EXIT_INVARIANT


# -- sgd ---------------------------------------------------------------------


def _smallest_m_for_epsilon(base: dme.DmeConfig, eps: float) -> int:
    m = dme._smallest_private_m(base, eps, dme.MAX_WIRE_INT)
    if m is None:
        raise UsageError(f"no m <= 2^32-1 reaches per-round epsilon {eps} at k={base.k}")
    return m


def cmd_sgd(args) -> int:
    model = sgd.make_model(args.model, args.M, args.d, args.seed)
    data_rng = np.random.default_rng([args.seed, 1])
    direction = data_rng.normal(size=args.d)
    direction /= np.linalg.norm(direction)
    start = getattr(model, "minimizer", np.zeros(args.d))
    w0 = start + args.init_distance * direction

    n = args.n if args.n is not None else args.M
    base = dme.DmeConfig(n=n, d=args.d, D=args.D, k=args.k, m=args.m,
                         p=Fraction(args.p).limit_denominator(2**32 - 1), delta=args.delta, rotate=bool(args.rotate),
                         master_seed=args.seed)
    gaussian_sigma = args.sigma or 0.0
    if args.epsilon is not None:
        if args.protocol == "binomial":
            base = replace(base, m=_smallest_m_for_epsilon(base, args.epsilon))
        elif args.protocol == "gaussian":
            gaussian_sigma = accountant.gaussian_sigma_for_dme(n, args.D, args.epsilon, args.delta)
    cfg = sgd.TrainingConfig(
        rounds=args.rounds, clients_total=args.M, clients_per_round=n, learning_rate=args.lr or 0.0,
        clip_norm=args.D, dme=base, model=model, seed=args.seed, protocol=args.protocol,
        gaussian_sigma=gaussian_sigma, delta_slack=args.delta_slack, w0=w0,
    )
    if args.lr is None:
        gap = model.initial_gap(w0)
        if gap is None:
            raise UsageError("--lr is required for models without a closed-form initial gap")
        lr = sgd.prescribed_learning_rate(model.smoothness, gap, sgd.gradient_sigma_bound(cfg), args.rounds)
        cfg = replace(cfg, learning_rate=lr)

    result = sgd.run_training(cfg, runs=args.runs)
    rows = sgd.training_log_rows(result, args.delta_slack)
    _emit(_csv_text(sgd.LOG_COLUMNS, rows), args.out)

    rep = result.report
    summary = {
        "learning_rate": cfg.learning_rate,
        "m": cfg.dme.m if cfg.protocol == "binomial" else None,
        "gaussian_sigma": gaussian_sigma if cfg.protocol == "gaussian" else None,
        "round_epsilon": result.round_budget.epsilon if result.round_budget else None,
        "round_delta": result.round_budget.delta if result.round_budget else None,
        "mean_grad_norm_sq": rep.mean_grad_norm_sq,
        "sigma_sq": rep.sigma_sq,
        "bias_norm": rep.bias_norm,
        "bound": rep.bound,
        "clip_events": rep.clip_events,
    }
    if args.summary:
        _emit(_json_text(summary), args.summary)
    measured = [rep.mean_grad_norm_sq, rep.sigma_sq, rep.bias_norm, *rep.loss]
    if not all(math.isfinite(v) for v in measured):
        print("invariant failed: non-finite training statistics", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, trials_default: int = 1) -> None:
    p.add_argument("--seed", type=nonnegative_int, default=0)
    p.add_argument("--trials", type=positive_int, default=trials_default)
    p.add_argument("--out", default=None, help="output file (default: stdout)")
    p.add_argument("--config", default=None, help="JSON file of option values; flags override it")


def _sensitivity_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--delta2", type=nonnegative_float, default=1.0, help="l2 sensitivity")
    p.add_argument("--delta1", type=nonnegative_float, default=None, help="l1 sensitivity (default sqrt(d) * delta2)")
    p.add_argument("--delta-inf", type=nonnegative_float, default=1.0, help="l-inf sensitivity")


def build_parser() -> tuple[ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = ArgumentParser(prog="dpdme", description="Private distributed mean estimation toolkit.")
    commands = parser.add_subparsers(dest="command", required=True)
    leaves: dict[str, argparse.ArgumentParser] = {}

    acc = commands.add_parser("accountant", help="epsilon of a single mechanism or a composition")
    acc_kinds = acc.add_subparsers(dest="kind", required=True)

    g = acc_kinds.add_parser("gaussian", help="Gaussian mechanism")
    g.add_argument("--delta2", type=nonnegative_float, required=True)
    g.add_argument("--sigma", type=positive_float, required=True)
    g.add_argument("--delta", type=probability, required=True)
    _common(g)
    g.set_defaults(func=cmd_accountant_gaussian)
    leaves["accountant gaussian"] = g

    b = acc_kinds.add_parser("binomial", help="Binomial mechanism")
    b.add_argument("--N", type=positive_int, required=True)
    b.add_argument("--p", type=probability, default=0.5)
    b.add_argument("--s", type=positive_float, default=1.0)
    b.add_argument("--d", type=positive_int, required=True)
    b.add_argument("--delta", type=probability, required=True)
    _sensitivity_flags(b)
    _common(b)
    b.set_defaults(func=cmd_accountant_binomial)
    leaves["accountant binomial"] = b

    c = acc_kinds.add_parser("compose", help="basic and advanced composition over T rounds")
    c.add_argument("--epsilon", type=positive_float, required=True)
    c.add_argument("--delta", type=probability, required=True)
    c.add_argument("--T", type=positive_int, required=True)
    c.add_argument("--delta-slack", type=probability, default=None)
    _common(c)
    c.set_defaults(func=cmd_accountant_compose)
    leaves["accountant compose"] = c

    s = commands.add_parser("sweep", help="error vs epsilon for Gaussian and scaled Binomial mechanisms")
    s.add_argument("--eps", type=grid, required=True, help="epsilon grid: a,b,c or geom:start:stop:count")
    s.add_argument("--scales", type=grid, default=None, help="Binomial scales s (same grid syntax)")
    s.add_argument("--d", type=positive_int, default=1024)
    s.add_argument("--delta", type=probability, default=1e-6)
    s.add_argument("--p", type=probability, default=0.5)
    _sensitivity_flags(s)
    _common(s)
    s.set_defaults(func=cmd_sweep)
    leaves["sweep"] = s

    dm = commands.add_parser("dme", help="Monte Carlo run of one mean estimation protocol")
    dm.add_argument("--protocol", choices=("binomial", "gaussian"), default="binomial")
    dm.add_argument("--n", type=positive_int, default=10)
    dm.add_argument("--d", type=positive_int, default=64)
    dm.add_argument("--D", type=positive_float, default=1.0)
    dm.add_argument("--k", type=positive_int, default=4)
    dm.add_argument("--m", type=nonnegative_int, default=32)
    dm.add_argument("--p", type=probability, default=0.5)
    dm.add_argument("--delta", type=probability, default=1e-9)
    dm.add_argument("--rotate", action=argparse.BooleanOptionalAction, default=False)
    dm.add_argument("--sigma", type=positive_float, default=None, help="per-client sigma (gaussian protocol)")
    _common(dm, trials_default=1000)
    dm.set_defaults(func=cmd_dme)
    leaves["dme"] = dm

    se = commands.add_parser("select", help="cheapest (k, m) meeting a privacy target")
    se.add_argument("--epsilon", type=positive_float, required=True)
    se.add_argument("--delta", type=probability, required=True)
    se.add_argument("--n", type=positive_int, required=True)
    se.add_argument("--d", type=positive_int, required=True)
    se.add_argument("--D", type=positive_float, default=1.0)
    se.add_argument("--rotate", action=argparse.BooleanOptionalAction, default=True)
    se.add_argument("--ignore-error", action="store_true", help="drop the match-the-Gaussian-error constraint")
    se.add_argument("--max-log2-k", type=positive_int, default=31)
    _common(se)
    se.set_defaults(func=cmd_select)
    leaves["select"] = se

    v = commands.add_parser("validate", help="empirical check of the coupled quantization distance bounds")
    v.add_argument("--k", type=positive_int, default=8)
    v.add_argument("--d", type=positive_int, default=32)
    v.add_argument("--xmax", type=positive_float, default=1.0)
    v.add_argument("--delta", type=probability, default=0.05)
    v.add_argument("--x", default=None, help="comma-separated x (default: random)")
    v.add_argument("--x-prime", default=None, help="comma-separated x' (default: random)")
    v.add_argument("--same", action="store_true", help="use x' = x")
    _common(v, trials_default=10000)
    v.set_defaults(func=cmd_validate)
    leaves["validate"] = v

    t = commands.add_parser("sgd", help="distributed SGD with private gradient aggregation")
    t.add_argument("--model", choices=("quadratic", "logistic"), default="quadratic")
    t.add_argument("--protocol", choices=sgd.PROTOCOLS, default="binomial")
    t.add_argument("--M", type=positive_int, default=64, help="total clients")
    t.add_argument("--n", type=positive_int, default=None, help="clients per round (default: M)")
    t.add_argument("--d", type=positive_int, default=32)
    t.add_argument("--rounds", type=positive_int, default=100)
    t.add_argument("--lr", type=nonnegative_float, default=None, help="learning rate (default: prescribed)")
    t.add_argument("--D", type=positive_float, default=1.0, help="clip norm")
    t.add_argument("--k", type=positive_int, default=16)
    t.add_argument("--m", type=nonnegative_int, default=64, help="ignored when --epsilon is given")
    t.add_argument("--p", type=probability, default=0.5)
    t.add_argument("--delta", type=probability, default=1e-9)
    t.add_argument("--rotate", action=argparse.BooleanOptionalAction, default=False)
    t.add_argument("--sigma", type=positive_float, default=None, help="per-client sigma (gaussian protocol)")
    t.add_argument("--epsilon", type=positive_float, default=None, help="per-round epsilon target; sets m or sigma")
    t.add_argument("--delta-slack", type=probability, default=None)
    t.add_argument("--runs", type=positive_int, default=1)
    t.add_argument("--init-distance", type=nonnegative_float, default=0.5)
    t.add_argument("--summary", default=None, help="write a JSON run summary here")
    _common(t)
    t.set_defaults(func=cmd_sgd)
    leaves["sgd"] = t
    return parser, leaves


def _leaf_key(argv: list[str], leaves) -> str | None:
    words = [a for a in argv if not a.startswith("-")]
    for size in (2, 1):
        key = " ".join(words[:size])
        if key in leaves:
            return key
    return None


def _apply_config(argv: list[str], leaves) -> None:
    """Load ``--config`` into the chosen command's defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    key = _leaf_key(argv, leaves)
    if key is None:
        return
    try:
        with open(known.config) as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    leaf = leaves[key]
    actions = {a.dest: a for a in leaf._actions}
    defaults, problems = {}, []
    for raw_key, value in values.items():
        dest = raw_key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("config", "help"):
            problems.append(f"unknown option {raw_key!r} for {key}")
            continue
        if action.type is not None and value is not None and not isinstance(value, bool):
            try:
                value = action.type(str(value) if not isinstance(value, list) else ",".join(map(str, value)))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                problems.append(f"{raw_key}: {exc}")
                continue
        if action.choices is not None and value not in action.choices:
            problems.append(f"{raw_key}: {value!r} not in {list(action.choices)}")
            continue
        defaults[dest] = value
        action.required = False
    if problems:
        raise UsageError("invalid config: " + "; ".join(problems))
    leaf.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, leaves = build_parser()
    try:
        _apply_config(argv, leaves)
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"dpdme: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except (ValueError, dme.ProtocolError) as exc:
        print(f"dpdme: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"dpdme: I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
