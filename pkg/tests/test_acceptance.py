"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the "acceptance criteria" section of the terminal summary.
"""

import math
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from dpdme import accountant, dme, sgd
from dpdme.accountant import BinomialSpec, PrivacyBudget
from dpdme.cli import main
from dpdme.quantize import (
    HEADER_BYTES,
    MessageHeader,
    QuantizerConfig,
    add_binomial_noise,
    bin_position,
    bits_per_symbol,
    decode_message,
    encode_message,
)
from dpdme.sensitivity import SensitivityBounds, empirical_sensitivity_check, sample_coupled_levels
from dpdme.transform import GENERATOR_PCG64, RotationSeed, inverse_rotate, rotate, rotate_with_signs, xmax_bound


def interior_inputs(n, d, rng, D=1.0):
    X = rng.normal(size=(n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X * (0.9 * D * rng.random(n))[:, None]


def unit_rows(n, d, rng):
    X = rng.normal(size=(n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


# n=10, d=64, D=1, k=4, m=32, p=1/2, no rotation; shared by criteria 3 and 4.
DME_CFG = dme.DmeConfig(n=10, d=64, D=1.0, k=4, m=32)


@pytest.fixture(scope="module")
def dme_estimates():
    rng = np.random.default_rng(20240)
    X = interior_inputs(DME_CFG.n, DME_CFG.d, rng)
    start = time.perf_counter()
    est = dme.simulate_estimates(X, DME_CFG, 100_000, rng)
    return X, est, time.perf_counter() - start


def test_binomial_approaches_gaussian(criterion):
    start = time.perf_counter()
    d, delta, sigma = 1024, 1e-6, 8.0
    bounds = SensitivityBounds(delta_1=math.sqrt(d), delta_2=1.0, delta_inf=1.0, holds_with_delta=0.0)
    gauss = accountant.gaussian_epsilon(1.0, sigma, delta)
    ratios = []
    for c in (1, 4, 16):
        s = sigma / (c * math.sqrt(d))
        N = round((sigma / s) ** 2 / 0.25)
        report = accountant.binomial_epsilon(BinomialSpec(N, 0.5, s), bounds, d, delta)
        assert report.conditions_ok
        ratios.append(report.epsilon / gauss)
    elapsed = time.perf_counter() - start
    ok = ratios[0] > ratios[1] > ratios[2] and ratios[2] <= 1.10 and elapsed < 1.0
    criterion(1, ok, f"ratios {', '.join(f'{r:.5f}' for r in ratios)} (need last <= 1.10), {elapsed:.3f}s")


def test_accountant_constants(criterion):
    c = accountant.binomial_constants(Fraction(1, 2))
    exact = math.sqrt(2) * 7 / 4
    ok = (
        c.b_p == pytest.approx(1 / 3, abs=1e-15)
        and c.d_p == pytest.approx(2 / 3, abs=1e-15)
        and c.c_p == pytest.approx(exact, rel=1e-15)
        # Known difference: the closed form is not the rounded value 5/2.
        and abs(c.c_p - 2.5) > 1e-3
    )
    criterion(2, ok, f"b={c.b_p!r} d={c.d_p!r} c={c.c_p!r} (7*sqrt(2)/4, differs from 2.5 by {2.5 - c.c_p:.5f})")


def test_dme_unbiased(criterion, dme_estimates):
    X, est, elapsed = dme_estimates
    target = X.mean(axis=0)
    se = est.std(axis=0, ddof=1) / math.sqrt(est.shape[0])
    z = np.abs(est.mean(axis=0) - target) / se
    ok = bool(np.all(z <= 4.0)) and elapsed < 30
    criterion(3, ok, f"max |z| over {DME_CFG.d} coordinates = {z.max():.3f} (need <= 4), {elapsed:.1f}s")


def test_dme_mse_bound(criterion, dme_estimates):
    X, est, elapsed = dme_estimates
    mse = float(np.mean(np.sum((est - X.mean(axis=0)) ** 2, axis=1)))
    bound = dme.theoretical_mse_bound(DME_CFG)
    cfg = DME_CFG
    noise_term = cfg.d / cfg.n * 4 * cfg.m * 0.25 * cfg.D**2 / (cfg.k - 1) ** 2
    ok = 0.5 * noise_term <= mse <= bound and elapsed < 30
    criterion(4, ok, f"empirical MSE {mse:.4f} in [{0.5 * noise_term:.4f}, {bound:.4f}], {elapsed:.1f}s")


def test_aggregate_noise_law(criterion):
    rng = np.random.default_rng(5)
    n, m, p, trials = 10, 32, 0.5, 100_000
    total = add_binomial_noise(np.zeros((trials, n), dtype=np.int64), m, p, rng).sum(axis=1)
    mean_z = abs(total.mean() - n * m * p) / (total.std(ddof=1) / math.sqrt(trials))
    var_rel = abs(total.var(ddof=1) / (n * m * p * (1 - p)) - 1)

    # Exact law for n=2, m=2 by convolving the two client pmfs.
    client = np.array([math.comb(2, j) for j in range(3)]) / 4
    conv = np.convolve(client, client)
    target = np.array([math.comb(4, j) for j in range(5)]) / 16
    exact_tv = 0.5 * np.abs(conv - target).sum()
    draws = add_binomial_noise(np.zeros((1_000_000, 2), dtype=np.int64), 2, 0.5, rng).sum(axis=1)
    sample_tv = 0.5 * np.abs(np.bincount(draws, minlength=5) / draws.size - target).sum()
    ok = mean_z <= 4 and var_rel <= 0.05 and exact_tv <= 1e-15 and sample_tv <= 0.01
    criterion(5, ok, f"mean z {mean_z:.3f}, variance off by {100 * var_rel:.2f}%, "
                     f"convolution TV {exact_tv:.1e}, sampled TV {sample_tv:.5f}")


def test_rotation_concentration(criterion):
    start = time.perf_counter()
    d, n, delta, seeds = 256, 8, 0.05, 10_000
    rng = np.random.default_rng(6)
    X = unit_rows(n, d, rng)
    bound = xmax_bound(1.0, n, d, delta)
    violations = 0
    for chunk in range(0, seeds, 1000):
        signs = 1.0 - 2.0 * rng.integers(0, 2, size=(1000, 1, d))
        rotated = rotate_with_signs(np.broadcast_to(X, (1000, n, d)), signs)
        violations += int(np.sum(np.abs(rotated).max(axis=(1, 2)) > bound))
    rate = violations / seeds
    limit = delta + 3 * math.sqrt(delta * (1 - delta) / seeds)

    worst = 0.0
    for log_d in range(0, 17):
        dim = 2**log_d
        for offset in (0, -1) if dim > 2 else (0,):
            size = dim + offset
            seed = RotationSeed(seed=1000 + size, dim=size)
            x = rng.normal(size=size)
            worst = max(worst, float(np.max(np.abs(inverse_rotate(rotate(x, seed), seed) - x))))
    elapsed = time.perf_counter() - start
    ok = rate <= limit and worst <= 1e-9 and elapsed < 60
    criterion(6, ok, f"violation rate {rate:.4f} (limit {limit:.4f}), round-trip error {worst:.1e} up to d=2^16, {elapsed:.1f}s")


def test_wire_format(criterion):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(100_000):
        d = int(rng.integers(1, 17))
        k = int(rng.integers(2, 2**int(rng.integers(1, 32)) + 1))
        m = int(rng.integers(0, 2**int(rng.integers(0, 32)) + 1)) % 2**32
        rotate_on = bool(rng.integers(0, 2))
        h = MessageHeader(
            d=d, k=k, m=m, p=Fraction(int(rng.integers(1, 100)), 100), xmax=float(rng.uniform(0.01, 10)),
            rotate=rotate_on, generator=GENERATOR_PCG64 if rotate_on else 0,
            rotation_seed=int(rng.integers(0, 2**63)) if rotate_on else 0,
        )
        values = rng.integers(0, h.max_symbol + 1, size=h.coordinate_count, dtype=np.int64)
        decoded, h2 = decode_message(encode_message(values, h))
        mismatches += int(h2 != h or not np.array_equal(decoded, values))

    pairs = [(4, 60), (2, 0), (2, 1), (2, 2), (3, 5), (4, 4), (8, 8), (16, 16), (16, 17), (5, 100), (64, 64),
             (100, 1000), (256, 0), (2, 1022), (1024, 1024), (3, 2**20), (2**16, 2**16), (7, 9), (1000, 24), (2**31, 2**31)]
    # d = 8 makes every payload a whole number of bytes, so no padding bits are counted.
    n, d = 3, 8
    wrong = []
    for k, m in pairs:
        h = MessageHeader(d=d, k=k, m=m, p=Fraction(1, 2), xmax=1.0)
        per_client = [encode_message(rng.integers(0, k + m, size=d, dtype=np.int64), h) for _ in range(n)]
        payload_bits = sum(8 * (len(msg) - HEADER_BYTES) for msg in per_client)
        if payload_bits != n * d * math.ceil(math.log2(k + m)):
            wrong.append((k, m))
    ok = mismatches == 0 and not wrong and bits_per_symbol(4, 60) == 6
    criterion(7, ok, f"{mismatches} round-trip mismatches in 1e5 messages; bit counts wrong for {wrong or 'no'} (k, m) pairs; "
                     f"(4, 60) -> {bits_per_symbol(4, 60)} bits")


def _exact_vector_law(x, cfg):
    """Exact pmf of the quantized vector as a dict keyed by level tuples."""
    r, frac = bin_position(np.clip(x, -cfg.xmax, cfg.xmax), cfg)
    law = {(): 1.0}
    for rj, fj in zip(r, frac):
        nxt = {}
        for key, prob in law.items():
            for level, pl in ((int(rj), 1 - fj), (int(rj) + 1, fj)):
                if pl > 0:
                    nxt[key + (level,)] = nxt.get(key + (level,), 0.0) + prob * pl
        law = nxt
    return law


def _tv_to_law(samples, law, k):
    codes = np.ravel_multi_index(samples.T, (k,) * samples.shape[1])
    counts = np.bincount(codes, minlength=k ** samples.shape[1]) / samples.shape[0]
    exact = np.zeros_like(counts)
    for key, prob in law.items():
        exact[np.ravel_multi_index(key, (k,) * len(key))] += prob
    return 0.5 * np.abs(counts - exact).sum()


def test_coupling_validity(criterion):
    rng = np.random.default_rng(8)
    cfg = QuantizerConfig(3, 1.0)
    worst_tv = 0.0
    for _ in range(10):
        x, xp = rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4)
        pair = sample_coupled_levels(x, xp, cfg, rng, 1_000_000)
        worst_tv = max(worst_tv, _tv_to_law(pair.y, _exact_vector_law(x, cfg), 3),
                       _tv_to_law(pair.y_prime, _exact_vector_law(xp, cfg), 3))

    trials = 1_000_000
    same_bin = sample_coupled_levels(np.array([0.5]), np.array([0.3]), QuantizerConfig(2, 1.0), rng, trials)
    rate = float(np.mean(same_bin.l1_dist == 1))
    rate_z = abs(rate - 0.10) / math.sqrt(0.1 * 0.9 / trials)

    delta = 0.05
    X = interior_inputs(2, 32, rng)
    report = empirical_sensitivity_check(X[0], X[1], QuantizerConfig(8, 1.0), delta, 100_000, rng)
    ok = worst_tv <= 0.005 and rate_z <= 3 and report.passed
    criterion(8, ok, f"max marginal TV {worst_tv:.5f}, P(|y-y'|=1) = {rate:.5f} (z {rate_z:.2f}), "
                     f"distance-bound violation rate {report.violation_rate:.5f} (limit {report.threshold:.5f})")


def test_parameter_selection(criterion):
    start = time.perf_counter()
    target = PrivacyBudget(1.0, 1e-9)
    try:
        sel = dme.select_parameters(target, 1024, 1024, 1.0)
    except dme.InfeasibleError as err:
        elapsed = time.perf_counter() - start
        rows = [r for r in err.details.get("candidates", []) if r.get("mse_bound") is not None]
        closest = min(rows, key=lambda r: r["mse_bound"]) if rows else None
        detail = f"infeasible after {elapsed:.1f}s: {err}"
        if closest:
            detail += (f"; closest k={closest['k']} m={closest['m']} MSE bound {closest['mse_bound']:.4f} "
                       f"vs Gaussian {err.details.get('gaussian_mse', float('nan')):.4f}")
        criterion(9, False, detail)
        return
    elapsed = time.perf_counter() - start
    privacy = dme.privacy_of_run(sel.config)
    ok = privacy.epsilon <= 1.0 and sel.mse_bound <= sel.gaussian_mse and sel.bits_per_coordinate <= 16 and elapsed < 300
    criterion(9, ok, f"k={sel.config.k} m={sel.config.m} eps={privacy.epsilon:.4f} MSE bound {sel.mse_bound:.4f} "
                     f"vs Gaussian {sel.gaussian_mse:.4f}, {sel.bits_per_coordinate} bits, {elapsed:.1f}s")


def test_sgd_convergence(criterion):
    start = time.perf_counter()
    M, d, T = 64, 32, 200
    rng = np.random.default_rng(1)
    model = sgd.make_quadratic(M, d, rng)
    u = rng.normal(size=d)
    w0 = model.minimizer + 0.5 * u / np.linalg.norm(u)
    base = sgd.TrainingConfig(
        rounds=T, clients_total=M, clients_per_round=M, learning_rate=0.1, clip_norm=1.0,
        dme=dme.DmeConfig(n=M, d=d, D=1.0, k=16, m=64), model=model, seed=0, delta_slack=1e-6, w0=w0,
    )
    sigma = sgd.gradient_sigma_bound(base)
    gamma = sgd.prescribed_learning_rate(model.smoothness, model.initial_gap(w0), sigma, T)
    report = sgd.run_training(replace(base, learning_rate=gamma), runs=30).report
    elapsed = time.perf_counter() - start
    ok = report.mean_grad_norm_sq <= report.bound and elapsed < 300
    criterion(10, ok, f"mean E||grad F||^2 {report.mean_grad_norm_sq:.5f} <= bound {report.bound:.5f} "
                      f"(sigma^2 {report.sigma_sq:.4f}, B {report.bias_norm:.4f}, gamma {gamma:.4f}), {elapsed:.1f}s")


CLI_COMMANDS = [
    ["accountant", "gaussian", "--delta2", "1", "--sigma", "20", "--delta", "1e-6"],
    ["accountant", "binomial", "--N", "100000", "--d", "16", "--delta", "1e-6"],
    ["accountant", "compose", "--epsilon", "0.1", "--delta", "1e-9", "--T", "50", "--delta-slack", "1e-6"],
    ["sweep", "--eps", "0.5,1", "--scales", "geom:0.5:0.05:3", "--d", "64"],
    ["dme", "--n", "6", "--d", "20", "--k", "8", "--m", "16", "--rotate", "--trials", "200"],
    ["dme", "--protocol", "gaussian", "--sigma", "0.5", "--n", "6", "--d", "20", "--trials", "200"],
    ["select", "--epsilon", "2", "--delta", "1e-6", "--n", "64", "--d", "16", "--max-log2-k", "6"],
    ["validate", "--d", "16", "--k", "8", "--trials", "5000"],
    ["sgd", "--rounds", "5", "--epsilon", "2", "--delta-slack", "1e-6"],
]


def test_cli_determinism(criterion, tmp_path):
    differing = []
    for i, argv in enumerate(CLI_COMMANDS):
        outputs = []
        for rep in range(2):
            out = tmp_path / f"{i}_{rep}.out"
            extra = ["--summary", str(tmp_path / f"{i}_{rep}.json")] if argv[0] == "sgd" else []
            main(argv + ["--seed", "11", "--out", str(out)] + extra)
            blob = out.read_bytes() + (b"|" + (tmp_path / f"{i}_{rep}.json").read_bytes() if extra else b"")
            outputs.append(blob)
        if not outputs[0] or outputs[0] != outputs[1]:
            differing.append(" ".join(argv[:2]))
    ok = not differing
    criterion(11, ok, f"{len(CLI_COMMANDS) - len(differing)}/{len(CLI_COMMANDS)} commands byte-identical on re-run"
                      + (f"; differing: {differing}" if differing else ""))
