"""Acceptance suite.  Each test prints one PASS/FAIL line (collected again in
the terminal summary) and then asserts the same condition.  Tolerances and
time budgets are fixed here and must not be loosened."""

import itertools
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from branchmoments.estimator import FitConfig, LossContext, empirical_correlations, fit, free_param_names
from branchmoments.model import canonical_model, reference_truth
from branchmoments.moments import build_moment_set, latent_moments, observed_moments, oracle_suite
from branchmoments.simulator import STANDARD_SCHEDULE, SimConfig, mvhypergeom_sample, sample_reads, simulate_dataset, simulate_latent
from branchmoments.validation import cross_validate, placeholder_params

from fourtype_closed_forms import FORMULAS, parameter_grid
from test_moments import FOUR, four_params

ROOT = Path(__file__).resolve().parents[1]


def test_c1_oracle_equivalence(report):
    t0 = time.perf_counter()
    worst = oracle_suite("acf", n_draws=20, seed=0)
    dt = time.perf_counter() - t0
    err = max(worst.values())
    ok = err <= 1e-6 and dt < 30
    report("1 oracle equivalence", ok, f"max rel err {err:.2e} (<= 1e-6) per model {worst}, {dt:.1f}s (< 30s)")
    assert ok


def test_c2_fourtype_fixture(report):
    grid = parameter_grid()
    times = [1.0, 2.0, 5.0, 10.0]
    idx = {"1": 0, "2": 1, "3": 0, "4": 1}
    t0 = time.perf_counter()
    worst = 0.0
    for p in grid:
        _, U = build_moment_set(FOUR, four_params(p)).values(times)
        for (m, n, i), f in FORMULAS.items():
            ref = np.array([f(t, p) for t in times])
            got = U[idx[i], idx[m], idx[n]]
            worst = max(worst, float(np.max(np.abs(got - ref) / np.abs(ref))))
    dt = time.perf_counter() - t0
    ok = len(grid) >= 50 and worst <= 1e-9 and dt < 10
    report("2 four-type closed forms", ok, f"{len(grid)} grid points, max rel err {worst:.2e} (<= 1e-9), {dt:.2f}s (< 10s)")
    assert ok


def _z_scores(x, mean, cov):
    """|sample - model| / Monte Carlo SE for means, variances, covariances."""
    n = x.shape[0]
    xbar = x.mean(axis=0)
    z = list(np.abs(xbar - mean) / (x.std(axis=0, ddof=1) / np.sqrt(n)))
    d = x - xbar
    for m, k in itertools.combinations_with_replacement(range(x.shape[1]), 2):
        prod = d[:, m] * d[:, k]
        se = prod.std(ddof=1) / np.sqrt(n)
        z.append(abs(prod.sum() / (n - 1) - cov[m, k]) / se)
    return np.array(z)


def test_c3_monte_carlo(report):
    topo, p = reference_truth("a")
    times = (5.0, 10.0)
    b = np.array([10_000] * 3)
    t0 = time.perf_counter()
    X, _ = simulate_latent(topo, p, 200_000, times, seed=3)
    reads, B = sample_reads(X, b, seed=3)
    ms = build_moment_set(topo, p)
    zl, zo = [], []
    for j, t in enumerate(times):
        lm = latent_moments(ms, p.pi, t)
        om = observed_moments(lm, b, B[j])
        zl.append(_z_scores(X[:, j].astype(float), lm.mean, lm.cov))
        zo.append(_z_scores(reads[:, j].astype(float), om.mean, om.cov))
    dt = time.perf_counter() - t0
    zl, zo = np.max(zl), np.max(zo)
    ok = zl <= 4 and zo <= 4 and dt < 300
    report("3 Monte Carlo agreement", ok, f"max |z| latent {zl:.2f}, observed {zo:.2f} (<= 4), {dt:.0f}s (< 300s)")
    assert ok


def test_c4_recovery(report):
    topo, p = reference_truth("a")
    t0 = time.perf_counter()
    data = simulate_dataset(topo, p, SimConfig(2000, obs_times=STANDARD_SCHEDULE, seed=0, read_filter_threshold=0))
    res = fit(topo, data, FitConfig(n_restarts=50, seed=0), p)
    dt = time.perf_counter() - t0
    truth, est = p.as_dict(topo), res.theta_hat.as_dict(topo)
    rel = {k: abs(est[k] - truth[k]) / truth[k] for k in free_param_names(topo, p.fixed)}
    worst = max(rel, key=rel.get)
    ok = rel[worst] <= 0.25 and dt < 600
    detail = ", ".join(f"{k} {v:.1%}" for k, v in rel.items())
    report("4 recovery at desk scale", ok, f"rel errors {detail}; worst {worst} (<= 25%), {dt:.0f}s (< 600s)")
    assert ok


def test_c5_misspecification(report):
    topo, p = reference_truth("c")
    tb = canonical_model("b")
    t0 = time.perf_counter()
    data = simulate_dataset(topo, p, SimConfig(2000, seed=0, read_filter_threshold=0))
    cfg = FitConfig(n_restarts=8, seed=0)
    good = fit(topo, data, cfg, p).objective
    bad = fit(tb, data, cfg, placeholder_params(tb, p.mu_mat)).objective
    dt = time.perf_counter() - t0
    ok = bad >= 100 * good and dt < 900
    report("5 misspecification ordering", ok,
           f"loss (b) {bad:.4g} vs (c) {good:.4g}, ratio {bad / good:.0f} (>= 100), {dt:.0f}s (< 900s)")
    assert ok


def test_c6_cross_validation(report):
    topo, p = reference_truth("c")
    tb = canonical_model("b")
    models = {"b": (tb, placeholder_params(tb, p.mu_mat)), "c": (topo, p)}
    t0 = time.perf_counter()
    wins, means = 0, []
    for seed in range(5):
        data = simulate_dataset(topo, p, SimConfig(2000, seed=1000 + seed, read_filter_threshold=0))
        res = cross_validate(models, data, 5, FitConfig(n_restarts=4), seed)
        mb, mc = res["b"].mean_objective, res["c"].mean_objective
        wins += mc < mb
        means.append(f"{mc:.3g}/{mb:.3g}")
    dt = time.perf_counter() - t0
    ok = wins >= 4 and dt < 1800
    report("6 CV self-consistency", ok,
           f"(c) first in {wins}/5 seeds (>= 4); CV (c)/(b) {', '.join(means)}; {dt:.0f}s (< 1800s)")
    assert ok


def test_c7_sampler(report):
    pop, b, n = np.array([5, 3, 2]), 4, 100_000
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    draws = np.array([mvhypergeom_sample(pop, b, rng) for _ in range(n)])
    outcomes = [x for x in itertools.product(*(range(k + 1) for k in pop)) if sum(x) == b]
    pmf = stats.multivariate_hypergeom(pop, b).pmf(np.array(outcomes))
    index = {x: i for i, x in enumerate(outcomes)}
    observed = np.bincount([index[tuple(d)] for d in draws], minlength=len(outcomes))
    pval = stats.chisquare(observed, n * pmf).pvalue
    topo, prm = reference_truth("c")
    data = simulate_dataset(topo, prm, SimConfig(500, obs_times=(12.0, 36.0), seed=1, sample_sizes=(300,) * 5,
                                                 read_filter_threshold=0))
    col_ok = bool(np.all(data.reads.sum(axis=0) == np.array(data.b)[None, :]))
    dt = time.perf_counter() - t0
    ok = pval > 0.001 and col_ok and dt < 20
    report("7 sampler correctness", ok, f"chi-square p = {pval:.3g} (> 0.001), column sums exact: {col_ok}, {dt:.1f}s (< 20s)")
    assert ok


def _cli(args, threads):
    env = dict(os.environ, BRANCHMOMENTS_THREADS=str(threads))
    subprocess.run([sys.executable, "-m", "branchmoments", *args], check=True, env=env, capture_output=True)


def test_c8_determinism(tmp_path, report):
    model = str(ROOT / "models" / "model_a.json")
    runs = [("run1", 1), ("run2", 1), ("run3", 8)]
    for name, threads in runs:
        out = tmp_path / name
        _cli(["simulate", "--model", model, "--n", "400", "--times", "12,36,90", "--sample-size", "3000",
              "--seed", "11", "--out", str(out)], threads)
        _cli(["fit", "--model", model, "--reads", str(out / "reads.csv"), "--cbc", str(out / "cbc.csv"),
              "--restarts", "3", "--seed", "11", "--out", str(out / "fit")], threads)
    files = sorted(str(f.relative_to(tmp_path / "run1")) for f in (tmp_path / "run1").rglob("*") if f.is_file())
    same = all((tmp_path / r / f).read_bytes() == (tmp_path / "run1" / f).read_bytes()
               for r, _ in runs[1:] for f in files)
    ok = same and "fit/fit.json" in files
    report("8 determinism", ok, f"{len(files)} files byte-identical across 2 runs and threads 1/8: {same}")
    assert ok


def test_c9_scale_invariance(report):
    topo, p = reference_truth("c")
    data = simulate_dataset(topo, p, SimConfig(400, obs_times=(12.0, 36.0, 90.0), seed=5, sample_sizes=(2000,) * 5,
                                               read_filter_threshold=0))
    base = empirical_correlations(data)
    ctx = LossContext.from_data(topo, p, data)
    worst_psi = worst_loss = 0.0
    for m, c in itertools.product(range(topo.n_mat), (0.37, 7.0, 1234.5)):
        scale = np.ones(topo.n_mat)
        scale[m] = c
        scaled = data.with_reads(data.reads * scale)
        emp = empirical_correlations(scaled)
        worst_psi = max(worst_psi, float(np.max(np.abs(emp.psi_hat - base.psi_hat))))
        worst_loss = max(worst_loss, abs(ctx.with_empirical(emp).at(p) - ctx.at(p)))
    ok = worst_psi <= 1e-12 and worst_loss <= 1e-12
    report("9 scale invariance", ok, f"max change psi {worst_psi:.1e}, loss {worst_loss:.1e} (<= 1e-12)")
    assert ok
