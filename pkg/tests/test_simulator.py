import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from branchmoments.model import Params, make_topology, reference_truth
from branchmoments.moments import build_moment_set, latent_moments
from branchmoments.simulator import (
    STANDARD_SCHEDULE,
    SimConfig,
    SimulationError,
    lineage_keys,
    mvhypergeom_sample,
    read_filter,
    simulate_dataset,
    simulate_latent,
    simulate_lineage,
    simulate_lineages,
)

ONE = make_topology({"a": ["1"]})


def test_pure_death_absorbs():
    p = Params(0.0, [0.0], [0.3], [0.0], [0.2], [0.0, 1.0])
    X = simulate_lineage(ONE, p, "a", [1.0, 50.0, 100.0], rng=3)
    assert np.all(X[-2:] == 0)


def test_exponential_survival():
    topo = make_topology({"a": ["1"]})
    # a progenitor that only dies reproduces a single exponential lifetime
    p = Params(0.0, [0.0], [0.24], [0.0], [0.1], [0.0, 1.0])
    n = 100_000
    counts, _ = simulate_lineages(topo, p, np.ones(n, dtype=np.int64), [5.0], seed=11)
    frac = counts[:, 0, 1].mean()
    se = math.sqrt(math.exp(-1.2) * (1 - math.exp(-1.2)) / n)
    assert abs(frac - math.exp(-1.2)) < 3 * se


MONTH = 365.25 / 12 / 5  # model time runs in 5-day units


def test_totals_stable_after_engraftment():
    topo, p = reference_truth("a")
    X, _ = simulate_latent(topo, p, 20_000, [4 * MONTH, 24 * MONTH], seed=2)
    tot = X.sum(axis=0)
    ratio = tot[1] / tot[0]
    assert np.all((ratio > 0.5) & (ratio < 1.5)), ratio


def test_hypergeom_trivial_cases(rng):
    x = np.array([4, 0, 7])
    np.testing.assert_array_equal(mvhypergeom_sample(x, 11, rng), x)
    np.testing.assert_array_equal(mvhypergeom_sample(x, 0, rng), 0)
    with pytest.raises(ValueError):
        mvhypergeom_sample(x, 12, rng)


def test_hypergeom_moments(rng):
    draws = np.array([mvhypergeom_sample([50, 50], 30, rng)[0] for _ in range(200_000)])
    var = 30 * 0.25 * 70 / 99
    assert abs(draws.mean() - 15) < 4 * math.sqrt(var / draws.size)
    # standard error of a sample variance is about var * sqrt(2 / n)
    assert abs(draws.var() - var) < 4 * var * math.sqrt(2 / draws.size)


def test_hypergeom_chi_square(rng):
    from itertools import product

    x, b = np.array([5, 3, 2]), 4
    outcomes = [k for k in product(range(6), range(4), range(3)) if sum(k) == b]
    pmf = np.array([math.prod(math.comb(int(n), int(k)) for n, k in zip(x, o)) for o in outcomes]) / math.comb(10, 4)
    index = {o: i for i, o in enumerate(outcomes)}
    counts = np.zeros(len(outcomes))
    for _ in range(100_000):
        counts[index[tuple(int(v) for v in mvhypergeom_sample(x, b, rng))]] += 1
    assert stats.chisquare(counts, pmf * counts.sum()).pvalue > 0.001


@given(st.lists(st.integers(0, 40), min_size=1, max_size=8), st.data())
def test_hypergeom_bounds(x, data):
    x = np.array(x)
    b = data.draw(st.integers(0, int(x.sum())))
    y = mvhypergeom_sample(x, b, np.random.default_rng(b))
    assert y.sum() == b and np.all(y >= 0) and np.all(y <= x)


def test_column_sums_equal_sample_size():
    topo, p = reference_truth("a")
    data = simulate_dataset(topo, p, SimConfig(400, obs_times=(6.0, 12.0), seed=5, read_filter_threshold=0))
    np.testing.assert_array_equal(data.reads.sum(axis=0), np.broadcast_to(data.b, (2, 3)))


def test_dataset_deterministic():
    topo, p = reference_truth("c")
    cfg = SimConfig(300, obs_times=(12.0, 36.0), seed=9, sample_sizes=(200,) * 5, read_filter_threshold=0)
    a, b = simulate_dataset(topo, p, cfg), simulate_dataset(topo, p, cfg)
    np.testing.assert_array_equal(a.reads, b.reads)
    np.testing.assert_array_equal(a.B, b.B)


def test_cbc_is_latent_total():
    topo, p = reference_truth("a")
    times = (6.0, 12.0)
    X, _ = simulate_latent(topo, p, 500, times, seed=4)
    data = simulate_dataset(topo, p, SimConfig(500, obs_times=times, seed=4, read_filter_threshold=0))
    np.testing.assert_array_equal(data.B, X.sum(axis=0))


def test_sample_too_large_names_cell():
    topo, p = reference_truth("a")
    with pytest.raises(ValueError, match="type index"):
        simulate_dataset(topo, p, SimConfig(5, obs_times=(1.0,), seed=1, sample_sizes=(10**9,) * 3))


def test_pcr_scaling_rounds_half_even():
    topo, p = reference_truth("a")
    base = SimConfig(200, obs_times=(10.0,), seed=3, sample_sizes=(500,) * 3, read_filter_threshold=0)
    pcr = np.array([[2.5, 1.0, 0.5]])
    plain = simulate_dataset(topo, p, base)
    amp = simulate_dataset(topo, p, SimConfig(200, obs_times=(10.0,), seed=3, sample_sizes=(500,) * 3, read_filter_threshold=0, pcr=pcr))
    np.testing.assert_array_equal(amp.reads, np.rint(plain.reads * pcr[None]))


def test_read_filter_modes():
    reads = np.zeros((3, 2, 2), dtype=np.int64)
    reads[0, 1, 0] = 1000
    reads[1, 0] = [600, 600]
    assert read_filter(reads, 1000, "max").tolist() == [True, False, False]
    assert read_filter(reads, 1000, "sum").tolist() == [True, True, False]
    assert read_filter(reads, 0).all()


def test_lineage_streams_order_independent():
    topo, p = reference_truth("a")
    init = np.ones(40, dtype=np.int64)
    full, _ = simulate_lineages(topo, p, init, [5.0, 10.0], seed=8)
    tail, _ = simulate_lineages(topo, p, init[25:], [5.0, 10.0], seed=8, offset=25)
    np.testing.assert_array_equal(full[25:], tail)
    assert len(set(lineage_keys(8, 1000).tolist())) == 1000


def test_counts_nonnegative_and_matures_barren():
    topo, p = reference_truth("c")
    counts, _ = simulate_lineages(topo, p, np.zeros(200, dtype=np.int64), [3.0, 20.0], seed=6)
    assert counts.min() >= 0
    # a lineage started from a mature cell can only shrink
    start = np.full(50, topo.index("3"), dtype=np.int64)
    only, _ = simulate_lineages(topo, p, start, [1.0, 5.0], seed=6)
    assert only.sum(axis=2).max() <= 1


def test_superposition_of_lineages():
    topo, p = reference_truth("a")
    n = 20_000
    X, _ = simulate_latent(topo, p, 2 * n, [10.0], seed=12)
    pairs = X[:n] + X[n:]
    expect = 2 * latent_moments(build_moment_set(topo, p), p.pi, 10.0).mean
    se = pairs[:, 0].std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(pairs[:, 0].mean(axis=0) - expect) < 4 * se)


def test_explosion_guard():
    p = Params(5.0, [0.01], [0.1], [1.0], [0.1], [1.0, 0.0])
    with pytest.raises(SimulationError, match="exceeded"):
        simulate_lineage(ONE, p, "0", [10.0], rng=1, max_events=10_000)


def test_schedule_is_increasing():
    assert len(STANDARD_SCHEDULE) == 11
    assert np.all(np.diff(STANDARD_SCHEDULE) > 0)


def test_bad_times_rejected():
    with pytest.raises(ValueError):
        SimConfig(10, obs_times=(5.0, 2.0))
