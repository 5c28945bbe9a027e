import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from branchmoments.estimator import FitConfig
from branchmoments.model import Params, canonical_model, make_topology, reference_truth
from branchmoments.simulator import ReadDataset, SimConfig, simulate_dataset
from branchmoments.validation import (
    PROFILES,
    StudySpec,
    bootstrap,
    cross_validate,
    fold_assignment,
    lump_dataset,
    lumped_death_rates,
    lumped_model_c,
    percentile_ci,
    placeholder_params,
    resample_reads,
    simulation_study,
    summarize,
)

QUICK = FitConfig(n_restarts=2, max_iter=150, polish=2)


@pytest.fixture(scope="module")
def small_a():
    topo, p = reference_truth("a")
    return topo, p, simulate_dataset(topo, p, SimConfig(300, seed=3, sample_sizes=(2000,) * 3, read_filter_threshold=0))


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=60), st.randoms())
def test_percentile_ci_order_invariant(xs, rnd):
    shuffled = list(xs)
    rnd.shuffle(shuffled)
    a = percentile_ci(np.array(xs)[:, None])
    b = percentile_ci(np.array(shuffled)[:, None])
    np.testing.assert_array_equal(a, b)
    assert a[0, 0] <= np.median(xs) <= a[0, 1]


def test_resample_reads(small_a, rng):
    _, _, data = small_a
    plain = resample_reads(data, rng, redraw=False)
    rows = {r.tobytes() for r in data.reads}
    assert all(r.tobytes() in rows for r in plain.reads)
    redrawn = resample_reads(data, np.random.default_rng(1))
    assert redrawn.reads.shape == data.reads.shape
    assert np.all(redrawn.reads.sum(axis=0) <= data.b[None])
    assert redrawn.reads.min() >= 0


def test_bootstrap_deterministic_and_distinct(small_a):
    topo, p, data = small_a
    a = bootstrap(topo, data, QUICK, 2, seed=5, fixed=p, restarts=1)
    b = bootstrap(topo, data, QUICK, 2, seed=5, fixed=p, restarts=1, full_fit=a.full_fit)
    np.testing.assert_array_equal(a.replicates, b.replicates)
    assert a.replicates.shape == (2, len(a.names))
    assert not np.array_equal(a.replicates[0], a.replicates[1])
    assert np.all(a.ci[:, 0] <= a.medians) and np.all(a.medians <= a.ci[:, 1])
    assert [row["parameter"] for row in a.table()] == list(a.names)
    with pytest.raises(ValueError):
        bootstrap(topo, data, QUICK, 1, seed=5, fixed=p)


def test_fold_partition():
    folds = fold_assignment(103, 5, seed=2)
    allv = np.concatenate(folds)
    assert sorted(allv.tolist()) == list(range(103))
    assert {len(f) for f in folds} <= {20, 21}
    assert [f.tolist() for f in folds] == [f.tolist() for f in fold_assignment(103, 5, seed=2)]
    with pytest.raises(ValueError, match="fold too small"):
        fold_assignment(30, 30, seed=0)


def test_cv_refuses_unequal_type_counts(small_a):
    topo, p, data = small_a
    tb = canonical_model("b")
    with pytest.raises(ValueError, match="not comparable"):
        cross_validate({"a": (topo, p), "b": (tb, placeholder_params(tb, [0.2] * 5))}, data, 3, QUICK, seed=0)


def test_cv_mean_and_folds(small_a):
    topo, p, data = small_a
    out = cross_validate({"a": (topo, p)}, data, 3, QUICK, seed=4)
    r = out["a"]
    assert r.folds == 3 and len(r.per_fold) == 3
    assert r.mean_objective == pytest.approx(np.mean(r.per_fold))
    assert all(v >= 0 for v in r.per_fold)


def test_lump_dataset():
    reads = np.arange(2 * 1 * 5).reshape(2, 1, 5)
    data = ReadDataset(reads, [3.0], np.arange(10.0, 15.0)[None], np.full(5, 2.0), np.arange(2), tuple("ABCDE"))
    out = lump_dataset(data, ((0, 1), (2,), (3, 4)))
    np.testing.assert_array_equal(out.reads[:, 0], [[1, 2, 7], [11, 7, 17]])
    np.testing.assert_array_equal(out.B[0], [21, 12, 27])
    np.testing.assert_array_equal(out.b, [4, 2, 4])
    assert out.cell_types == ("A+B", "C", "D+E")


def test_lumped_death_rates():
    p = Params(0.03, [0.02], [0.01], [2.0, 1.0], [0.2, 0.5], [0.5, 0.5])
    # weights nu/mu = 10 and 2
    (mu,) = lumped_death_rates(p, [(0, 1)])
    assert mu == pytest.approx((10 * 0.2 + 2 * 0.5) / 12)
    topo, groups = lumped_model_c()
    assert topo.n_mat == len(groups) == 3


def test_summarize_unscaled_mad():
    est = np.array([[1.0], [2.0], [4.0], [10.0]])
    (row,) = summarize(["x"], est, {"x": 2.0})
    assert row["median"] == 3.0
    assert row["mad"] == 1.5
    assert row["median_rel_error"] == pytest.approx(0.5)


def test_profiles():
    spec = StudySpec.from_profile("desk", name="a", topology=canonical_model("a"), truth=reference_truth("a")[1])
    assert (spec.replicates, spec.n_lineages, spec.fit_config.n_restarts) == (20, 2000, 50)
    assert PROFILES["paper"] == {"replicates": 400, "n_lineages": 20000, "n_restarts": 250}


def test_small_study_reproducible():
    topo, p = reference_truth("a")
    spec = StudySpec("a", topo, p, n_lineages=250, replicates=2, fit_config=QUICK, sample_sizes=(2000,) * 3, seed=9)
    a, b = simulation_study(spec), simulation_study(spec)
    np.testing.assert_array_equal(a.estimates, b.estimates)
    assert a.estimates.shape == (2, len(a.names))
    assert {r["parameter"] for r in a.summary} == set(a.names)


def test_misspecified_study_truth_subset():
    topo, p = reference_truth("c")
    tb = canonical_model("b")
    spec = StudySpec("c-as-b", topo, p, n_lineages=250, replicates=1, fit_config=QUICK, sample_sizes=(1000,) * 5, fit_topology=tb)
    res = simulation_study(spec)
    assert "lambda" in res.truth and "mu_a" in res.truth
    assert all(n in res.names for n in res.truth)


@pytest.mark.slow
def test_bootstrap_coverage_for_lambda():
    topo, p = reference_truth("a")
    cfg = FitConfig(n_restarts=10)
    covered = 0
    for rep in range(20):
        data = simulate_dataset(topo, p, SimConfig(2000, seed=500 + rep, read_filter_threshold=0))
        res = bootstrap(topo, data, cfg, 200, seed=rep, fixed=p)
        lo, hi = res.ci[res.names.index("lambda")]
        covered += lo <= p.lam <= hi
    assert covered >= 18
