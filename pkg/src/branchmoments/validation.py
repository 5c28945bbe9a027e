"""Bootstrap intervals, k-fold cross-validation and simulation studies."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .estimator import FitConfig, FitError, FitResult, LossContext, fit, free_param_names
from .model import ModelTopology, Params, check_topology, make_topology, mature_death_names, param_names
from .simulator import STANDARD_SCHEDULE, ReadDataset, SimConfig, mvhypergeom_sample, sampling_rng, simulate_dataset

log = logging.getLogger(__name__)

PROFILES = {
    "desk": {"replicates": 20, "n_lineages": 2000, "n_restarts": 50},
    # long-running: hours to days on a workstation
    "paper": {"replicates": 400, "n_lineages": 20000, "n_restarts": 250},
}


def _rng(seed, *tags):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, tags)])


# --------------------------------------------------------------------------
# bootstrap
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    names: tuple
    replicates: np.ndarray  # successful replicates x free parameters
    ci: np.ndarray  # free parameters x 2 (2.5%, 97.5%)
    medians: np.ndarray
    failed: tuple
    full_fit: FitResult
    replicate_index: tuple = ()

    def table(self):
        return [
            {"parameter": n, "median": float(m), "ci_low": float(lo), "ci_high": float(hi)}
            for n, m, (lo, hi) in zip(self.names, self.medians, self.ci)
        ]


def percentile_ci(samples, level=0.95):
    """Percentile intervals per column; invariant to replicate order."""
    x = np.sort(np.asarray(samples, dtype=float), axis=0)
    a = (1.0 - level) / 2.0
    return np.stack([np.quantile(x, a, axis=0), np.quantile(x, 1.0 - a, axis=0)], axis=-1)


def resample_reads(data: ReadDataset, rng, redraw=True):
    """One bootstrap data set.

    Barcodes are drawn with replacement.  With ``redraw`` each resampled
    barcode's reads are converted back to sampled-cell counts, scaled up to an
    estimated blood population ``y * B / b`` and sampled again without
    replacement, adding a fresh layer of blood-sampling noise.
    """
    N, J, M = data.reads.shape
    idx = rng.integers(0, N, N)
    reads = data.reads[idx]
    if not redraw:
        return replace(data, reads=reads, barcode_ids=data.barcode_ids[idx])
    out = np.zeros_like(reads)
    totals = data.reads.sum(axis=0)
    for j in range(J):
        for m in range(M):
            col = reads[:, j, m].astype(float)
            if totals[j, m] <= 0:
                continue
            # amplification constant implied by the full data column
            d_hat = totals[j, m] / data.b[m]
            cells = np.rint(col / d_hat)
            pop = np.rint(cells * data.B[j, m] / data.b[m]).astype(np.int64)
            size = int(min(data.b[m], pop.sum()))
            out[:, j, m] = mvhypergeom_sample(pop, size, rng)
    return replace(data, reads=out, barcode_ids=data.barcode_ids[idx])


def bootstrap(
    topology: ModelTopology,
    data: ReadDataset,
    fit_config: FitConfig,
    R: int,
    seed: int,
    fixed: Params,
    *,
    full_fit: Optional[FitResult] = None,
    restarts: int = 10,
    redraw: bool = True,
) -> BootstrapResult:
    """Percentile bootstrap over barcodes (plus re-drawn blood sampling).

    Each replicate refits with ``restarts`` restarts, the first warm-started
    at the full-data estimate.
    """
    if R < 2:
        raise ValueError("R must be at least 2")
    if full_fit is None:
        full_fit = fit(topology, data, fit_config, fixed)
    names = tuple(free_param_names(topology, fixed.fixed))
    rep_cfg = replace(fit_config, n_restarts=max(1, restarts))
    rows, ok_idx, failed = [], [], []
    for r in range(R):
        rng = _rng(seed, 11, r)
        boot = resample_reads(data, rng, redraw)
        try:
            res = fit(topology, boot, replace(rep_cfg, seed=int(rng.integers(2**62))), fixed, starts=[full_fit.theta_hat])
        except (FitError, ValueError) as exc:
            log.warning("bootstrap replicate %d failed: %s", r, exc)
            failed.append(r)
            continue
        d = res.theta_hat.as_dict(topology)
        rows.append([d[n] for n in names])
        ok_idx.append(r)
    if len(failed) > 0.05 * R:
        warnings.warn(f"{len(failed)} of {R} bootstrap replicates failed", RuntimeWarning, stacklevel=2)
    if not rows:
        raise FitError("every bootstrap replicate failed")
    reps = np.asarray(rows)
    return BootstrapResult(
        names, reps, percentile_ci(reps), np.median(reps, axis=0), tuple(failed), full_fit, tuple(ok_idx)
    )


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CVResult:
    per_fold: tuple
    mean_objective: float
    folds: int
    fits: tuple = field(default=(), repr=False, compare=False)


def fold_assignment(n: int, K: int, seed: int) -> list:
    """Random partition of ``range(n)`` into K folds of near-equal size."""
    if K < 2:
        raise ValueError("K must be at least 2")
    if n < 5 * K:
        raise ValueError(f"fold too small: {n} barcodes cannot fill {K} folds of at least 5")
    perm = _rng(seed, 23).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, K)]


def held_out_objective(topology, theta: Params, test: ReadDataset, fit_config: FitConfig) -> float:
    """Correlation loss of ``theta`` against the test data (no barrier term)."""
    ctx = LossContext.from_data(topology, theta, test, replace(fit_config, barrier=0.0))
    return ctx.at(theta)


def cross_validate(
    models: Mapping[str, tuple],
    data: ReadDataset,
    K: int,
    fit_config: FitConfig,
    seed: int,
    *,
    force: bool = False,
) -> dict:
    """K-fold CV for each ``name -> (topology, fixed Params)`` candidate.

    Models must share the number of mature types, since otherwise the losses
    sum different numbers of correlation terms; ``force`` overrides this.
    """
    sizes = {name: topo.n_mat for name, (topo, _) in models.items()}
    if len(set(sizes.values())) > 1 and not force:
        raise ValueError(f"models have different numbers of mature types {sizes}; losses are not comparable (use force)")
    folds = fold_assignment(data.n_barcodes, K, seed)
    if min(len(f) for f in folds) < 3:
        raise ValueError("fold too small for correlations")
    out = {}
    for name, (topo, fixed) in models.items():
        check_topology(topo)
        per_fold, fits = [], []
        for k, test_idx in enumerate(folds):
            train_idx = np.concatenate([f for i, f in enumerate(folds) if i != k])
            cfg = replace(fit_config, seed=int(_rng(seed, 29, k).integers(2**62)))
            res = fit(topo, data.subset(train_idx), cfg, fixed)
            per_fold.append(held_out_objective(topo, res.theta_hat, data.subset(test_idx), fit_config))
            fits.append(res)
        out[name] = CVResult(tuple(per_fold), float(np.mean(per_fold)), K, tuple(fits))
    return out


# --------------------------------------------------------------------------
# simulation studies
# --------------------------------------------------------------------------


def lump_dataset(data: ReadDataset, groups) -> ReadDataset:
    """Merge mature columns; ``groups`` lists column indices per new type."""
    groups = [list(g) for g in groups]
    reads = np.stack([data.reads[:, :, g].sum(axis=2) for g in groups], axis=2)
    B = np.stack([data.B[:, g].sum(axis=1) for g in groups], axis=1)
    b = np.array([data.b[g].sum() for g in groups])
    names = tuple("+".join(data.cell_types[i] for i in g) for g in groups)
    return ReadDataset(reads, data.times, B, b, data.barcode_ids, names)


def placeholder_params(topology: ModelTopology, mu_mat, fixed=None) -> Params:
    """Params holding only the fixed mature death rates; other entries are
    starting placeholders the estimator overwrites."""
    A, M = topology.n_prog, topology.n_mat
    K = topology.n_init
    fixed = mature_death_names(topology) if fixed is None else fixed
    return Params(0.05, [0.02 / A] * A, [0.01] * A, [1.0] * M, list(mu_mat), [1.0 / K] * K, fixed=fixed).check(topology)


@dataclass(frozen=True, eq=False)
class StudySpec:
    """One simulation study.

    ``fit_topology`` defaults to the generating topology.  ``lump`` (column
    groups) merges generated mature types before fitting; ``fit_mu`` supplies
    the fixed mature death rates of the fitted model when it differs.
    """

    name: str
    topology: ModelTopology
    truth: Params
    n_lineages: int = 2000
    replicates: int = 20
    fit_config: FitConfig = field(default_factory=lambda: FitConfig(n_restarts=50))
    obs_times: tuple = STANDARD_SCHEDULE
    sample_sizes: Optional[tuple] = None
    seed: int = 0
    fit_topology: Optional[ModelTopology] = None
    fit_mu: Optional[tuple] = None
    lump: Optional[tuple] = None

    @classmethod
    def from_profile(cls, profile: str, **kw):
        p = PROFILES[profile]
        cfg = kw.pop("fit_config", FitConfig())
        return cls(
            n_lineages=p["n_lineages"],
            replicates=p["replicates"],
            fit_config=replace(cfg, n_restarts=p["n_restarts"]),
            **kw,
        )


@dataclass(frozen=True, eq=False)
class StudyResult:
    spec: StudySpec
    names: tuple
    estimates: np.ndarray
    objectives: np.ndarray
    truth: dict
    summary: list


def summarize(names, estimates, truth: Mapping[str, float]) -> list:
    """Median, MAD (unscaled), SD and median relative error per parameter."""
    rows = []
    for i, n in enumerate(names):
        x = estimates[:, i]
        med = float(np.median(x))
        row = {
            "parameter": n,
            "truth": truth.get(n, float("nan")),
            "median": med,
            "mad": float(np.median(np.abs(x - med))),
            "sd": float(np.std(x, ddof=1)) if len(x) > 1 else float("nan"),
        }
        t = truth.get(n)
        row["median_rel_error"] = float(np.median((x - t) / t)) if t else float("nan")
        rows.append(row)
    return rows


def simulation_study(spec: StudySpec) -> StudyResult:
    gen = spec.topology
    fit_topo = spec.fit_topology or gen
    if spec.fit_topology is None and spec.lump is None:
        fixed = spec.truth
    else:
        mu = spec.fit_mu if spec.fit_mu is not None else spec.truth.mu_mat
        fixed = placeholder_params(fit_topo, mu)
    names = tuple(free_param_names(fit_topo, fixed.fixed))
    same = fit_topo == gen and spec.lump is None
    truth = spec.truth.as_dict(gen) if same else _shared_truth(gen, fit_topo, spec.truth, names)
    est, objs = [], []
    for r in range(spec.replicates):
        sim_seed = int(_rng(spec.seed, 31, r).integers(2**62))
        cfg = SimConfig(
            spec.n_lineages,
            obs_times=spec.obs_times,
            seed=sim_seed,
            sample_sizes=spec.sample_sizes,
            read_filter_threshold=0,
        )
        data = simulate_dataset(gen, spec.truth, cfg)
        if spec.lump is not None:
            data = lump_dataset(data, spec.lump)
        res = fit(fit_topo, data, replace(spec.fit_config, seed=sim_seed), fixed)
        d = res.theta_hat.as_dict(fit_topo)
        est.append([d[n] for n in names])
        objs.append(res.objective)
        log.info("study %s replicate %d objective %.4g", spec.name, r, res.objective)
    est = np.asarray(est)
    return StudyResult(spec, names, est, np.asarray(objs), truth, summarize(names, est, truth))


def _shared_truth(gen, fit_topo, truth: Params, names) -> dict:
    """Truth values for parameters that keep their meaning in the fitted model
    (same name and, for progenitor rates, the same progenitor id)."""
    d = truth.as_dict(gen)
    keep = {"lambda"} | {f"nu_{a}" for a in fit_topo.progenitors} | {f"mu_{a}" for a in fit_topo.progenitors}
    if fit_topo.progenitors == gen.progenitors:
        keep |= {f"pi_{c}" for c in fit_topo.compartments[: fit_topo.n_init]}
    return {n: d[n] for n in names if n in keep and n in d}


def lumped_model_c():
    """Three-type fit with the two-progenitor structure of model (c):
    types {1,2} under a, {3} and {4,5} under b."""
    topo = make_topology({"a": ["1"], "b": ["2", "3"]}, labels={"1": "Gr+Mono", "2": "T", "3": "B+NK"})
    return topo, ((0, 1), (2,), (3, 4))


def lumped_death_rates(truth: Params, groups) -> tuple:
    """Abundance-weighted mean death rate per lumped group (weights nu/mu)."""
    nu = np.asarray(truth.nu_mat)
    mu = np.asarray(truth.mu_mat)
    out = []
    for g in groups:
        g = list(g)
        w = nu[g] / mu[g]
        out.append(float(np.sum(w * mu[g]) / np.sum(w)))
    return tuple(out)


def param_table_names(topology) -> list:
    return param_names(topology)
