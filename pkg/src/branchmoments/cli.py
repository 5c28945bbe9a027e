"""Command-line interface: ``branchmoments <command> [options]``.

Exit status is 0 on success, 1 on a domain error (bad data, infeasible
model, failed fit) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, io
from .estimator import FitConfig, FitError, fit
from .model import BoundaryError, ParamsError, TopologyError
from .moments import build_moment_set, latent_moments, model_correlations, oracle_suite
from .simulator import STANDARD_SCHEDULE, SimConfig, SimulationError, simulate_dataset
from .validation import PROFILES, StudySpec, bootstrap, cross_validate, simulation_study

DEFAULT_SEED = 20240521
ORACLE_TOL = 1e-6

DOMAIN_ERRORS = (
    ValueError,
    KeyError,
    OSError,
    FitError,
    SimulationError,
    TopologyError,
    ParamsError,
    BoundaryError,
)


class UsageError(Exception):
    pass


def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _seed(args) -> int:
    if args.seed is None:
        print(f"no --seed given; using default seed {DEFAULT_SEED}", file=sys.stderr)
        return DEFAULT_SEED
    return args.seed


def _fit_config(args, seed) -> FitConfig:
    restarts = args.restarts if args.restarts is not None else PROFILES[args.profile]["n_restarts"]
    return FitConfig(
        n_restarts=restarts,
        seed=seed,
        exclude_times=tuple(args.exclude_times or ()),
        method=args.method,
    )


def _out(args) -> Path:
    return io.ensure_dir(args.out)


def _load_data(args, topology):
    if not args.reads or not args.cbc:
        raise UsageError("--reads and --cbc are required")
    return io.read_dataset(args.reads, args.cbc, topology)


def _fit_payload(topology, res, config: FitConfig) -> dict:
    return {
        "objective": res.objective,
        "params": res.theta_hat.as_dict(topology),
        "free": list(res.free_names),
        "fixed": sorted(res.theta_hat.fixed),
        "growth": res.theta_hat.growth,
        "n_restarts": config.n_restarts,
        "method": config.method,
        "excluded_times": list(config.exclude_times),
        "restarts": [
            {k: r[k] for k in ("restart", "warm", "objective", "status", "n_eval")} for r in res.restart_table
        ],
    }


def _corr_rows(topology, res):
    labels = topology.pair_labels()
    rows = []
    for j, t in enumerate(res.times):
        for q, lab in enumerate(labels):
            psi_hat = res.empirical_psi[q, j] if res.valid[q, j] else float("nan")
            rows.append([t, lab, res.fitted_psi[q, j], psi_hat])
    return rows


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    seed = _seed(args)
    topo, params = io.load_model(args.model)
    b = args.sample_size if args.sample_size else (10_000,) * topo.n_mat
    if len(b) == 1:
        b = b * topo.n_mat
    cfg = SimConfig(
        n_lineages=args.n,
        obs_times=tuple(args.times) if args.times else STANDARD_SCHEDULE,
        seed=seed,
        sample_sizes=tuple(int(x) for x in b),
        read_filter_threshold=args.threshold,
    )
    data = simulate_dataset(topo, params, cfg)
    out = _out(args)
    io.write_reads(out / "reads.csv", data)
    io.write_cbc(out / "cbc.csv", data)
    io.write_manifest(
        out / "manifest.json",
        "simulate",
        seed,
        {
            "model": io.model_to_dict(topo, params),
            "n_lineages": cfg.n_lineages,
            "obs_times": list(cfg.obs_times),
            "sample_sizes": list(cfg.sample_sizes),
            "read_filter_threshold": cfg.read_filter_threshold,
            "n_barcodes_kept": data.n_barcodes,
        },
    )
    print(f"wrote {data.n_barcodes} barcodes x {len(data.times)} times to {out}")
    return 0


def cmd_moments(args) -> int:
    topo, params = io.load_model(args.model)
    labels = topo.pair_labels()
    rows = []
    if args.cbc:
        times, B, b = _cbc_arrays(args.cbc, topo)
        psi, valid = model_correlations(topo, params, params.pi, times, b, B)
        for j, t in enumerate(times):
            for q, lab in enumerate(labels):
                rows.append([t, lab, psi[q, j] if valid[q, j] else float("nan")])
        kind = "observed"
    else:
        times = np.asarray(args.times or STANDARD_SCHEDULE, dtype=float)
        mset = build_moment_set(topo, params)
        for t in times:
            lm = latent_moments(mset, params.pi, float(t))
            sd = np.sqrt(np.diag(lm.cov))
            for q, (m, n) in enumerate(topo.pairs()):
                den = sd[m] * sd[n]
                rows.append([t, labels[q], lm.cov[m, n] / den if den > 0 else float("nan")])
        kind = "latent"
    out = _out(args)
    io.write_table(out / "moments.csv", ["time", "pair", "psi_model"], rows)
    print(f"wrote {kind} model correlations to {out / 'moments.csv'}")
    return 0


def _cbc_arrays(path, topo):
    import csv

    types = {}
    for i, m in enumerate(topo.matures):
        types[m] = i
        types[topo.label(m)] = i
    entries = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            entries[(float(row["time"]), types[row["cell_type"]])] = (float(row["B"]), float(row["b"]))
    times = np.array(sorted({t for t, _ in entries}))
    B = np.array([[entries[(t, m)][0] for m in range(topo.n_mat)] for t in times])
    b = np.array([entries[(times[0], m)][1] for m in range(topo.n_mat)])
    return times, B, b


def cmd_fit(args) -> int:
    seed = _seed(args)
    topo, params = io.load_model(args.model)
    data = _load_data(args, topo)
    cfg = _fit_config(args, seed)
    res = fit(topo, data, cfg, params)
    out = _out(args)
    io.write_json(out / "fit.json", _fit_payload(topo, res, cfg))
    io.write_table(out / "corr_fit.csv", ["time", "pair", "psi_model", "psi_hat"], _corr_rows(topo, res))
    io.write_manifest(
        out / "manifest.json",
        "fit",
        seed,
        {"model": io.model_to_dict(topo, params), "n_restarts": cfg.n_restarts, "method": cfg.method,
         "exclude_times": list(cfg.exclude_times), "n_barcodes": data.n_barcodes},
    )
    print(f"objective {res.objective:.6g}")
    for k, v in res.free_values(topo).items():
        print(f"  {k:>10s} = {v:.6g}")
    return 0


def cmd_bootstrap(args) -> int:
    seed = _seed(args)
    topo, params = io.load_model(args.model)
    data = _load_data(args, topo)
    cfg = _fit_config(args, seed)
    res = bootstrap(
        topo,
        data,
        cfg,
        args.replicates,
        seed,
        params,
        restarts=args.replicate_restarts,
        redraw=args.mode == "redraw",
    )
    out = _out(args)
    rows = [[r, *vals] for r, vals in zip(res.replicate_index, res.replicates)]
    io.write_table(out / "bootstrap.csv", ["replicate", *res.names], rows)
    io.write_table(
        out / "bootstrap_summary.csv",
        ["parameter", "median", "ci_low", "ci_high"],
        [[r["parameter"], r["median"], r["ci_low"], r["ci_high"]] for r in res.table()],
    )
    io.write_json(out / "fit.json", _fit_payload(topo, res.full_fit, cfg))
    io.write_manifest(
        out / "manifest.json",
        "bootstrap",
        seed,
        {"model": io.model_to_dict(topo, params), "replicates": args.replicates, "mode": args.mode,
         "replicate_restarts": args.replicate_restarts, "n_restarts": cfg.n_restarts},
    )
    for r in res.table():
        print(f"  {r['parameter']:>10s}  {r['median']:.5g}  [{r['ci_low']:.5g}, {r['ci_high']:.5g}]")
    if res.failed:
        print(f"{len(res.failed)} replicate fits failed", file=sys.stderr)
    return 0


def cmd_cv(args) -> int:
    seed = _seed(args)
    if not args.model:
        raise UsageError("at least one --model is required")
    models = {}
    for path in args.model:
        topo, params = io.load_model(path)
        models[str(path)] = (topo, params)
    first = next(iter(models.values()))[0]
    data = _load_data(args, first)
    cfg = _fit_config(args, seed)
    res = cross_validate(models, data, args.folds, cfg, seed, force=args.force)
    sizes = {k: t.n_mat for k, (t, _) in models.items()}
    payload = {
        "folds": args.folds,
        "models": {
            k: {"per_fold": list(v.per_fold), "mean_objective": v.mean_objective, "n_mature": sizes[k]}
            for k, v in res.items()
        },
    }
    if len(set(sizes.values())) == 1:
        payload["ranking"] = sorted(res, key=lambda k: res[k].mean_objective)
    else:
        payload["ranking"] = None
        payload["caveat"] = "models differ in mature types; objectives sum different numbers of terms"
    out = _out(args)
    io.write_json(out / "cv.json", payload)
    io.write_manifest(out / "manifest.json", "cv", seed, {"models": list(models), "folds": args.folds,
                                                         "n_restarts": cfg.n_restarts})
    for k, v in res.items():
        print(f"  {k}: mean held-out objective {v.mean_objective:.6g}")
    if payload.get("caveat"):
        print("warning: " + payload["caveat"], file=sys.stderr)
    return 0


def _parse_lump(text, topo):
    groups = []
    for g in text.split(","):
        ids = [s.strip() for s in g.split("+") if s.strip()]
        groups.append(tuple(topo.matures.index(i) for i in ids))
    return tuple(groups)


def cmd_study(args) -> int:
    seed = _seed(args)
    topo, truth = io.load_model(args.model)
    kw = {}
    if args.fit_model:
        ftopo, fparams = io.load_model(args.fit_model)
        kw.update(fit_topology=ftopo, fit_mu=tuple(fparams.mu_mat))
        if args.lump:
            kw["lump"] = _parse_lump(args.lump, topo)
    elif args.lump:
        raise UsageError("--lump needs --fit-model naming the lumped model")
    spec = StudySpec.from_profile(
        args.profile,
        name=Path(args.model).stem,
        topology=topo,
        truth=truth,
        seed=seed,
        fit_config=FitConfig(method=args.method),
        **kw,
    )
    over = {}
    if args.replicates is not None:
        over["replicates"] = args.replicates
    if args.n is not None:
        over["n_lineages"] = args.n
    if args.sample_size:
        b = args.sample_size if len(args.sample_size) > 1 else args.sample_size * topo.n_mat
        over["sample_sizes"] = tuple(int(x) for x in b)
    if args.restarts is not None:
        over["fit_config"] = replace(spec.fit_config, n_restarts=args.restarts)
    spec = replace(spec, **over)
    res = simulation_study(spec)
    out = _out(args)
    keys = ["parameter", "truth", "median", "mad", "sd", "median_rel_error"]
    io.write_table(out / "study.csv", keys, [[r[k] for k in keys] for r in res.summary])
    io.write_table(
        out / "study_estimates.csv",
        ["replicate", "objective", *res.names],
        [[i, o, *row] for i, (o, row) in enumerate(zip(res.objectives, res.estimates))],
    )
    io.write_manifest(out / "manifest.json", "study", seed, {"profile": args.profile, "replicates": spec.replicates,
                                                            "n_lineages": spec.n_lineages,
                                                            "n_restarts": spec.fit_config.n_restarts})
    for r in res.summary:
        print(f"  {r['parameter']:>10s}  median {r['median']:.5g}  MAD {r['mad']:.3g}  rel.err {r['median_rel_error']:+.3f}")
    return 0


def cmd_check(args) -> int:
    if not args.oracle:
        raise UsageError("nothing to check; pass --oracle")
    seed = args.seed if args.seed is not None else 0
    errs = oracle_suite("acf", n_draws=args.draws, seed=seed)
    for k, v in errs.items():
        print(f"model ({k}): max relative error {v:.3e}")
    worst = max(errs.values())
    print(f"max relative error {worst:.3e} (tolerance {ORACLE_TOL:g})")
    return 0 if worst <= ORACLE_TOL else 1


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="branchmoments", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True, data=False, fitting=False):
        if model:
            sp.add_argument("--model", required=True, help="model.json")
        if data:
            sp.add_argument("--reads", help="reads.csv")
            sp.add_argument("--cbc", help="cbc.csv")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        if fitting:
            sp.add_argument("--restarts", type=int, default=None)
            sp.add_argument("--profile", choices=sorted(PROFILES), default="desk")
            sp.add_argument("--exclude-times", type=_floats, default=None, metavar="t1,t2")
            sp.add_argument("--method", choices=["nelder-mead", "quasi-newton"], default="nelder-mead")

    sp = sub.add_parser("simulate", help="simulate lineages and blood samples")
    common(sp)
    sp.add_argument("--n", type=int, default=2000, help="number of barcoded lineages")
    sp.add_argument("--times", type=_floats, default=None)
    sp.add_argument("--sample-size", type=_floats, default=None, help="b per mature type (one value or one each)")
    sp.add_argument("--threshold", type=float, default=0.0, help="read filter threshold (max over cells)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("moments", help="model correlation curves")
    common(sp)
    sp.add_argument("--times", type=_floats, default=None)
    sp.add_argument("--cbc", default=None, help="use observed-read correlations with these B and b")
    sp.set_defaults(func=cmd_moments)

    sp = sub.add_parser("fit", help="estimate parameters")
    common(sp, data=True, fitting=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("bootstrap", help="bootstrap confidence intervals")
    common(sp, data=True, fitting=True)
    sp.add_argument("--replicates", type=int, default=100)
    sp.add_argument("--replicate-restarts", type=int, default=10)
    sp.add_argument("--mode", choices=["redraw", "barcodes"], default="redraw")
    sp.set_defaults(func=cmd_bootstrap)

    sp = sub.add_parser("cv", help="k-fold cross-validation of candidate models")
    sp.add_argument("--model", action="append", required=True, help="model.json (repeat per candidate)")
    sp.add_argument("--reads")
    sp.add_argument("--cbc")
    sp.add_argument("--out", default=".")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--restarts", type=int, default=None)
    sp.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    sp.add_argument("--exclude-times", type=_floats, default=None, metavar="t1,t2")
    sp.add_argument("--method", choices=["nelder-mead", "quasi-newton"], default="nelder-mead")
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--force", action="store_true", help="compare models with different mature types")
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("study", help="simulation study (recovery or misspecification)")
    common(sp, fitting=True)
    sp.add_argument("--fit-model", default=None, help="fit this model instead of the generating one")
    sp.add_argument("--lump", default=None, help="merge generated types, e.g. 1+2,3,4+5")
    sp.add_argument("--replicates", type=int, default=None)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--sample-size", type=_floats, default=None, help="b per mature type (one value or one each)")
    sp.set_defaults(func=cmd_study)

    sp = sub.add_parser("check", help="self-checks")
    sp.add_argument("--oracle", action="store_true", help="closed forms against the ODE oracle")
    sp.add_argument("--draws", type=int, default=20)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_check)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
