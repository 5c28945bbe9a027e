"""Correlation-matching estimator.

Empirical Pearson correlations of read counts across barcodes are matched to
model correlations by least squares.  Rates are optimized on the log scale,
the initial distribution through multinomial logits, and the HSC growth
constraint ``lambda > sum(nu_a)`` is kept by a small log-barrier.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from . import _accel
from .model import (
    ModelTopology,
    Params,
    ParamsError,
    check_topology,
    gamma_to_pi,
    mature_death_names,
    param_names,
    pi_to_gamma,
    rate_names,
)
from .moments import PSI_COND_MAX, model_correlations, model_psi
from .simulator import ReadDataset


class FitError(RuntimeError):
    pass


class IdentifiabilityWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# empirical correlations
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmpiricalCorr:
    """Sample correlations ``psi_hat[pair, j]`` for pairs m < n."""

    psi_hat: np.ndarray
    valid: np.ndarray
    times: np.ndarray
    pairs: tuple


def empirical_correlations(data: ReadDataset) -> EmpiricalCorr:
    """Pearson correlation across barcodes for every mature pair and time.

    Columns are centred and scaled to unit norm before the cross products,
    which makes the result invariant to multiplying a column by a constant.
    """
    N, J, M = data.reads.shape
    if N < 3:
        raise ValueError("at least 3 barcodes are needed for correlations")
    Y = data.reads.astype(np.float64)
    Yc = Y - Y.mean(axis=0, keepdims=True)
    norm = np.sqrt(np.einsum("pjm,pjm->jm", Yc, Yc))
    ok = norm > 0
    Z = np.where(ok[None], Yc / np.where(ok, norm, 1.0)[None], 0.0)
    pairs = tuple((m, n) for m in range(M) for n in range(m + 1, M))
    psi = np.zeros((len(pairs), J))
    valid = np.zeros((len(pairs), J), dtype=bool)
    for q, (m, n) in enumerate(pairs):
        v = ok[:, m] & ok[:, n]
        psi[q] = np.where(v, np.clip(np.einsum("pj,pj->j", Z[:, :, m], Z[:, :, n]), -1.0, 1.0), 0.0)
        valid[q] = v
    return EmpiricalCorr(psi, valid, np.asarray(data.times, dtype=float), pairs)


# --------------------------------------------------------------------------
# parameter encoding
# --------------------------------------------------------------------------


def pi_mode(topology: ModelTopology, fixed) -> str:
    """How the initial distribution is handled given the fixed-name set."""
    names = [f"pi_{topology.hsc}"] + [f"pi_{a}" for a in topology.progenitors]
    flags = [n in fixed for n in names]
    if all(flags):
        return "fixed"
    if not any(flags):
        return "free"
    if flags[0] and not any(flags[1:]):
        return "fix_hsc"
    raise ParamsError("fix either all pi entries, none, or only the HSC entry")


@dataclass(frozen=True, eq=False)
class Encoding:
    """Maps free parameters to an unconstrained vector and back."""

    topology: ModelTopology
    base: Params
    free_rates: tuple
    mode: str

    @classmethod
    def build(cls, topology, params: Params):
        names = rate_names(topology)
        free = tuple(i for i, n in enumerate(names) if n not in params.fixed)
        return cls(topology, params, free, pi_mode(topology, params.fixed))

    @property
    def n_gamma(self) -> int:
        K = self.topology.n_init
        return {"free": K - 1, "fixed": 0, "fix_hsc": self.topology.n_prog - 1}[self.mode]

    @property
    def size(self) -> int:
        return len(self.free_rates) + self.n_gamma

    def names(self) -> list:
        rn = rate_names(self.topology)
        out = [f"log_{rn[i]}" for i in self.free_rates]
        if self.mode == "free":
            out += [f"gamma_{c}" for c in self.topology.compartments[: self.topology.n_init - 1]]
        elif self.mode == "fix_hsc":
            out += [f"gamma_{a}" for a in self.topology.progenitors[:-1]]
        return out

    def rate_vector(self, params: Params) -> np.ndarray:
        return np.array((params.lam,) + params.nu_prog + params.mu_prog + params.nu_mat + params.mu_mat)

    def encode(self, params: Params) -> np.ndarray:
        rates = self.rate_vector(params)[list(self.free_rates)]
        if np.any(rates <= 0):
            raise ParamsError("free rates must be strictly positive to be log-encoded")
        parts = [np.log(rates)]
        pi = np.asarray(params.pi)
        if self.mode == "free":
            parts.append(pi_to_gamma(pi))
        elif self.mode == "fix_hsc":
            parts.append(pi_to_gamma(pi[1:] / pi[1:].sum()))
        return np.concatenate(parts)

    def decode_arrays(self, x):
        """(rates, pi) as arrays; cheap path used inside the loss."""
        x = np.asarray(x, dtype=float)
        rates = self.rate_vector(self.base)
        nr = len(self.free_rates)
        rates[list(self.free_rates)] = np.exp(x[:nr])
        g = x[nr:]
        if self.mode == "free":
            pi = gamma_to_pi(g)
        elif self.mode == "fix_hsc":
            p0 = self.base.pi[0]
            pi = np.concatenate([[p0], (1.0 - p0) * gamma_to_pi(g)])
        else:
            pi = np.asarray(self.base.pi, dtype=float)
        return rates, pi

    def decode(self, x) -> Params:
        rates, pi = self.decode_arrays(x)
        A, M = self.topology.n_prog, self.topology.n_mat
        return Params(
            rates[0],
            rates[1 : 1 + A],
            rates[1 + A : 1 + 2 * A],
            rates[1 + 2 * A : 1 + 2 * A + M],
            rates[1 + 2 * A + M :],
            pi / pi.sum(),
            fixed=self.base.fixed,
        )


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    ``restart_bounds`` maps rate names to (low, high) log-uniform ranges for
    restart starting points; unlisted rates use ``[1e-4, 100 * scale]`` where
    the scale is the largest fixed mature death rate (1 if none is fixed).
    Random starts whose net HSC growth over the last observation time exceeds
    ``growth_horizon`` (on the log scale) are redrawn.
    ``pair_factor`` 2 counts every unordered pair twice, as in a sum over
    ordered pairs.
    Each local search runs up to ``polish`` short Nelder-Mead passes of
    ``max_iter`` iterations, rebuilding the simplex at the incumbent between
    passes; this escapes the collapsed simplices that long single runs get
    stuck in on the 10+ dimensional models.
    """

    n_restarts: int = 250
    restart_bounds: dict = field(default_factory=dict)
    barrier: float = 1e-6
    growth_constraint: bool = True
    ftol: float = 1e-10
    xtol: float = 1e-8
    max_iter: int = 500
    method: str = "nelder-mead"
    seed: int = 0
    pair_factor: float = 2.0
    exclude_times: tuple = ()
    gamma_range: float = 3.0
    polish: int = 20
    growth_horizon: float = 10.0

    def __post_init__(self):
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be at least 1")
        if self.method not in ("nelder-mead", "quasi-newton"):
            raise ValueError("method must be 'nelder-mead' or 'quasi-newton'")
        for k, (lo, hi) in dict(self.restart_bounds).items():
            if not (0 < lo < hi):
                raise ValueError(f"restart bounds for {k} must satisfy 0 < low < high")


@dataclass(frozen=True, eq=False)
class LossContext:
    topology: ModelTopology
    encoding: Encoding
    times: np.ndarray
    b: np.ndarray
    B: np.ndarray
    psi_hat: np.ndarray
    valid: np.ndarray
    barrier: float = 1e-6
    growth_constraint: bool = True
    pair_factor: float = 2.0

    @property
    def t_max(self) -> float:
        return float(self.times.max()) if self.times.size else 0.0

    @classmethod
    def from_data(cls, topology, params, data: ReadDataset, config: Optional[FitConfig] = None, emp=None):
        config = config or FitConfig()
        check_topology(topology)
        params.check(topology)
        if data.reads.shape[2] != topology.n_mat:
            raise ValueError("data has a different number of mature types than the model")
        if config.exclude_times:
            data = data.drop_times(config.exclude_times)
        emp = emp if emp is not None else empirical_correlations(data)
        return cls(
            topology,
            Encoding.build(topology, params),
            np.ascontiguousarray(data.times, dtype=float),
            np.ascontiguousarray(data.b, dtype=float),
            np.ascontiguousarray(data.B, dtype=float),
            emp.psi_hat,
            emp.valid,
            config.barrier,
            config.growth_constraint,
            config.pair_factor,
        )

    def with_empirical(self, emp: EmpiricalCorr) -> "LossContext":
        return replace(self, psi_hat=emp.psi_hat, valid=emp.valid)

    def model_psi(self, rates, pi):
        """Model correlations, or None where the closed form is too badly
        conditioned to trust in double precision."""
        A, M = self.topology.n_prog, self.topology.n_mat
        return model_psi(
            float(rates[0]),
            rates[1 : 1 + A],
            rates[1 + A : 1 + 2 * A],
            rates[1 + 2 * A : 1 + 2 * A + M],
            rates[1 + 2 * A + M :],
            self.topology.parent_index(),
            pi,
            self.times,
            self.b,
            self.B,
            cond_max=PSI_COND_MAX,
            fallback=False,
        )

    def _value(self, rates, pi) -> float:
        A = self.topology.n_prog
        growth = rates[0] - rates[1 : 1 + A].sum()
        if not np.all(np.isfinite(rates)) or growth * self.t_max > 700.0:
            return math.inf
        penalty = 0.0
        if self.growth_constraint:
            if not growth > 0.0:
                return math.inf
            penalty = -self.barrier * math.log(growth)
        try:
            out = self.model_psi(rates, pi)
        except (ZeroDivisionError, ValueError, OverflowError):
            # extreme rates: treat as a rejected step
            return math.inf
        if out is None:
            return math.inf
        psi = out[0]
        if not np.all(np.abs(psi) <= 1.0 + 1e-6):
            # numerically meaningless correlations (also catches NaN)
            return math.inf
        # cells where the model variance vanishes use psi = 0
        r = np.where(self.valid, psi - self.psi_hat, 0.0)
        return self.pair_factor * float(np.sum(r * r)) + penalty

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)) or np.any(x[: len(self.encoding.free_rates)] > 700):
            return math.inf
        rates, pi = self.encoding.decode_arrays(x)
        return self._value(rates, pi)

    def at(self, params: Params) -> float:
        """Loss at a full parameter set (free/fixed split ignored)."""
        return self._value(self.encoding.rate_vector(params), np.asarray(params.pi, dtype=float))


def loss(theta_free, context: LossContext) -> float:
    return context(theta_free)


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: Params
    objective: float
    restart_table: list
    fitted_psi: np.ndarray
    empirical_psi: np.ndarray
    valid: np.ndarray
    times: np.ndarray
    pairs: tuple
    free_names: tuple

    def free_values(self, topology) -> dict:
        d = self.theta_hat.as_dict(topology)
        return {k: d[k] for k in free_param_names(topology, self.theta_hat.fixed)}


def free_param_names(topology, fixed) -> list:
    return [n for n in param_names(topology) if n not in fixed]


def default_bounds(topology, params: Params, config: FitConfig) -> dict:
    fixed_mu = [v for n, v in zip(mature_death_names(topology), params.mu_mat) if n in params.fixed]
    scale = max(fixed_mu) if fixed_mu else 1.0
    out = {n: (1e-4, 100.0 * scale) for n in rate_names(topology)}
    out.update(dict(config.restart_bounds))
    return out


def restart_start(
    enc: Encoding, bounds: dict, config: FitConfig, index: int, t_max: float = 0.0, max_tries: int = 10000
):
    """Random starting vector for restart ``index`` (independent stream)."""
    rng = np.random.default_rng([int(config.seed) & 0xFFFFFFFFFFFFFFFF, 7, index])
    rn = rate_names(enc.topology)
    A = enc.topology.n_prog
    free = list(enc.free_rates)
    for _ in range(max_tries):
        logs = np.array([rng.uniform(np.log(bounds[rn[i]][0]), np.log(bounds[rn[i]][1])) for i in free])
        gam = rng.uniform(-config.gamma_range, config.gamma_range, enc.n_gamma)
        x = np.concatenate([logs, gam])
        rates, _ = enc.decode_arrays(x)
        growth = rates[0] - rates[1 : 1 + A].sum()
        if growth * t_max > config.growth_horizon:
            continue
        if not config.growth_constraint or growth > 0:
            return x
    raise FitError("could not draw a restart point satisfying the growth constraint")


def _local_min(ctx: LossContext, x0, config: FitConfig):
    n_eval = [0]
    best = [math.inf, np.array(x0, dtype=float)]

    def f(x):
        n_eval[0] += 1
        v = ctx(x)
        if v < best[0]:
            best[0], best[1] = v, np.array(x, dtype=float)
        return v

    if not math.isfinite(f(x0)):
        return best[1], math.inf, "infeasible start", n_eval[0]
    status = "max-iter"
    for _ in range(max(1, config.polish)):
        before = best[0]
        if config.method == "nelder-mead":
            res = minimize(
                f,
                best[1],
                method="Nelder-Mead",
                options={
                    "xatol": config.xtol,
                    "fatol": config.ftol,
                    "maxiter": config.max_iter,
                    "maxfev": config.max_iter * 2,
                    "adaptive": ctx.encoding.size > 4,
                },
            )
        else:

            def g(x):
                v = f(x)
                return v if math.isfinite(v) else 1e12

            res = minimize(g, best[1], method="L-BFGS-B", options={"ftol": config.ftol, "maxiter": config.max_iter})
        status = "converged" if res.success else "max-iter"
        if before - best[0] <= config.ftol * max(1.0, abs(best[0])):
            break
    return best[1], best[0], status, n_eval[0]


def _check_identifiability(topology, fixed):
    free_mu = [n for n in mature_death_names(topology) if n not in fixed]
    if free_mu:
        warnings.warn(
            f"mature death rates {free_mu} are free; production and death rates are only "
            "identifiable up to a ratio",
            IdentifiabilityWarning,
            stacklevel=3,
        )


def fit(
    topology: ModelTopology,
    data: ReadDataset,
    fit_config: Optional[FitConfig] = None,
    fixed: Optional[Params] = None,
    *,
    starts: Sequence[Params] = (),
    context: Optional[LossContext] = None,
) -> FitResult:
    """Minimize the correlation loss over the free parameters.

    ``fixed`` supplies the values of every fixed parameter and the set of
    fixed names.  ``starts`` are warm starts evaluated before the random
    restarts (they count towards ``n_restarts``).
    """
    config = fit_config or FitConfig()
    if fixed is None:
        raise ValueError("a Params object naming the fixed parameters is required")
    ctx = context or LossContext.from_data(topology, fixed, data, config)
    enc = ctx.encoding
    if enc.size == 0:
        raise ValueError("at least one parameter must be free")
    _check_identifiability(topology, fixed.fixed)
    bounds = default_bounds(topology, fixed, config)

    warm = []
    for s in starts:
        merged = enc.decode(enc.encode(replace(s, fixed=fixed.fixed)))
        warm.append(enc.encode(merged))
    n_random = max(config.n_restarts - len(warm), 0)
    x0s = warm + [restart_start(enc, bounds, config, i, ctx.t_max) for i in range(n_random)]

    def run(i):
        x_end, obj, status, n_eval = _local_min(ctx, x0s[i], config)
        return i, x_end, obj, status, n_eval

    workers = _accel.n_threads()
    if workers > 1 and len(x0s) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(x0s))))
    else:
        results = [run(i) for i in range(len(x0s))]

    table = []
    best_i, best_obj = -1, math.inf
    for i, x_end, obj, status, n_eval in results:
        table.append(
            {
                "restart": i,
                "warm": i < len(warm),
                "start": x0s[i].tolist(),
                "end": x_end.tolist(),
                "objective": obj,
                "status": status,
                "n_eval": n_eval,
            }
        )
        # strict improvement beyond 1e-12 needed to displace a lower index
        if math.isfinite(obj) and (best_i < 0 or obj < best_obj - 1e-12):
            best_i, best_obj = i, obj
    if best_i < 0:
        raise FitError("every restart failed to reach a feasible point")
    theta = enc.decode(np.asarray(table[best_i]["end"]))
    objective = ctx.at(theta)
    out = ctx.model_psi(enc.rate_vector(theta), np.asarray(theta.pi))
    psi = out[0] if out is not None else model_correlations(topology, theta, theta.pi, ctx.times, ctx.b, ctx.B)[0]
    return FitResult(
        theta_hat=theta,
        objective=objective,
        restart_table=table,
        fitted_psi=psi,
        empirical_psi=ctx.psi_hat,
        valid=ctx.valid,
        times=ctx.times,
        pairs=tuple(topology.pairs()),
        free_names=tuple(free_param_names(topology, fixed.fixed)),
    )
