"""Closed-form first and second moments of the branching model.

Conditional means ``M[m|i](t)`` and second factorial moments
``U[mn|i](t) = E[X_m (X_n - 1{m=n}) | X(0) = e_i]`` are built as exponential
polynomials by solving the moment ODEs in dependency order
(matures -> progenitors -> HSC) with an integrating factor.  They are then
marginalized over the initial distribution and pushed through hypergeometric
blood sampling to give read-count correlations.

:func:`ode_oracle` integrates the same moment system numerically from the
reaction list and shares no code with the closed-form path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal, localcontext

import numpy as np
from scipy.integrate import solve_ivp

from ._accel import kernel
from .expsum import (
    MAX_POWER,
    RATE_TOL,
    ExpSum,
    PowerCapError,
    es_add,
    es_eval,
    es_mul_raw,
    es_normalize,
    es_scale,
    es_solve_raw,
)
from .model import ModelTopology, Params, build_reactions, check_topology

MAX_TERMS = 64
# Taylor jet length and the radius (max |rate| * t) inside which it is used;
# at rho = 1 the truncation error is below 1 / 24!
N_JET = 24
JET_RHO = 1.0
# Entries whose first-order rounding bound exceeds COND_MAX times their value
# are recomputed in decimal arithmetic with PRECISE_DIGITS digits.
COND_MAX = 1e5
PRECISE_DIGITS = 100
# correlations feed a statistical loss and need far fewer digits; past this
# bound the loss rejects the step instead of paying for the decimal path
PSI_COND_MAX = 1e10


# --------------------------------------------------------------------------
# compiled cascade
# --------------------------------------------------------------------------


@kernel
def _put(sc, sp, sr, sn, idx, c, p, r):
    n = c.shape[0]
    if n > sc.shape[1]:
        raise ValueError("moment expression exceeds term capacity")
    sc[idx, :n] = c
    sp[idx, :n] = p
    sr[idx, :n] = r
    sn[idx] = n


@kernel
def _pair_index(m, n, n_mat):
    # position of (m, n), m <= n, in the upper-triangular enumeration
    if m > n:
        m, n = n, m
    return m * n_mat - (m * (m - 1)) // 2 + (n - m)


@kernel
def _finish(c, p, r, absval):
    if absval:
        c = np.abs(c)
    return es_normalize(c, p, r)


@kernel
def _solve(kappa, c, p, r, absval):
    oc, op, orr = es_solve_raw(kappa, c, p, r, 0.0)
    return _finish(oc, op, orr, absval)


@kernel
def _mul(c1, p1, r1, c2, p2, r2, absval):
    c, p, r = es_mul_raw(c1, p1, r1, c2, p2, r2)
    return _finish(c, p, r, absval)


@kernel
def _cascade(lam, nu_prog, mu_prog, nu_mat, mu_mat, parent, absval):
    """All M[m|k] and U[mn|k] for initial compartments k = HSC, progenitors.

    Layout: M entries at ``k * n_mat + m``; U entries (m <= n) at
    ``n_m_entries + k * n_pairs + pair_index(m, n)``.

    With ``absval`` every intermediate coefficient is replaced by its absolute
    value before like terms merge, so the result bounds the size of what was
    summed into each coefficient (a first-order rounding-error scale).
    """
    n_prog = nu_prog.shape[0]
    n_mat = nu_mat.shape[0]
    n_init = 1 + n_prog
    n_pairs = n_mat * (n_mat + 1) // 2
    n_m = n_init * n_mat
    ne = n_m + n_init * n_pairs
    sc = np.zeros((ne, MAX_TERMS), dtype=np.float64)
    sp = np.zeros((ne, MAX_TERMS), dtype=np.int64)
    sr = np.zeros((ne, MAX_TERMS), dtype=np.float64)
    sn = np.zeros(ne, dtype=np.int64)

    kappa00 = lam
    for a in range(n_prog):
        kappa00 -= nu_prog[a]

    one_c = np.ones(1, dtype=np.float64)
    one_p = np.zeros(1, dtype=np.int64)

    # means from a progenitor: y' = -mu_a y + nu_m e^{-mu_m t}
    for a in range(n_prog):
        for m in range(n_mat):
            if parent[m] != a:
                continue
            f_r = np.full(1, -mu_mat[m])
            c, p, r = _solve(-mu_prog[a], nu_mat[m] * one_c, one_p, f_r, absval)
            _put(sc, sp, sr, sn, (1 + a) * n_mat + m, c, p, r)

    # means from an HSC: y' = kappa00 y + nu_a M[m|a]
    for m in range(n_mat):
        a = parent[m]
        idx_a = (1 + a) * n_mat + m
        k = sn[idx_a]
        c, p, r = _solve(kappa00, nu_prog[a] * sc[idx_a, :k], sp[idx_a, :k].copy(), sr[idx_a, :k].copy(), absval)
        _put(sc, sp, sr, sn, m, c, p, r)

    # second factorial moments from a progenitor
    for a in range(n_prog):
        for m in range(n_mat):
            if parent[m] != a:
                continue
            for n in range(m, n_mat):
                if parent[n] != a:
                    continue
                im = (1 + a) * n_mat + m
                inn = (1 + a) * n_mat + n
                km = sn[im]
                kn = sn[inn]
                # nu_m M[n|a] M[m|m] + nu_n M[m|a] M[n|n]
                c1, p1, r1 = sc[inn, :kn] * nu_mat[m], sp[inn, :kn], sr[inn, :kn] - mu_mat[m]
                c2, p2, r2 = sc[im, :km] * nu_mat[n], sp[im, :km], sr[im, :km] - mu_mat[n]
                fc, fp, fr = es_add(c1, p1.copy(), r1, c2, p2.copy(), r2)
                c, p, r = _solve(-mu_prog[a], fc, fp, fr, absval)
                _put(sc, sp, sr, sn, n_m + (1 + a) * n_pairs + _pair_index(m, n, n_mat), c, p, r)

    # second factorial moments from an HSC:
    # y' = kappa00 y + 2 lambda M[m|0] M[n|0] + sum_a nu_a U[mn|a]
    for m in range(n_mat):
        for n in range(m, n_mat):
            km = sn[m]
            kn = sn[n]
            fc, fp, fr = _mul(sc[m, :km], sp[m, :km], sr[m, :km], sc[n, :kn], sp[n, :kn], sr[n, :kn], absval)
            fc, fp, fr = es_scale(fc, fp, fr, 2.0 * lam)
            if parent[m] == parent[n]:
                a = parent[m]
                iu = n_m + (1 + a) * n_pairs + _pair_index(m, n, n_mat)
                ku = sn[iu]
                fc, fp, fr = es_add(fc, fp, fr, nu_prog[a] * sc[iu, :ku], sp[iu, :ku].copy(), sr[iu, :ku].copy())
            c, p, r = _solve(kappa00, fc, fp, fr, absval)
            _put(sc, sp, sr, sn, n_m + _pair_index(m, n, n_mat), c, p, r)
    return sc, sp, sr, sn


@kernel
def _jet_mul(x, y):
    n = x.shape[0]
    out = np.zeros(n)
    for i in range(n):
        if x[i] == 0.0:
            continue
        for j in range(n - i):
            out[i + j] += x[i] * y[j]
    return out


@kernel
def _jet_solve(kappa, f, y0):
    # y' = kappa y + f  =>  (n + 1) y_{n+1} = kappa y_n + f_n
    n = f.shape[0]
    y = np.zeros(n)
    y[0] = y0
    for i in range(n - 1):
        y[i + 1] = (kappa * y[i] + f[i]) / (i + 1)
    return y


@kernel
def _cascade_jets(lam, nu_prog, mu_prog, nu_mat, mu_mat, parent):
    """Taylor coefficients at t = 0 of every cascade entry (same layout).

    Built by the same recursion as the exponential forms, but term by term in
    powers of t, so nothing cancels near the origin.
    """
    n_prog = nu_prog.shape[0]
    n_mat = nu_mat.shape[0]
    n_init = 1 + n_prog
    n_pairs = n_mat * (n_mat + 1) // 2
    n_m = n_init * n_mat
    jets = np.zeros((n_m + n_init * n_pairs, N_JET))
    kappa00 = lam
    for a in range(n_prog):
        kappa00 -= nu_prog[a]
    # e^{-mu_m t}
    decay = np.zeros((n_mat, N_JET))
    for m in range(n_mat):
        decay[m] = _jet_solve(-mu_mat[m], np.zeros(N_JET), 1.0)
    for m in range(n_mat):
        a = parent[m]
        jets[(1 + a) * n_mat + m] = _jet_solve(-mu_prog[a], nu_mat[m] * decay[m], 0.0)
        jets[m] = _jet_solve(kappa00, nu_prog[a] * jets[(1 + a) * n_mat + m], 0.0)
    for m in range(n_mat):
        for n in range(m, n_mat):
            q = _pair_index(m, n, n_mat)
            f0 = 2.0 * lam * _jet_mul(jets[m], jets[n])
            if parent[m] == parent[n]:
                a = parent[m]
                im = (1 + a) * n_mat + m
                inn = (1 + a) * n_mat + n
                fa = nu_mat[m] * _jet_mul(jets[inn], decay[m]) + nu_mat[n] * _jet_mul(jets[im], decay[n])
                iu = n_m + (1 + a) * n_pairs + q
                jets[iu] = _jet_solve(-mu_prog[a], fa, 0.0)
                f0 += nu_prog[a] * jets[iu]
            jets[n_m + q] = _jet_solve(kappa00, f0, 0.0)
    return jets


@kernel
def _evaluate_store(sc, sp, sr, sn, mc, mp, mr, mn, jets, times):
    """Evaluate every entry at each of ``times``.

    The Taylor jet replaces the exponential form where
    ``max|rate| * t <= JET_RHO``, which is where the terms cancel.  Elsewhere
    ``cond`` is the magnitude-cascade value over ``|value|``: rounding error is
    about ``cond`` times machine epsilon (times a small constant).
    """
    ne = sn.shape[0]
    nt = times.shape[0]
    out = np.zeros((ne, nt), dtype=np.float64)
    cond = np.ones((ne, nt), dtype=np.float64)
    for e in range(ne):
        k = sn[e]
        if k == 0:
            continue
        rmax = 0.0
        for i in range(k):
            if abs(sr[e, i]) > rmax:
                rmax = abs(sr[e, i])
        far_idx = np.empty(nt, dtype=np.int64)
        n_far = 0
        for j in range(nt):
            t = times[j]
            if rmax * t <= JET_RHO:
                acc = 0.0
                for i in range(N_JET - 1, -1, -1):
                    acc = acc * t + jets[e, i]
                out[e, j] = acc
            else:
                far_idx[n_far] = j
                n_far += 1
        if n_far > 0:
            tf = times[far_idx[:n_far]]
            far = es_eval(sc[e, :k], sp[e, :k], sr[e, :k], tf)
            km = mn[e]
            bound = es_eval(mc[e, :km], mp[e, :km], mr[e, :km], tf)
            for q in range(n_far):
                out[e, far_idx[q]] = far[q]
                if bound[q] > 0.0:
                    cond[e, far_idx[q]] = bound[q] / max(abs(far[q]), 1e-300)
    return out, cond


@kernel
def _latent_from_values(vals, pi, n_mat):
    """Marginal mean and covariance of mature counts at each time.

    Returns mean[m, j] and cov[m, n, j].
    """
    n_init = pi.shape[0]
    n_pairs = n_mat * (n_mat + 1) // 2
    n_m = n_init * n_mat
    nt = vals.shape[1]
    mean = np.zeros((n_mat, nt))
    cov = np.zeros((n_mat, n_mat, nt))
    for m in range(n_mat):
        for k in range(n_init):
            mean[m] += pi[k] * vals[k * n_mat + m]
    for m in range(n_mat):
        for n in range(m, n_mat):
            q = _pair_index(m, n, n_mat)
            second = np.zeros(nt)
            for k in range(n_init):
                second += pi[k] * vals[n_m + k * n_pairs + q]
                if m == n:
                    second += pi[k] * vals[k * n_mat + m]
            # law of total (co)variance; E[X_m X_n] - E[X_m] E[X_n]
            cov[m, n] = second - mean[m] * mean[n]
            cov[n, m] = cov[m, n]
    return mean, cov


@kernel
def _observed_from_latent(mean, cov, b, B):
    """Read-level covariance with hypergeometric sampling; B[j, m] per time."""
    n_mat = mean.shape[0]
    nt = mean.shape[1]
    ocov = np.zeros((n_mat, n_mat, nt))
    for j in range(nt):
        for m in range(n_mat):
            Bm = B[j, m]
            bm = b[m]
            f1 = bm * (Bm - bm) / (Bm * (Bm - 1.0))
            f2 = bm * (Bm - bm) / (Bm * Bm * (Bm - 1.0))
            ex2 = cov[m, m, j] + mean[m, j] * mean[m, j]
            ocov[m, m, j] = f1 * mean[m, j] - f2 * ex2 + (bm * bm) / (Bm * Bm) * cov[m, m, j]
            for n in range(m + 1, n_mat):
                v = bm * b[n] / (Bm * B[j, n]) * cov[m, n, j]
                ocov[m, n, j] = v
                ocov[n, m, j] = v
    return ocov


@kernel
def _corr_pairs(ocov):
    n_mat = ocov.shape[0]
    nt = ocov.shape[2]
    n_pairs = n_mat * (n_mat - 1) // 2
    psi = np.zeros((n_pairs, nt))
    valid = np.zeros((n_pairs, nt), dtype=np.bool_)
    q = 0
    for m in range(n_mat):
        for n in range(m + 1, n_mat):
            for j in range(nt):
                vm = ocov[m, m, j]
                vn = ocov[n, n, j]
                if vm > 0.0 and vn > 0.0:
                    psi[q, j] = ocov[m, n, j] / (np.sqrt(vm) * np.sqrt(vn))
                    valid[q, j] = True
            q += 1
    return psi, valid


@kernel
def psi_from_values(vals, pi, b, B):
    mean, cov = _latent_from_values(vals, pi, b.shape[0])
    ocov = _observed_from_latent(mean, cov, b, B)
    return _corr_pairs(ocov)


@kernel
def _cascade_values(lam, nu_prog, mu_prog, nu_mat, mu_mat, parent, times):
    sc, sp, sr, sn = _cascade(lam, nu_prog, mu_prog, nu_mat, mu_mat, parent, False)
    mc, mp, mr, mn = _cascade(lam, nu_prog, mu_prog, nu_mat, mu_mat, parent, True)
    jets = _cascade_jets(lam, nu_prog, mu_prog, nu_mat, mu_mat, parent)
    return _evaluate_store(sc, sp, sr, sn, mc, mp, mr, mn, jets, times)


@kernel
def psi_kernel(lam, nu_prog, mu_prog, nu_mat, mu_mat, parent, pi, times, b, B):
    """Model read-count correlations for every pair m < n at each time, plus
    the worst conditioning over the moment entries used."""
    vals, cond = _cascade_values(lam, nu_prog, mu_prog, nu_mat, mu_mat, parent, times)
    psi, valid = psi_from_values(vals, pi, b, B)
    return psi, valid, cond.max()


def model_psi(lam, nu_prog, mu_prog, nu_mat, mu_mat, parent, pi, times, b, B, cond_max=COND_MAX, fallback=True):
    """:func:`psi_kernel` with the decimal fallback for ill-conditioned
    parameter sets.  With ``fallback=False`` such sets return ``None``."""
    psi, valid, worst = psi_kernel(lam, nu_prog, mu_prog, nu_mat, mu_mat, parent, pi, times, b, B)
    if worst <= cond_max:
        return psi, valid
    if not fallback:
        return None
    vals = precise_values(lam, nu_prog, mu_prog, nu_mat, mu_mat, parent, times)
    return psi_from_values(vals, pi, b, B)


def _rate_arrays(topology: ModelTopology, params: Params):
    return (
        float(params.lam),
        np.asarray(params.nu_prog, dtype=float),
        np.asarray(params.mu_prog, dtype=float),
        np.asarray(params.nu_mat, dtype=float),
        np.asarray(params.mu_mat, dtype=float),
        topology.parent_index(),
    )


# --------------------------------------------------------------------------
# public value types
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MomentSet:
    """Closed-form conditional moments keyed by compartment id.

    ``M[(m, i)]`` and ``U[(m, n, i)]`` (with ``m <= n`` in declaration order)
    hold ExpSums; sources ``i`` range over every compartment.  Numerical
    values should come from :meth:`values`, which switches to the Taylor jet
    close to ``t = 0`` where the exponential terms cancel.
    """

    topology: ModelTopology
    M: dict
    U: dict
    kappas: dict
    kappas2: dict
    _store: tuple = field(repr=False, default=())
    _rates: tuple = field(repr=False, default=())

    def mean(self, m, i) -> ExpSum:
        return self.M[(str(m), str(i))]

    def fact2(self, m, n, i) -> ExpSum:
        order = self.topology.matures
        m, n = str(m), str(n)
        if order.index(m) > order.index(n):
            m, n = n, m
        return self.U[(m, n, str(i))]

    def values(self, times):
        """Arrays M[k, m, j] and U[k, m, n, j] over initial compartments k."""
        topo = self.topology
        t = np.ascontiguousarray(np.atleast_1d(np.asarray(times, dtype=float)))
        if np.any(t < 0):
            raise ValueError("times must be non-negative")
        K, Mm = topo.n_init, topo.n_mat
        vals, cond = _evaluate_store(*self._store, t)
        bad = cond > COND_MAX
        if bad.any():
            vals = np.where(bad, precise_values(*self._rates, t), vals)
        n_m = K * Mm
        Mv = vals[:n_m].reshape(K, Mm, t.size)
        Uv = np.zeros((K, Mm, Mm, t.size))
        iu, ju = np.triu_indices(Mm)
        Uv[:, iu, ju] = vals[n_m:].reshape(K, -1, t.size)
        Uv[:, ju, iu] = Uv[:, iu, ju]
        return Mv, Uv


def kappa_tables(topology: ModelTopology, params: Params):
    """kappa_ij = du_i/ds_j and kappa_{i,jk} = d2u_i/ds_j ds_k at s = 1."""
    ids = topology.compartments
    k1, k2 = {}, {}
    A = topology.n_prog
    hsc = topology.hsc
    k1[(hsc, hsc)] = params.growth
    k2[(hsc, hsc, hsc)] = 2.0 * params.lam
    for i, a in enumerate(topology.progenitors):
        k1[(hsc, a)] = params.nu_prog[i]
        k1[(a, a)] = -params.mu_prog[i]
    for k, m in enumerate(topology.matures):
        a = topology.parent[m]
        k1[(a, m)] = params.nu_mat[k]
        k1[(m, m)] = -params.mu_mat[k]
        k2[(a, a, m)] = k2[(a, m, a)] = params.nu_mat[k]
    del ids, A
    return k1, k2


def build_moment_set(topology: ModelTopology, params: Params) -> MomentSet:
    check_topology(topology)
    params.check(topology)
    try:
        rates = _rate_arrays(topology, params)
        sc, sp, sr, sn = _cascade(*rates, False)
        mags = _cascade(*rates, True)
        jets = _cascade_jets(*rates)
    except ValueError as exc:
        raise PowerCapError(str(exc)) from None
    Mm = topology.n_mat
    K = topology.n_init
    n_pairs = Mm * (Mm + 1) // 2
    n_m = K * Mm
    mats = topology.matures
    init = topology.compartments[:K]

    def es(idx):
        k = sn[idx]
        return ExpSum._wrap((sc[idx, :k].copy(), sp[idx, :k].copy(), sr[idx, :k].copy()))

    def pair_index(a, b_):
        return a * Mm - (a * (a - 1)) // 2 + (b_ - a)

    M, U = {}, {}
    for k, src in enumerate(init):
        for a, m in enumerate(mats):
            M[(m, src)] = es(k * Mm + a)
            for b_ in range(a, Mm):
                U[(m, mats[b_], src)] = es(n_m + k * n_pairs + pair_index(a, b_))
    for a, src in enumerate(mats):
        for b_, m in enumerate(mats):
            M[(m, src)] = ExpSum.exp(-params.mu_mat[a]) if a == b_ else ExpSum.zero()
        for x in range(Mm):
            for y in range(x, Mm):
                U[(mats[x], mats[y], src)] = ExpSum.zero()
    k1, k2 = kappa_tables(topology, params)
    return MomentSet(topology, M, U, k1, k2, (sc, sp, sr, sn, *mags, jets), rates)


@dataclass(frozen=True)
class LatentMoments:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class ObservedMoments:
    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray
    corr: np.ndarray
    corr_defined: np.ndarray


def latent_moments(mset: MomentSet, pi, t: float) -> LatentMoments:
    """Mean vector and covariance matrix of mature counts at time ``t``,
    marginalized over the initial compartment distribution ``pi``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    pi = np.asarray(pi, dtype=float)
    Mv, Uv = mset.values([t])
    Mv, Uv = Mv[..., 0], Uv[..., 0]
    mean = pi @ Mv
    second = np.einsum("k,kmn->mn", pi, Uv) + np.diag(pi @ Mv)
    cov = second - np.outer(mean, mean)
    return LatentMoments(mean, (cov + cov.T) / 2)


def observed_moments(lm: LatentMoments, b, B) -> ObservedMoments:
    """Moments of read counts after sampling ``b_m`` of ``B_m`` type-m cells.

    ``B`` is held fixed (known circulating totals).
    """
    b = np.asarray(b, dtype=float)
    B = np.asarray(B, dtype=float)
    if np.any(B < 2):
        raise ValueError("B_m must be at least 2")
    if np.any(b > B):
        raise ValueError("sample size b_m exceeds population B_m")
    if np.any(b <= 0):
        raise ValueError("sample sizes must be positive")
    ocov = _observed_from_latent(lm.mean[:, None], lm.cov[:, :, None], b, B[None, :])[:, :, 0]
    var = np.diag(ocov).copy()
    sd = np.sqrt(np.clip(var, 0.0, None))
    defined = np.outer(var > 0, var > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(defined, ocov / np.outer(sd, sd), 0.0)
    return ObservedMoments(lm.mean * b / B, var, ocov, corr, defined)


def model_correlations(topology, params, pi, times, b, B_per_time):
    """Model correlations psi[pair, j] for pairs m < n and a validity mask.

    ``B_per_time[j, m]`` are the circulating totals at each observation time.
    Cells with a zero-variance margin are marked invalid and set to 0.
    """
    times = np.ascontiguousarray(np.asarray(times, dtype=float))
    b = np.asarray(b, dtype=float)
    B = np.ascontiguousarray(np.asarray(B_per_time, dtype=float))
    if B.shape != (times.size, topology.n_mat):
        raise ValueError("B_per_time must have shape (n_times, n_mature)")
    if np.any(B < 2):
        raise ValueError("B_m must be at least 2")
    if np.any(b[None, :] > B):
        raise ValueError("sample size b_m exceeds population B_m")
    pi = np.asarray(pi if pi is not None else params.pi, dtype=float)
    return model_psi(*_rate_arrays(topology, params), pi, times, b, B)


# --------------------------------------------------------------------------
# decimal fallback
# --------------------------------------------------------------------------
# Terms are lists of (coefficient, power, rate) in Decimal; the operations
# mirror the compiled kernels, including the rate tolerance for coincidences.

_D_TOL = Decimal(RATE_TOL)


def _d_norm(terms):
    out = []
    for c, p, r in terms:
        if c == 0:
            continue
        for q, (c2, p2, r2) in enumerate(out):
            if p2 == p and abs(r2 - r) <= _D_TOL:
                out[q] = (c2 + c, p2, r2)
                break
        else:
            out.append((c, p, r))
    return [t for t in out if t[0] != 0]


def _d_solve(kappa, terms):
    out = []
    for c, k, r in terms:
        s = r - kappa
        if abs(s) <= _D_TOL:
            if k + 1 > MAX_POWER:
                raise PowerCapError("exponential polynomial power cap exceeded")
            out.append((c / (k + 1), k + 1, kappa))
            continue
        kf = math.factorial(k)
        for j in range(k + 1):
            sign = 1 if (k - j) % 2 == 0 else -1
            out.append((c * sign * kf / (math.factorial(j) * s ** (k - j + 1)), j, r))
        sign = 1 if k % 2 == 0 else -1
        out.append((-c * sign * kf / s ** (k + 1), 0, kappa))
    return _d_norm(out)


def _d_mul(f, g):
    return _d_norm([(c1 * c2, p1 + p2, r1 + r2) for c1, p1, r1 in f for c2, p2, r2 in g])


def _d_eval(terms, t):
    return sum((c * t**p * (r * t).exp() for c, p, r in terms), Decimal(0))


def precise_values(lam, nu_prog, mu_prog, nu_mat, mu_mat, parent, times) -> np.ndarray:
    """Cascade values in the :func:`_cascade` layout, computed in decimal
    arithmetic (slow; used only for ill-conditioned entries)."""
    D = Decimal
    with localcontext() as ctx:
        ctx.prec = PRECISE_DIGITS
        nu_a = [D(float(x)) for x in nu_prog]
        mu_a = [D(float(x)) for x in mu_prog]
        nu_m = [D(float(x)) for x in nu_mat]
        mu_m = [D(float(x)) for x in mu_mat]
        lam_d = D(float(lam))
        A, Mm = len(nu_a), len(nu_m)
        K = 1 + A
        n_pairs = Mm * (Mm + 1) // 2
        n_m = K * Mm
        kappa00 = lam_d - sum(nu_a, D(0))
        store = [[] for _ in range(n_m + K * n_pairs)]

        def pidx(m, n):
            return m * Mm - (m * (m - 1)) // 2 + (n - m)

        for m in range(Mm):
            a = int(parent[m])
            store[(1 + a) * Mm + m] = _d_solve(-mu_a[a], [(nu_m[m], 0, -mu_m[m])])
            store[m] = _d_solve(kappa00, [(nu_a[a] * c, p, r) for c, p, r in store[(1 + a) * Mm + m]])
        for m in range(Mm):
            for n in range(m, Mm):
                a = int(parent[m])
                f0 = [(2 * lam_d * c, p, r) for c, p, r in _d_mul(store[m], store[n])]
                if parent[n] == parent[m]:
                    fa = [(nu_m[m] * c, p, r - mu_m[m]) for c, p, r in store[(1 + a) * Mm + n]]
                    fa += [(nu_m[n] * c, p, r - mu_m[n]) for c, p, r in store[(1 + a) * Mm + m]]
                    iu = n_m + (1 + a) * n_pairs + pidx(m, n)
                    store[iu] = _d_solve(-mu_a[a], _d_norm(fa))
                    f0 += [(nu_a[a] * c, p, r) for c, p, r in store[iu]]
                store[n_m + pidx(m, n)] = _d_solve(kappa00, _d_norm(f0))
        ts = [D(float(t)) for t in np.atleast_1d(times)]
        return np.array([[float(_d_eval(e, t)) for t in ts] for e in store])


# --------------------------------------------------------------------------
# numerical oracle
# --------------------------------------------------------------------------


def generator_tables(topology: ModelTopology, params: Params):
    """First and second derivatives of the pseudo-generating functions at 1,
    assembled from the reaction list (offspring = parent + delta)."""
    C = topology.n_types
    K1 = np.zeros((C, C))
    K2 = np.zeros((C, C, C))
    for rx in build_reactions(topology, params):
        i = rx.parent
        off = np.array(rx.delta, dtype=float)
        off[i] += 1.0
        # u_i(s) gains rate * (prod_j s_j^off_j - s_i)
        K1[i] += rx.rate_per_cell * off
        K1[i, i] -= rx.rate_per_cell
        K2[i] += rx.rate_per_cell * (np.outer(off, off) - np.diag(off))
    return K1, K2


def ode_oracle(topology: ModelTopology, params: Params, t_grid, rtol=1e-10, atol=1e-14):
    """Integrate the full first/second moment ODE system with RK45.

    Returns ``(M, U)`` with ``M[j, i, m] = M[m|i](t_j)`` and
    ``U[j, i, m, n] = U[mn|i](t_j)`` over all compartments.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0 or t_grid[0] < 0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be increasing and start at or after 0")
    K1, K2 = generator_tables(topology, params)
    C = K1.shape[0]

    def rhs(_t, y):
        M = y[: C * C].reshape(C, C)
        U = y[C * C :].reshape(C, C * C)
        dM = K1 @ M
        # sum_jk K2[i, j, k] M[j, m] M[k, n]
        T = np.tensordot(K2, M, axes=([1], [0]))  # (i, k, m)
        quad = np.matmul(T.transpose(0, 2, 1), M)  # (i, m, n)
        dU = K1 @ U + quad.reshape(C, C * C)
        return np.concatenate([dM.ravel(), dU.ravel()])

    y0 = np.concatenate([np.eye(C).ravel(), np.zeros(C**3)])
    n_out = t_grid.size
    Mo = np.zeros((n_out, C, C))
    Uo = np.zeros((n_out, C, C, C))
    start = 0
    if t_grid[0] == 0.0:
        Mo[0] = np.eye(C)
        start = 1
    if start < n_out:
        sol = solve_ivp(
            rhs,
            (0.0, t_grid[-1]),
            y0,
            method="RK45",
            t_eval=t_grid[start:],
            rtol=rtol,
            atol=atol,
        )
        if not sol.success:
            raise RuntimeError(f"moment ODE integration failed: {sol.message}")
        Y = sol.y.T
        Mo[start:] = Y[:, : C * C].reshape(-1, C, C)
        Uo[start:] = Y[:, C * C :].reshape(-1, C, C, C)
    return Mo, Uo


ORACLE_TIMES = (0.5, 1.0, 2.0, 5.0, 10.0, 30.0)
ORACLE_FLOOR = 1e-6


def oracle_error(topology: ModelTopology, params: Params, times=ORACLE_TIMES, floor=ORACLE_FLOOR) -> float:
    """Largest elementwise relative gap between closed-form and integrated
    moments (started from HSC or a progenitor, read on the matures).

    Relative errors use ``max(|oracle|, floor)`` as the denominator so that
    entries near zero are compared on an absolute scale.
    """
    times = np.asarray(times, dtype=float)
    Mv, Uv = build_moment_set(topology, params).values(times)
    Mo, Uo = ode_oracle(topology, params, times)
    K, A = topology.n_init, topology.n_prog
    sl = slice(1 + A, None)
    Mo = np.moveaxis(Mo[:, :K, sl], 0, -1)
    Uo = np.moveaxis(Uo[:, :K, sl, sl], 0, -1)
    em = np.abs(Mv - Mo) / np.maximum(np.abs(Mo), floor)
    eu = np.abs(Uv - Uo) / np.maximum(np.abs(Uo), floor)
    return float(max(em.max(), eu.max()))


def random_params(topology: ModelTopology, rng, coincide: str = "", horizon: float = 30.0) -> Params:
    """Rates log-uniform on [1e-3, 50] with HSC growth below 5 / ``horizon``.

    ``coincide`` forces exact rate coincidences: ``"mature"`` sets the first
    mature death rate equal to its progenitor's, ``"hsc"`` makes the HSC net
    rate equal minus a progenitor death rate, ``"both"`` does both.
    """

    def lu(n):
        return np.exp(rng.uniform(np.log(1e-3), np.log(50.0), n))

    A, M = topology.n_prog, topology.n_mat
    while True:
        lam, nu, mu_a = lu(1)[0], lu(A), lu(A)
        if coincide in ("hsc", "both"):
            # lambda - sum(nu) = -mu_a[0]
            if nu.sum() <= mu_a[0]:
                continue
            lam = nu.sum() - mu_a[0]
        if (lam - nu.sum()) * horizon < 5.0:
            break
    mu_m = lu(M)
    if coincide in ("mature", "both"):
        mu_m[0] = mu_a[topology.parent_index()[0]]
    pi = rng.dirichlet(np.ones(topology.n_init))
    return Params(lam, nu, mu_a, lu(M), mu_m, pi)


def oracle_suite(models="acf", n_draws: int = 20, seed: int = 0) -> dict:
    """Max oracle error per canonical model over random draws; the first two
    draws of each model carry exact rate coincidences."""
    from .model import canonical_model

    rng = np.random.default_rng(seed)
    out = {}
    for name in models:
        topo = canonical_model(name)
        kinds = ["mature", "hsc"] + [""] * max(n_draws - 2, 0)
        out[name] = max(oracle_error(topo, random_params(topo, rng, k)) for k in kinds[:n_draws])
    return out
