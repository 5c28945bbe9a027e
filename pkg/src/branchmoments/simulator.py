"""Exact simulation of barcoded lineages and of the blood-sampling pipeline.

Every lineage draws its uniforms from a counter-based stream keyed by
``(seed, lineage index)``, so results do not depend on scheduling or on the
number of worker threads.  The compiled kernel walks lineages in parallel;
the pure-numpy fallback advances all lineages in lock-step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _accel
from ._accel import kernel, prange
from .model import ModelTopology, Params, build_reactions, check_topology, reaction_arrays

# eleven uneven sampling times over two years, in 5-day units
# (days 60, 90, 135, 180, 240, 300, 375, 450, 540, 630, 730)
STANDARD_SCHEDULE = (12.0, 18.0, 27.0, 36.0, 48.0, 60.0, 75.0, 90.0, 108.0, 126.0, 146.0)
MAX_EVENTS = 10_000_000

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


class SimulationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# counter-based uniforms (splitmix64 finalizer)
# --------------------------------------------------------------------------


@kernel
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@kernel
def _lineage_key(seed, lineage):
    return _mix(np.uint64(seed) ^ _mix(np.uint64(lineage) * _GOLDEN + _GOLDEN))


@kernel
def _uniform(key, counter):
    # open interval (0, 1): 53 random bits plus half an ulp
    x = _mix(key + (np.uint64(counter) + np.uint64(1)) * _GOLDEN)
    return (float(x >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)


def _mix_np(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _uniform_np(keys, counters):
    x = _mix_np(keys + (counters.astype(np.uint64) + np.uint64(1)) * _GOLDEN)
    return ((x >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def lineage_keys(seed: int, n: int, offset: int = 0) -> np.ndarray:
    idx = np.arange(offset, offset + n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix_np(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _mix_np(idx * _GOLDEN + _GOLDEN))


# --------------------------------------------------------------------------
# Gillespie direct method
# --------------------------------------------------------------------------


@kernel
def _ssa_one(key, x, parent, delta, rate, obs, out, max_events):
    """Advance one lineage from state ``x`` (modified in place), writing the
    state at each observation time into ``out[j]``.

    Returns the number of events, or -1 when the event cap was hit.
    """
    n_rx = rate.shape[0]
    n_obs = obs.shape[0]
    t = 0.0
    j = 0
    k = 0
    while j < n_obs:
        total = 0.0
        for r in range(n_rx):
            total += x[parent[r]] * rate[r]
        if total <= 0.0:
            # absorbed (or frozen): the state persists
            while j < n_obs:
                out[j, :] = x
                j += 1
            break
        u1 = _uniform(key, 2 * k + 1)
        u2 = _uniform(key, 2 * k + 2)
        t_new = t - math.log(u1) / total
        while j < n_obs and obs[j] < t_new:
            out[j, :] = x
            j += 1
        if j == n_obs:
            break
        target = u2 * total
        acc = 0.0
        chosen = -1
        for r in range(n_rx):
            w = x[parent[r]] * rate[r]
            if w > 0.0:
                chosen = r
                acc += w
                if target < acc:
                    break
        for c in range(x.shape[0]):
            x[c] += delta[chosen, c]
        t = t_new
        k += 1
        if k >= max_events:
            return -1
    return k


@kernel
def _pick_initial(key, pi_cum):
    u = _uniform(key, 0)
    for i in range(pi_cum.shape[0]):
        if u < pi_cum[i]:
            return i
    return pi_cum.shape[0] - 1


@kernel(parallel=True)
def _ssa_many(keys, init_index, parent, delta, rate, obs, n_types, max_events):
    n = keys.shape[0]
    out = np.zeros((n, obs.shape[0], n_types), dtype=np.int64)
    n_events = np.zeros(n, dtype=np.int64)
    for p in prange(n):
        x = np.zeros(n_types, dtype=np.int64)
        x[init_index[p]] = 1
        n_events[p] = _ssa_one(keys[p], x, parent, delta, rate, obs, out[p], max_events)
    return out, n_events


@kernel
def _initial_compartments(keys, pi_cum):
    n = keys.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for p in range(n):
        out[p] = _pick_initial(keys[p], pi_cum)
    return out


def _ssa_many_numpy(keys, init_index, parent, delta, rate, obs, n_types, max_events):
    """Lock-step vectorized version of :func:`_ssa_many`."""
    n = keys.shape[0]
    n_obs = obs.shape[0]
    out = np.zeros((n, n_obs, n_types), dtype=np.int64)
    x = np.zeros((n, n_types), dtype=np.int64)
    x[np.arange(n), init_index] = 1
    t = np.zeros(n)
    j = np.zeros(n, dtype=np.int64)
    k = np.zeros(n, dtype=np.int64)
    n_events = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    with np.errstate(over="ignore"):
        while active.size:
            xa = x[active]
            props = xa[:, parent] * rate
            total = np.zeros(active.size)
            for r in range(rate.shape[0]):
                total += props[:, r]
            dead = total <= 0.0
            if dead.any():
                for p in active[dead]:
                    out[p, j[p] :] = x[p]
                    j[p] = n_obs
                    n_events[p] = k[p]
            live = active[~dead]
            if not live.size:
                break
            tot = total[~dead]
            props = props[~dead]
            u1 = _uniform_np(keys[live], 2 * k[live] + 1)
            u2 = _uniform_np(keys[live], 2 * k[live] + 2)
            t_new = t[live] - np.log(u1) / tot
            while True:
                jj = j[live]
                rec = jj < n_obs
                rec[rec] = obs[jj[rec]] < t_new[rec]
                if not rec.any():
                    break
                out[live[rec], jj[rec]] = x[live[rec]]
                j[live[rec]] += 1
            done = j[live] == n_obs
            n_events[live[done]] = k[live[done]]
            go = ~done
            live, tot, props, u2, t_new = live[go], tot[go], props[go], u2[go], t_new[go]
            if live.size:
                target = u2 * tot
                # first reaction whose running propensity sum exceeds the
                # target; fall back to the last one with positive propensity
                acc = np.zeros(live.size)
                chosen = np.full(live.size, -1)
                last_pos = np.full(live.size, -1)
                for r in range(rate.shape[0]):
                    w = props[:, r]
                    pos = w > 0.0
                    acc = acc + w
                    last_pos = np.where(pos, r, last_pos)
                    chosen = np.where(pos & (chosen < 0) & (target < acc), r, chosen)
                chosen = np.where(chosen < 0, last_pos, chosen)
                x[live] += delta[chosen]
                t[live] = t_new
                k[live] += 1
                over = k[live] >= max_events
                if over.any():
                    n_events[live[over]] = -1
                    j[live[over]] = n_obs
                active = live[~over]
            else:
                active = live
    return out, n_events


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------


def _prepare(topology, params):
    check_topology(topology)
    params.check(topology)
    parent, delta, rate = reaction_arrays(build_reactions(topology, params))
    return parent, delta, rate


def _check_times(obs_times):
    obs = np.ascontiguousarray(np.asarray(obs_times, dtype=float).reshape(-1))
    if obs.size == 0 or np.any(obs < 0) or np.any(np.diff(obs) <= 0):
        raise ValueError("observation times must be non-negative and strictly increasing")
    return obs


def simulate_lineages(topology, params, init_index, obs_times, seed, *, offset=0, max_events=MAX_EVENTS):
    """Simulate one lineage per entry of ``init_index`` (compartment positions).

    Returns ``(counts[N, J, C], n_events[N])``.  Lineage ``p`` uses the stream
    keyed by ``(seed, offset + p)``.
    """
    parent, delta, rate = _prepare(topology, params)
    obs = _check_times(obs_times)
    init_index = np.ascontiguousarray(np.asarray(init_index, dtype=np.int64))
    keys = lineage_keys(seed, init_index.size, offset)
    fn = _ssa_many if _accel.USE_NUMBA else _ssa_many_numpy
    counts, n_events = fn(keys, init_index, parent, delta, rate, obs, topology.n_types, int(max_events))
    bad = np.flatnonzero(n_events < 0)
    if bad.size:
        p = int(bad[0])
        raise SimulationError(
            f"lineage {offset + p} exceeded {max_events} events "
            f"({bad.size} lineages affected); last recorded state {counts[p, -1].tolist()}"
        )
    return counts, n_events


def simulate_lineage(topology, params, init_compartment, obs_times, rng=0, *, max_events=MAX_EVENTS):
    """J x C count matrix for a single lineage started from one cell.

    ``init_compartment`` is a compartment id or position; ``rng`` is an
    integer seed, or a numpy Generator from which a seed is drawn.
    """
    if isinstance(init_compartment, str):
        init = topology.index(init_compartment)
    else:
        init = int(init_compartment)
    if not 0 <= init < topology.n_init:
        raise ValueError("lineages must start in the HSC or a progenitor compartment")
    seed = int(rng.integers(0, 2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    counts, _ = simulate_lineages(topology, params, [init], obs_times, seed, max_events=max_events)
    return counts[0]


def draw_initial(pi, n, seed, offset=0):
    """Initial compartment position per lineage from the counter streams."""
    pi = np.asarray(pi, dtype=float)
    pi_cum = np.cumsum(pi)
    pi_cum[-1] = 1.0
    keys = lineage_keys(seed, n, offset)
    if _accel.USE_NUMBA:
        return _initial_compartments(keys, pi_cum)
    u = _uniform_np(keys, np.zeros(n, dtype=np.int64))
    return np.minimum(np.searchsorted(pi_cum, u, side="right"), pi.size - 1).astype(np.int64)


def mvhypergeom_sample(population, b, rng):
    """Multivariate hypergeometric draw of ``b`` items without replacement.

    Uses the sequential conditional (marginals) method so large populations
    are cheap.
    """
    x = np.asarray(population, dtype=np.int64)
    if np.any(x < 0):
        raise ValueError("population counts must be non-negative")
    total = int(x.sum())
    b = int(b)
    if b < 0 or b > total:
        raise ValueError(f"sample size {b} exceeds population {total}")
    if b == total:
        return x.copy()
    if b == 0 or x.size == 0:
        return np.zeros_like(x)
    return rng.multivariate_hypergeometric(x, b, method="marginals").astype(np.int64)


def sampling_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, tags)])))


@dataclass(frozen=True)
class SimConfig:
    """Settings for :func:`simulate_dataset`.

    ``pcr`` is a J x M array of amplification constants (default all ones).
    ``filter_mode`` is ``"max"`` (any single (type, time) cell reaches the
    threshold) or ``"sum"`` (reads summed over types at some time).
    """

    n_lineages: int
    obs_times: tuple = STANDARD_SCHEDULE
    seed: int = 0
    pi: Optional[tuple] = None
    sample_sizes: Optional[tuple] = None
    pcr: Optional[np.ndarray] = None
    read_filter_threshold: float = 1000.0
    filter_mode: str = "max"
    max_events: int = MAX_EVENTS
    t_max: float = 1e4

    def __post_init__(self):
        obs = _check_times(self.obs_times)
        object.__setattr__(self, "obs_times", tuple(float(t) for t in obs))
        if self.n_lineages < 1:
            raise ValueError("n_lineages must be positive")
        if obs[-1] > self.t_max:
            raise ValueError("last observation time exceeds t_max")
        if self.sample_sizes is not None:
            b = tuple(int(v) for v in self.sample_sizes)
            if any(v < 0 for v in b):
                raise ValueError("sample sizes must be non-negative")
            object.__setattr__(self, "sample_sizes", b)
        if self.filter_mode not in ("max", "sum"):
            raise ValueError("filter_mode must be 'max' or 'sum'")


@dataclass(frozen=True, eq=False)
class ReadDataset:
    """Observed read counts ``reads[p, j, m]`` with CBC totals ``B[j, m]``."""

    reads: np.ndarray
    times: np.ndarray
    B: np.ndarray
    b: np.ndarray
    barcode_ids: np.ndarray
    cell_types: tuple = field(default=())

    def __post_init__(self):
        reads = np.asarray(self.reads)
        if reads.ndim != 3:
            raise ValueError("reads must be a 3-D array (barcode, time, type)")
        if np.any(reads < 0):
            raise ValueError("read counts must be non-negative")
        N, J, M = reads.shape
        times = np.asarray(self.times, dtype=float)
        B = np.asarray(self.B, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if times.shape != (J,) or B.shape != (J, M) or b.shape != (M,):
            raise ValueError("times, B and b do not match the reads array")
        ids = np.asarray(self.barcode_ids)
        if ids.shape != (N,):
            raise ValueError("one barcode id per row is required")
        types = tuple(str(c) for c in self.cell_types) or tuple(str(i + 1) for i in range(M))
        if len(types) != M:
            raise ValueError("cell_types must name every mature type")
        for name, val in (("reads", reads), ("times", times), ("B", B), ("b", b), ("barcode_ids", ids)):
            val = np.array(val, copy=True)
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "cell_types", types)

    @property
    def n_barcodes(self) -> int:
        return self.reads.shape[0]

    def subset(self, rows) -> "ReadDataset":
        rows = np.asarray(rows)
        return replace(self, reads=self.reads[rows], barcode_ids=self.barcode_ids[rows])

    def with_reads(self, reads) -> "ReadDataset":
        return replace(self, reads=reads, barcode_ids=np.arange(len(reads)) if len(reads) != self.n_barcodes else self.barcode_ids)

    def drop_times(self, times, atol=1e-9) -> "ReadDataset":
        keep = np.array([not np.any(np.abs(np.asarray(times, dtype=float) - t) <= atol) for t in self.times])
        if not keep.any():
            raise ValueError("every observation time would be excluded")
        return replace(self, reads=self.reads[:, keep], times=self.times[keep], B=self.B[keep])


def simulate_latent(topology, params, n, obs_times, seed, pi=None, *, max_events=MAX_EVENTS):
    """Mature counts ``X[p, j, m]`` for ``n`` lineages with initial cells ~ pi."""
    pi = params.pi if pi is None else pi
    init = draw_initial(pi, n, seed)
    counts, _ = simulate_lineages(topology, params, init, obs_times, seed, max_events=max_events)
    return counts[:, :, 1 + topology.n_prog :], init


def sample_reads(X, b, seed, pcr=None):
    """Hypergeometric blood sampling of ``b[m]`` cells per (time, type), then
    linear amplification by ``pcr[j, m]`` rounded half to even."""
    N, J, M = X.shape
    B = X.sum(axis=0)
    b = np.asarray(b, dtype=np.int64)
    for j in range(J):
        for m in range(M):
            if b[m] > B[j, m]:
                raise ValueError(f"sample size b exceeds population B for type index {m} at time index {j}")
    sample = np.zeros_like(X)
    for j in range(J):
        for m in range(M):
            sample[:, j, m] = mvhypergeom_sample(X[:, j, m], b[m], sampling_rng(seed, 1, j, m))
    if pcr is None:
        return sample, B
    d = np.asarray(pcr, dtype=float)
    if d.shape != (J, M) or np.any(d <= 0):
        raise ValueError("pcr constants must be a positive (n_times, n_mature) array")
    return np.rint(sample * d[None]).astype(np.int64), B


def read_filter(reads, threshold, mode="max"):
    """Boolean mask of barcodes that pass the read-count filter."""
    if threshold <= 0:
        return np.ones(reads.shape[0], dtype=bool)
    if mode == "max":
        return (reads >= threshold).any(axis=(1, 2))
    return (reads.sum(axis=2) >= threshold).any(axis=1)


def simulate_dataset(topology: ModelTopology, params: Params, config: SimConfig) -> ReadDataset:
    M = topology.n_mat
    b = config.sample_sizes if config.sample_sizes is not None else (10_000,) * M
    if len(b) != M:
        raise ValueError("one sample size per mature type is required")
    X, _ = simulate_latent(
        topology, params, config.n_lineages, config.obs_times, config.seed, config.pi, max_events=config.max_events
    )
    reads, B = sample_reads(X, b, config.seed, config.pcr)
    keep = read_filter(reads, config.read_filter_threshold, config.filter_mode)
    return ReadDataset(
        reads=reads[keep],
        times=np.asarray(config.obs_times),
        B=B.astype(float),
        b=np.asarray(b, dtype=float),
        barcode_ids=np.flatnonzero(keep),
        cell_types=tuple(topology.label(m) for m in topology.matures),
    )
