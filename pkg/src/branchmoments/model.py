"""Differentiation-tree topologies, rate parameters and the reaction list.

Compartments are always ordered (HSC, progenitors in declaration order,
matures in declaration order).  Rates are in events per five days.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np


class TopologyError(ValueError):
    pass


class ParamsError(ValueError):
    pass


class BoundaryError(ValueError):
    """Raised when a simplex point on the boundary is mapped to logits."""


@dataclass(frozen=True, eq=False)
class ModelTopology:
    """A three-stage differentiation tree.

    ``parent`` maps every mature id to the id of its unique progenitor.
    """

    progenitors: tuple
    matures: tuple
    parent: Mapping[str, str]
    labels: Mapping[str, str] = field(default_factory=dict)
    hsc: str = "0"

    def __post_init__(self):
        object.__setattr__(self, "progenitors", tuple(str(a) for a in self.progenitors))
        object.__setattr__(self, "matures", tuple(str(m) for m in self.matures))
        object.__setattr__(self, "parent", {str(k): str(v) for k, v in dict(self.parent).items()})
        object.__setattr__(self, "labels", dict(self.labels))

    @property
    def n_prog(self) -> int:
        return len(self.progenitors)

    @property
    def n_mat(self) -> int:
        return len(self.matures)

    @property
    def n_types(self) -> int:
        return 1 + self.n_prog + self.n_mat

    @property
    def n_init(self) -> int:
        """Number of possible initial compartments (HSC + progenitors)."""
        return 1 + self.n_prog

    @property
    def compartments(self) -> tuple:
        return (self.hsc,) + self.progenitors + self.matures

    def index(self, ident: str) -> int:
        return self.compartments.index(str(ident))

    def parent_index(self) -> np.ndarray:
        """Progenitor position (0-based within ``progenitors``) of each mature type."""
        return np.array([self.progenitors.index(self.parent[m]) for m in self.matures], dtype=np.int64)

    def children(self, prog: str) -> tuple:
        return tuple(m for m in self.matures if self.parent.get(m) == prog)

    def pairs(self) -> list:
        """Unordered mature pairs (m, n), m < n, as positional indices."""
        k = self.n_mat
        return [(i, j) for i in range(k) for j in range(i + 1, k)]

    def pair_labels(self) -> list:
        return [f"{self.matures[i]}-{self.matures[j]}" for i, j in self.pairs()]

    def label(self, ident: str) -> str:
        return self.labels.get(ident, ident)

    def __eq__(self, other):
        if not isinstance(other, ModelTopology):
            return NotImplemented
        return (
            self.progenitors == other.progenitors
            and self.matures == other.matures
            and self.parent == other.parent
            and self.hsc == other.hsc
        )

    def __hash__(self):
        return hash((self.progenitors, self.matures, tuple(sorted(self.parent.items())), self.hsc))

    def __repr__(self):
        groups = ", ".join(f"{a}:{{{','.join(self.children(a))}}}" for a in self.progenitors)
        return f"ModelTopology({groups})"


def validate_topology(topology: ModelTopology) -> list:
    """Return the list of invariant violations; an empty list means valid."""
    errors = []
    progs, mats = topology.progenitors, topology.matures
    if not progs:
        errors.append("empty progenitor set")
    if not mats:
        errors.append("empty mature set")
    if len(set(progs)) != len(progs):
        errors.append("duplicate progenitor id")
    if len(set(mats)) != len(mats):
        errors.append("duplicate mature id")
    all_ids = (topology.hsc,) + progs + mats
    if len(set(all_ids)) != len(all_ids) and len(set(progs)) == len(progs) and len(set(mats)) == len(mats):
        errors.append("duplicate id across compartments")
    for m in mats:
        if m not in topology.parent:
            errors.append(f"orphan mature type {m!r}")
        elif topology.parent[m] not in progs:
            errors.append(f"mature type {m!r} has unknown progenitor {topology.parent[m]!r}")
    for m in topology.parent:
        if m not in mats:
            errors.append(f"parent entry for unknown mature type {m!r}")
    for a in progs:
        if not topology.children(a):
            errors.append(f"progenitor {a!r} has no mature child")
    return errors


def check_topology(topology: ModelTopology) -> ModelTopology:
    errors = validate_topology(topology)
    if errors:
        raise TopologyError("; ".join(errors))
    return topology


def make_topology(groups: Mapping[str, Sequence[str]], labels=None, hsc="0") -> ModelTopology:
    """Build a topology from ``{progenitor: [mature, ...]}``."""
    progs = list(groups)
    mats, parent = [], {}
    for a, kids in groups.items():
        for m in kids:
            mats.append(str(m))
            parent[str(m)] = str(a)
    return check_topology(ModelTopology(progs, mats, parent, labels or {}, hsc=hsc))


_FIVE_LABELS = {"1": "Gr", "2": "Mono", "3": "T", "4": "B", "5": "NK"}

# Partitions for (d), (e), (f) are not recoverable from the text; see README.
_CANONICAL = {
    "a": ({"a": ["1", "2", "3"]}, {"1": "Gr+Mono", "2": "T+B", "3": "NK"}),
    "b": ({"a": ["1", "2", "3", "4", "5"]}, _FIVE_LABELS),
    "c": ({"a": ["1", "2"], "b": ["3", "4", "5"]}, _FIVE_LABELS),
    "d": ({"a": ["1", "2", "5"], "b": ["3", "4"]}, _FIVE_LABELS),
    "e": ({"a": ["1", "2"], "b": ["3", "4"], "c": ["5"]}, _FIVE_LABELS),
    "f": ({"a": ["1"], "b": ["2"], "c": ["3", "4", "5"]}, _FIVE_LABELS),
}


def canonical_model(name: str) -> ModelTopology:
    """Canonical differentiation trees (a)-(f)."""
    key = str(name).strip().lower().strip("()")
    if key not in _CANONICAL:
        raise KeyError(f"unknown model {name!r}; expected one of a..f")
    groups, labels = _CANONICAL[key]
    groups = {a: sorted(kids, key=int) for a, kids in groups.items()}
    # matures keep numeric order regardless of which progenitor they hang off
    progs = list(groups)
    mats = sorted((m for kids in groups.values() for m in kids), key=int)
    parent = {m: a for a, kids in groups.items() for m in kids}
    return check_topology(ModelTopology(progs, mats, parent, labels))


@dataclass(frozen=True)
class Params:
    """Branching rates plus the initial-compartment distribution.

    ``pi`` is ordered (HSC, progenitors...).  ``fixed`` holds parameter names
    (see :func:`param_names`) that an estimator must not move.
    """

    lam: float
    nu_prog: tuple
    mu_prog: tuple
    nu_mat: tuple
    mu_mat: tuple
    pi: tuple
    fixed: frozenset = frozenset()

    def __post_init__(self):
        for name in ("nu_prog", "mu_prog", "nu_mat", "mu_mat", "pi"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "fixed", frozenset(self.fixed))
        rates = (self.lam,) + self.nu_prog + self.mu_prog + self.nu_mat + self.mu_mat
        if any(not math.isfinite(r) or r < 0 for r in rates):
            raise ParamsError("rates must be finite and non-negative")
        if any(p < 0 for p in self.pi) or abs(sum(self.pi) - 1.0) > 1e-12:
            raise ParamsError(f"pi must lie on the probability simplex, got {self.pi}")

    @property
    def growth(self) -> float:
        """Net HSC growth rate lambda - sum(nu_a)."""
        return self.lam - sum(self.nu_prog)

    def with_fixed(self, names) -> "Params":
        return replace(self, fixed=frozenset(names))

    def check(self, topology: ModelTopology) -> "Params":
        if len(self.nu_prog) != topology.n_prog or len(self.mu_prog) != topology.n_prog:
            raise ParamsError("progenitor rate vectors do not match topology")
        if len(self.nu_mat) != topology.n_mat or len(self.mu_mat) != topology.n_mat:
            raise ParamsError("mature rate vectors do not match topology")
        if len(self.pi) != topology.n_init:
            raise ParamsError("pi length must be 1 + number of progenitors")
        unknown = set(self.fixed) - set(param_names(topology))
        if unknown:
            raise ParamsError(f"unknown fixed parameter names: {sorted(unknown)}")
        return self

    def as_dict(self, topology: ModelTopology) -> dict:
        return dict(zip(param_names(topology), self.as_vector()))

    def as_vector(self) -> np.ndarray:
        return np.array((self.lam,) + self.nu_prog + self.mu_prog + self.nu_mat + self.mu_mat + self.pi)

    @classmethod
    def from_dict(cls, topology: ModelTopology, values: Mapping[str, float], fixed=()) -> "Params":
        missing = [n for n in param_names(topology) if n not in values]
        if missing:
            raise ParamsError(f"missing parameters: {missing}")
        p = topology.progenitors
        m = topology.matures
        return cls(
            lam=values["lambda"],
            nu_prog=[values[f"nu_{a}"] for a in p],
            mu_prog=[values[f"mu_{a}"] for a in p],
            nu_mat=[values[f"nu_{k}"] for k in m],
            mu_mat=[values[f"mu_{k}"] for k in m],
            pi=[values[f"pi_{topology.hsc}"]] + [values[f"pi_{a}"] for a in p],
            fixed=fixed,
        ).check(topology)


def param_names(topology: ModelTopology) -> list:
    p, m = topology.progenitors, topology.matures
    return (
        ["lambda"]
        + [f"nu_{a}" for a in p]
        + [f"mu_{a}" for a in p]
        + [f"nu_{k}" for k in m]
        + [f"mu_{k}" for k in m]
        + [f"pi_{topology.hsc}"]
        + [f"pi_{a}" for a in p]
    )


def rate_names(topology: ModelTopology) -> list:
    return [n for n in param_names(topology) if not n.startswith("pi_")]


def mature_death_names(topology: ModelTopology) -> list:
    return [f"mu_{k}" for k in topology.matures]


@dataclass(frozen=True)
class Reaction:
    """One event type: a cell of ``parent`` fires at ``rate_per_cell`` and the
    state changes by ``delta``."""

    parent: int
    delta: tuple
    rate_per_cell: float
    kind: str = ""


def build_reactions(topology: ModelTopology, params: Params) -> list:
    """Reaction list in the order self-renewal, HSC differentiations, mature
    productions, progenitor deaths, mature deaths."""
    check_topology(topology)
    params.check(topology)
    C = topology.n_types
    A = topology.n_prog

    def unit(*changes):
        d = [0] * C
        for idx, v in changes:
            d[idx] += v
        return tuple(d)

    prog_idx = {a: 1 + i for i, a in enumerate(topology.progenitors)}
    out = [Reaction(0, unit((0, 1)), params.lam, "self-renewal")]
    for i, a in enumerate(topology.progenitors):
        out.append(Reaction(0, unit((0, -1), (prog_idx[a], 1)), params.nu_prog[i], f"differentiate->{a}"))
    for k, m in enumerate(topology.matures):
        pa = prog_idx[topology.parent[m]]
        # the producing progenitor survives the event
        out.append(Reaction(pa, unit((1 + A + k, 1)), params.nu_mat[k], f"produce->{m}"))
    for i, a in enumerate(topology.progenitors):
        out.append(Reaction(prog_idx[a], unit((prog_idx[a], -1)), params.mu_prog[i], f"death {a}"))
    for k, m in enumerate(topology.matures):
        out.append(Reaction(1 + A + k, unit((1 + A + k, -1)), params.mu_mat[k], f"death {m}"))
    return out


def reaction_arrays(reactions: Sequence[Reaction]):
    """(parent[R], delta[R, C], rate[R]) arrays for the simulation kernels."""
    parent = np.array([r.parent for r in reactions], dtype=np.int64)
    delta = np.array([r.delta for r in reactions], dtype=np.int64)
    rate = np.array([r.rate_per_cell for r in reactions], dtype=np.float64)
    return parent, delta, rate


def gamma_to_pi(gamma) -> np.ndarray:
    """Multinomial-logit map from K-1 free reals to the open K-simplex."""
    g = np.asarray(gamma, dtype=float).reshape(-1)
    if not np.all(np.isfinite(g)):
        raise ValueError("gamma must be finite")
    # shift by the max for overflow safety; the reference category has logit 0
    full = np.concatenate([g, [0.0]])
    shift = full.max()
    w = np.exp(full - shift)
    return w / w.sum()


def pi_to_gamma(pi) -> np.ndarray:
    p = np.asarray(pi, dtype=float).reshape(-1)
    if np.any(p <= 0):
        raise BoundaryError("boundary: every pi component must be strictly positive")
    return np.log(p[:-1] / p[-1])


def _reference_params(topology, lam, nu_prog, mu_prog, nu_mat, mu_mat, pi_prog):
    pi = [1.0 - sum(pi_prog)] + list(pi_prog)
    return Params(lam, nu_prog, mu_prog, nu_mat, mu_mat, pi, fixed=mature_death_names(topology)).check(topology)


def reference_truth(name: str):
    """Reference generating parameters for the canonical trees.

    Returns ``(topology, params)`` with mature death rates marked fixed.
    Available for models a, b, c, f.
    """
    key = str(name).strip().lower().strip("()")
    topo = canonical_model(key)
    if key == "a":
        return topo, _reference_params(topo, 0.028, [0.02], [0.008], [36, 15, 7], [0.24, 0.14, 0.09], [0.9])
    if key == "b":
        return topo, _reference_params(
            topo, 0.0285, [0.02], [0.008], [36, 15, 10, 20, 7], [0.26, 0.13, 0.11, 0.16, 0.09], [0.9]
        )
    if key == "c":
        # mature death rates are not tabulated for this study; model (b)'s are reused
        return topo, _reference_params(
            topo,
            0.0285,
            [0.013, 0.007],
            [0.005, 0.004],
            [36, 15, 10, 20, 7],
            [0.26, 0.13, 0.11, 0.16, 0.09],
            [0.6, 0.3],
        )
    if key == "f":
        return topo, _reference_params(
            topo,
            0.05,
            [0.028, 0.014, 0.007],
            [0.008, 0.006, 0.002],
            [40, 18, 14, 20, 8],
            [0.24, 0.13, 0.12, 0.18, 0.1],
            [0.55, 0.2, 0.15],
        )
    raise KeyError(f"no reference generating parameters for model {name!r}")
