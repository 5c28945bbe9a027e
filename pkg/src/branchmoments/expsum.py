"""Exact algebra on exponential polynomials f(t) = sum_i c_i t^k_i exp(r_i t).

Every conditional mean and second factorial moment of the branching model is
such a function.  The kernel functions below work on parallel arrays
``(coef, power, rate)`` so the moment cascade can run compiled; :class:`ExpSum`
is the immutable value type wrapping them.

Rates closer than ``RATE_TOL`` are the same rate.  When a forcing term shares
the homogeneous rate of a linear ODE, the solution gains a power of t instead
of dividing by a vanishing rate difference.
"""

import math

import numpy as np

from ._accel import kernel

RATE_TOL = 1e-12
COEF_RTOL = 1e-14
MAX_POWER = 8


class PowerCapError(ValueError):
    pass


@kernel
def es_normalize(c, p, r):
    n = c.shape[0]
    oc = np.empty(n, dtype=np.float64)
    op = np.empty(n, dtype=np.int64)
    orr = np.empty(n, dtype=np.float64)
    m = 0
    for i in range(n):
        if c[i] == 0.0:
            continue
        found = -1
        for j in range(m):
            if op[j] == p[i] and abs(orr[j] - r[i]) <= RATE_TOL:
                found = j
                break
        if found >= 0:
            oc[found] += c[i]
        else:
            oc[m] = c[i]
            op[m] = p[i]
            orr[m] = r[i]
            m += 1
    cmax = 0.0
    for j in range(m):
        if abs(oc[j]) > cmax:
            cmax = abs(oc[j])
    keep = 0
    for j in range(m):
        if oc[j] != 0.0 and abs(oc[j]) > COEF_RTOL * cmax:
            oc[keep] = oc[j]
            op[keep] = op[j]
            orr[keep] = orr[j]
            keep += 1
    # insertion sort by (rate, power) so evaluation can share exp() per rate
    for i in range(1, keep):
        ci, pi_, ri = oc[i], op[i], orr[i]
        j = i - 1
        while j >= 0 and (orr[j] > ri or (orr[j] == ri and op[j] > pi_)):
            oc[j + 1] = oc[j]
            op[j + 1] = op[j]
            orr[j + 1] = orr[j]
            j -= 1
        oc[j + 1] = ci
        op[j + 1] = pi_
        orr[j + 1] = ri
    return oc[:keep].copy(), op[:keep].copy(), orr[:keep].copy()


@kernel
def es_add(c1, p1, r1, c2, p2, r2):
    return es_normalize(np.concatenate((c1, c2)), np.concatenate((p1, p2)), np.concatenate((r1, r2)))


@kernel
def es_scale(c, p, r, s):
    return es_normalize(c * s, p.copy(), r.copy())


@kernel
def es_mul_raw(c1, p1, r1, c2, p2, r2):
    """Pairwise products without merging like terms."""
    n1 = c1.shape[0]
    n2 = c2.shape[0]
    c = np.empty(n1 * n2, dtype=np.float64)
    p = np.empty(n1 * n2, dtype=np.int64)
    r = np.empty(n1 * n2, dtype=np.float64)
    k = 0
    for i in range(n1):
        for j in range(n2):
            c[k] = c1[i] * c2[j]
            p[k] = p1[i] + p2[j]
            r[k] = r1[i] + r2[j]
            if p[k] > MAX_POWER:
                raise ValueError("exponential polynomial power cap exceeded")
            k += 1
    return c, p, r


@kernel
def es_mul(c1, p1, r1, c2, p2, r2):
    c, p, r = es_mul_raw(c1, p1, r1, c2, p2, r2)
    return es_normalize(c, p, r)


@kernel
def _factorial(k):
    out = 1.0
    for i in range(2, k + 1):
        out *= i
    return out


@kernel
def es_solve_raw(kappa, c, p, r, y0):
    """Terms of the solution of y' = kappa*y + f before like terms merge."""
    n = c.shape[0]
    size = 1
    for i in range(n):
        size += p[i] + 2
    oc = np.empty(size, dtype=np.float64)
    op = np.empty(size, dtype=np.int64)
    orr = np.empty(size, dtype=np.float64)
    m = 0
    oc[m] = y0
    op[m] = 0
    orr[m] = kappa
    m += 1
    for i in range(n):
        k = p[i]
        s = r[i] - kappa
        if abs(s) <= RATE_TOL:
            if k + 1 > MAX_POWER:
                raise ValueError("exponential polynomial power cap exceeded")
            oc[m] = c[i] / (k + 1)
            op[m] = k + 1
            orr[m] = kappa
            m += 1
            continue
        # integral_0^t x^k e^{s x} dx, multiplied back by e^{kappa t}
        kf = _factorial(k)
        for j in range(k + 1):
            sign = 1.0 if (k - j) % 2 == 0 else -1.0
            oc[m] = c[i] * sign * kf / (_factorial(j) * s ** (k - j + 1))
            op[m] = j
            orr[m] = r[i]
            m += 1
        sign = 1.0 if k % 2 == 0 else -1.0
        oc[m] = -c[i] * sign * kf / s ** (k + 1)
        op[m] = 0
        orr[m] = kappa
        m += 1
    return oc[:m], op[:m], orr[:m]


@kernel
def es_solve(kappa, c, p, r, y0):
    """y' = kappa*y + f, y(0) = y0, for f given by (c, p, r)."""
    oc, op, orr = es_solve_raw(kappa, c, p, r, y0)
    return es_normalize(oc, op, orr)


@kernel
def es_integrate0(c, p, r):
    """F(t) = integral_0^t f(x) dx, i.e. the solution with kappa = 0."""
    return es_solve(0.0, c, p, r, 0.0)


@kernel
def es_eval(c, p, r, t):
    """Evaluate at each entry of the 1-D array ``t``; one exp per distinct rate."""
    out = np.zeros(t.shape[0], dtype=np.float64)
    n = c.shape[0]
    for q in range(t.shape[0]):
        tq = t[q]
        acc = 0.0
        i = 0
        while i < n:
            ri = r[i]
            poly = 0.0
            while i < n and r[i] == ri:
                poly += c[i] * tq ** p[i]
                i += 1
            if poly != 0.0:
                acc += poly * math.exp(ri * tq)
        out[q] = acc
    return out


def _as_arrays(terms):
    if not terms:
        return np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0)
    c, p, r = zip(*terms)
    return np.array(c, dtype=float), np.array(p, dtype=np.int64), np.array(r, dtype=float)


class ExpSum:
    """Immutable sum of ``coef * t**power * exp(rate * t)`` terms."""

    __slots__ = ("_c", "_p", "_r")

    def __init__(self, terms=(), *, _arrays=None):
        if _arrays is None:
            c, p, r = _as_arrays(list(terms))
            if np.any(p < 0):
                raise ValueError("powers must be non-negative")
            if p.size and p.max() > MAX_POWER:
                raise PowerCapError(f"power exceeds cap {MAX_POWER}")
            c, p, r = es_normalize(c, p, r)
        else:
            c, p, r = _arrays
        for a in (c, p, r):
            a.setflags(write=False)
        self._c, self._p, self._r = c, p, r

    @classmethod
    def _wrap(cls, arrays):
        obj = cls.__new__(cls)
        c, p, r = (np.ascontiguousarray(a) for a in arrays)
        for a in (c, p, r):
            a.setflags(write=False)
        obj._c, obj._p, obj._r = c, p, r
        return obj

    @classmethod
    def zero(cls):
        return cls(())

    @classmethod
    def constant(cls, value):
        return cls([(float(value), 0, 0.0)])

    @classmethod
    def exp(cls, rate, coef=1.0):
        return cls([(float(coef), 0, float(rate))])

    @property
    def arrays(self):
        return self._c, self._p, self._r

    @property
    def terms(self):
        return [(float(c), int(p), float(r)) for c, p, r in zip(self._c, self._p, self._r)]

    def __len__(self):
        return self._c.shape[0]

    def is_zero(self):
        return len(self) == 0

    def max_power(self):
        return int(self._p.max()) if len(self) else 0

    def add(self, other):
        return ExpSum._wrap(es_add(*self.arrays, *other.arrays))

    def scale(self, s):
        return ExpSum._wrap(es_scale(*self.arrays, float(s)))

    def mul(self, other):
        try:
            return ExpSum._wrap(es_mul(*self.arrays, *other.arrays))
        except ValueError as exc:
            raise PowerCapError(str(exc)) from None

    def integrate0(self):
        return ExpSum._wrap(es_integrate0(*self.arrays))

    def derivative(self):
        """Termwise product-rule derivative."""
        terms = []
        for c, p, r in self.terms:
            if p > 0:
                terms.append((c * p, p - 1, r))
            terms.append((c * r, p, r))
        return ExpSum(terms)

    def eval(self, t):
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        out = es_eval(*self.arrays, np.ascontiguousarray(t_arr.ravel())).reshape(t_arr.shape)
        return float(out[0]) if np.ndim(t) == 0 else out

    __call__ = eval

    def at0(self):
        return float(self._c[self._p == 0].sum())

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = ExpSum.constant(other)
        return self.add(other)

    __radd__ = __add__

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = ExpSum.constant(other)
        return self.add(other.scale(-1.0))

    def __mul__(self, other):
        if isinstance(other, ExpSum):
            return self.mul(other)
        return self.scale(other)

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, ExpSum):
            return NotImplemented
        return (
            len(self) == len(other)
            and np.array_equal(self._p, other._p)
            and np.allclose(self._r, other._r, rtol=0, atol=RATE_TOL)
            and np.allclose(self._c, other._c, rtol=1e-12, atol=0)
        )

    __hash__ = None

    def __repr__(self):
        if not len(self):
            return "ExpSum(0)"
        parts = []
        for c, p, r in self.terms:
            s = f"{c:.6g}"
            if p:
                s += f"*t^{p}" if p > 1 else "*t"
            if r:
                s += f"*e^({r:.6g}t)"
            parts.append(s)
        return "ExpSum(" + " + ".join(parts) + ")"


def add(f, g):
    return f.add(g)


def scale(f, c):
    return f.scale(c)


def mul(f, g):
    return f.mul(g)


def integrate0(f):
    return f.integrate0()


def evaluate(f, t):
    return f.eval(t)


def solve_linear_ode(kappa, forcing, y0=0.0):
    """Unique solution of y' = kappa*y + forcing(t) with y(0) = y0."""
    try:
        return ExpSum._wrap(es_solve(float(kappa), *forcing.arrays, float(y0)))
    except ValueError as exc:
        raise PowerCapError(str(exc)) from None
