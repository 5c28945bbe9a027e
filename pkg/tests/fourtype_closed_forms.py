"""Hand-written closed forms for the smallest tree: HSC "1", one progenitor
"2" and two mature types "3", "4".

Rates: lam (HSC self-renewal), nu0 (HSC -> progenitor), mu0 (progenitor
death), nu1 / nu2 (production of 3 / 4), mu1 / mu2 (mature deaths).

``literal=True`` evaluates the progenitor-source expressions exactly as they
are commonly written: the U33 form uses the type-4 death rate, the leading
sign of each bracket is flipped, and the second U34 bracket has (mu0 - mu2)
in its e^{-mu0 t} numerator.  Those versions do not vanish at t = 0; the
default (``literal=False``) repairs these three points and leaves everything
else untouched.
"""

import math


def _u_prog_same(t, nu, mu, mu0, *, literal=False):
    # U_{mm|2}: bracket over e^{-(mu0+mu)t}, e^{-2 mu t}, e^{-mu0 t}
    s = 1.0 if literal else -1.0
    return (
        2
        * nu**2
        / (mu - mu0)
        * (
            s * math.exp(-(mu0 + mu) * t) / mu
            - math.exp(-2 * mu * t) / (mu0 - 2 * mu)
            + (mu0 - mu) * math.exp(-mu0 * t) / (mu * (mu0 - 2 * mu))
        )
    )


def u33_2(t, p, literal=False):
    # the uncorrected form carries mu2 where the type-3 death rate belongs
    mu = p["mu2"] if literal else p["mu1"]
    return _u_prog_same(t, p["nu1"], mu, p["mu0"], literal=literal)


def u44_2(t, p, literal=False):
    return _u_prog_same(t, p["nu2"], p["mu2"], p["mu0"], literal=literal)


def u34_2(t, p, literal=False):
    nu1, nu2, mu0, mu1, mu2 = p["nu1"], p["nu2"], p["mu0"], p["mu1"], p["mu2"]
    s = 1.0 if literal else -1.0
    # second bracket: uncorrected numerator (mu0 - mu2) should read (mu0 - mu1)
    last = (mu0 - mu2) if literal else (mu0 - mu1)
    d = mu0 - mu1 - mu2
    a = (
        nu1
        * nu2
        / (mu2 - mu0)
        * (s * math.exp(-(mu0 + mu1) * t) / mu1 - math.exp(-(mu1 + mu2) * t) / d + (mu0 - mu2) * math.exp(-mu0 * t) / (mu1 * d))
    )
    b = (
        nu1
        * nu2
        / (mu1 - mu0)
        * (s * math.exp(-(mu0 + mu2) * t) / mu2 - math.exp(-(mu1 + mu2) * t) / d + last * math.exp(-mu0 * t) / (mu2 * d))
    )
    return a + b


def _u_hsc_same(t, lam, nu0, mu0, nu, mu):
    D = nu0 - lam
    g = lam - nu0
    e = math.exp
    first = (
        2
        * nu0
        * nu**2
        / (mu - mu0)
        * (
            (mu0 - mu) * e((D - mu0) * t) / (mu * (mu0 - 2 * mu) * (D - mu0))
            - e((D - mu0 - mu) * t) / (mu * (D - mu0 - mu))
            - e((D - 2 * mu) * t) / ((mu0 - 2 * mu) * (D - 2 * mu))
            + (mu - mu0) / (mu * (mu0 - 2 * mu) * (D - mu0))
            + 1 / (mu * (D - mu0 - mu))
            + 1 / ((mu0 - 2 * mu) * (D - 2 * mu))
        )
    )
    second = (
        2
        * lam
        * nu0**2
        * nu**2
        / (mu - mu0) ** 2
        * (
            e((D - 2 * mu0) * t) / ((D - mu0) ** 2 * (D - 2 * mu0))
            - 2 * e((D - mu0 - mu) * t) / ((D - mu0) * (D - mu) * (D - mu0 - mu))
            + 2 * (mu0 - mu) * e(-mu0 * t) / (mu0 * (D - mu) * (D - mu0) ** 2)
            + e((D - 2 * mu) * t) / ((D - mu) ** 2 * (D - 2 * mu))
            + 2 * (mu - mu0) * e(-mu * t) / (mu * (D - mu) ** 2 * (D - mu0))
            + (mu - mu0) ** 2 * e(g * t) / (g * (D - mu) ** 2 * (D - mu0) ** 2)
            - 1 / ((D - mu0) ** 2 * (D - 2 * mu0))
            + 2 / ((D - mu0) * (D - mu) * (D - mu0 - mu))
            - 2 * (mu0 - mu) / (mu0 * (D - mu) * (D - mu0) ** 2)
            - 1 / ((D - mu) ** 2 * (D - 2 * mu))
            - 2 * (mu - mu0) / (mu * (D - mu) ** 2 * (D - mu0))
            - (mu - mu0) ** 2 / (g * (D - mu) ** 2 * (D - mu0) ** 2)
        )
    )
    return e(g * t) * (first + second)


def u33_1(t, p):
    return _u_hsc_same(t, p["lam"], p["nu0"], p["mu0"], p["nu1"], p["mu1"])


def u44_1(t, p):
    return _u_hsc_same(t, p["lam"], p["nu0"], p["mu0"], p["nu2"], p["mu2"])


def u34_1(t, p):
    lam, nu0, mu0, nu1, nu2, mu1, mu2 = (p[k] for k in ("lam", "nu0", "mu0", "nu1", "nu2", "mu1", "mu2"))
    D = nu0 - lam
    g = lam - nu0
    e = math.exp
    first = (
        nu0
        * nu1
        * nu2
        / (mu2 - mu0)
        * (
            (mu0 - mu2) * e((D - mu0) * t) / (mu1 * (mu0 - mu1 - mu2) * (D - mu0))
            - e((D - mu1 - mu0) * t) / (mu1 * (D - mu1 - mu0))
            - e((D - mu1 - mu2) * t) / ((mu0 - mu1 - mu2) * (D - mu1 - mu2))
            + (mu2 - mu0) / (mu1 * (mu0 - mu1 - mu2) * (D - mu0))
            + 1 / (mu1 * (D - mu1 - mu0))
            + 1 / ((mu0 - mu1 - mu2) * (D - mu1 - mu2))
        )
    )
    second = (
        nu0
        * nu1
        * nu2
        / (mu1 - mu0)
        * (
            (mu0 - mu1) * e((D - mu0) * t) / (mu2 * (mu0 - mu1 - mu2) * (D - mu0))
            - e((D - mu2 - mu0) * t) / (mu2 * (D - mu2 - mu0))
            - e((D - mu1 - mu2) * t) / ((mu0 - mu1 - mu2) * (D - mu1 - mu2))
            + (mu1 - mu0) / (mu2 * (mu0 - mu1 - mu2) * (D - mu0))
            + 1 / (mu2 * (D - mu2 - mu0))
            + 1 / ((mu0 - mu1 - mu2) * (D - mu1 - mu2))
        )
    )
    third = (
        2
        * lam
        * nu0**2
        * nu1
        * nu2
        / ((mu1 - mu0) * (mu2 - mu0))
        * (
            e((D - 2 * mu0) * t) / ((D - 2 * mu0) * (D - mu0) ** 2)
            - e((D - mu0 - mu2) * t) / ((D - mu0) * (D - mu2) * (D - mu0 - mu2))
            + (mu0 - mu2) * e(-mu0 * t) / (mu0 * (D - mu0) ** 2 * (D - mu2))
            - e((D - mu0 - mu1) * t) / ((D - mu0) * (D - mu1) * (D - mu0 - mu1))
            + e((D - mu1 - mu2) * t) / ((D - mu1) * (D - mu2) * (D - mu1 - mu2))
            + (mu2 - mu0) * e(-mu1 * t) / (mu1 * (D - mu1) * (D - mu2) * (D - mu0))
            + (mu0 - mu1) * e(-mu0 * t) / (mu0 * (D - mu0) ** 2 * (D - mu1))
            + (mu1 - mu0) * e(-mu2 * t) / (mu2 * (D - mu1) * (D - mu2) * (D - mu0))
            + (mu1 - mu0) * (mu2 - mu0) * e(g * t) / (g * (D - mu0) ** 2 * (D - mu1) * (D - mu2))
            - 1 / ((D - mu0) ** 2 * (D - 2 * mu0))
            + 1 / ((D - mu0) * (D - mu2) * (D - mu0 - mu2))
            - (mu0 - mu2) / (mu0 * (D - mu0) ** 2 * (D - mu2))
            + 1 / ((D - mu0) * (D - mu1) * (D - mu0 - mu1))
            - 1 / ((D - mu1) * (D - mu2) * (D - mu1 - mu2))
            + (mu0 - mu2) / (mu1 * (D - mu1) * (D - mu2) * (D - mu0))
            + (mu1 - mu0) / (mu0 * (D - mu0) ** 2 * (D - mu1))
            + (mu0 - mu1) / (mu2 * (D - mu1) * (D - mu2) * (D - mu0))
            - (mu1 - mu0) * (mu2 - mu0) / (g * (D - mu0) ** 2 * (D - mu1) * (D - mu2))
        )
    )
    return e(g * t) * (first + second + third)


FORMULAS = {
    ("3", "3", "2"): u33_2,
    ("4", "4", "2"): u44_2,
    ("3", "4", "2"): u34_2,
    ("3", "3", "1"): u33_1,
    ("4", "4", "1"): u44_1,
    ("3", "4", "1"): u34_1,
}


def _denominators(p):
    lam, nu0, mu0, mu1, mu2 = p["lam"], p["nu0"], p["mu0"], p["mu1"], p["mu2"]
    D = nu0 - lam
    out = [mu1 - mu0, mu2 - mu0, mu0 - 2 * mu1, mu0 - 2 * mu2, mu0 - mu1 - mu2, D - mu0, D - 2 * mu0, lam - nu0]
    for mu in (mu1, mu2):
        out += [D - mu, D - 2 * mu, D - mu0 - mu]
    out.append(D - mu1 - mu2)
    return out


def parameter_grid(min_gap=1e-3):
    """Product grid over the seven rates, dropping points where any of the
    closed forms' denominators is smaller than ``min_gap``."""
    import itertools

    axes = {
        "lam": (0.028, 0.05),
        "nu0": (0.02, 0.011),
        "mu0": (0.008, 0.03),
        "nu1": (36.0, 4.0),
        "nu2": (15.0, 2.0),
        "mu1": (0.24, 0.5),
        "mu2": (0.14, 0.09),
    }
    keys = list(axes)
    grid = []
    for vals in itertools.product(*(axes[k] for k in keys)):
        p = dict(zip(keys, vals))
        if min(abs(d) for d in _denominators(p)) >= min_gap:
            grid.append(p)
    return grid
