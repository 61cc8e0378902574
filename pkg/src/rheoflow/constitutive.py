"""Implicit constitutive relations G(S, D) = 0 with analytic tangents.

Symmetric 2x2 tensors are component triples (t11, t22, t12); the Frobenius
pairing is A:B = a11*b11 + a22*b22 + 2*a12*b12. Models are immutable value
objects, vectorized over arbitrary leading axes, and expose one of two
orientations: stress-explicit (G = S - Shat(D)) or strain-explicit
(G = Dhat(S) - D). The assembly only consumes eval_residual/eval_tangents,
so the orientation stays an implementation detail of each model.

Note on the Carreau exponent: the viscosity argument is eps^2 + |D|^2 with
|D| the Frobenius norm (the standard Carreau form).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FROB_WEIGHTS = np.array([1.0, 1.0, 2.0])

_EYE3 = np.eye(3)


def frob_inner(a, b):
    """Frobenius pairing of component triples."""
    return (a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]
            + 2.0 * a[..., 2] * b[..., 2])


def frob_norm(a):
    return np.sqrt(np.maximum(frob_inner(a, a), 0.0))


def trace(a):
    return a[..., 0] + a[..., 1]


def _papa_factor(t, m):
    """(1 - exp(-m t)) / t with a series branch near t = 0 (C^1 for Newton)."""
    t = np.asarray(t, dtype=float)
    small = t < 1e-8 / m
    ts = np.where(small, 0.0, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = -np.expm1(-m * ts) / ts
    series = m - 0.5 * m**2 * t + m**3 * t**2 / 6.0
    return np.where(small, series, f)


def _papa_factor_prime(t, m):
    t = np.asarray(t, dtype=float)
    small = t < 1e-8 / m
    ts = np.where(small, 1.0, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        fp = (m * ts * np.exp(-m * ts) + np.expm1(-m * ts)) / ts**2
    series = -0.5 * m**2 + m**3 * t / 3.0 - m**4 * t**2 / 8.0
    return np.where(small, series, fp)


def _radial_tangent(coef, coef_prime_over_t, tensor):
    """Tangent of T -> coef(|T|) T: coef*I + (coef'/|T|) T (x) (W T)."""
    out = coef[..., None, None] * _EYE3
    wt = tensor * FROB_WEIGHTS
    out += coef_prime_over_t[..., None, None] * (tensor[..., :, None]
                                                 * wt[..., None, :])
    return out


# -- model-specific closed forms ------------------------------------------

def carreau_stress(d, nu, eps, r):
    """S = 2 nu (eps^2 + |D|^2)^((r-2)/2) D."""
    d = np.asarray(d, dtype=float)
    w = eps**2 + frob_inner(d, d)
    with np.errstate(divide="ignore"):
        visc = np.where(w > 0.0, 2.0 * nu * w ** ((r - 2.0) / 2.0), 0.0)
    return visc[..., None] * d


def _carreau_tangent(d, nu, eps, r):
    d = np.asarray(d, dtype=float)
    w = eps**2 + frob_inner(d, d)
    with np.errstate(divide="ignore"):
        a = np.where(w > 0.0, 2.0 * nu * w ** ((r - 2.0) / 2.0), 0.0)
        b = np.where(w > 0.0, 2.0 * nu * (r - 2.0) * w ** ((r - 4.0) / 2.0), 0.0)
    out = a[..., None, None] * _EYE3
    wd = d * FROB_WEIGHTS
    out += b[..., None, None] * (d[..., :, None] * wd[..., None, :])
    return out


def bingham_papanastasiou_stress(d, bn, m):
    """S = (Bn (1 - exp(-M |D|)) / |D| + 1) D, nondimensional."""
    d = np.asarray(d, dtype=float)
    t = frob_norm(d)
    return (bn * _papa_factor(t, m) + 1.0)[..., None] * d


def _bingham_tangent(d, bn, m):
    d = np.asarray(d, dtype=float)
    t = frob_norm(d)
    coef = bn * _papa_factor(t, m) + 1.0
    cpt = bn * _papa_factor_prime(t, m) / np.maximum(t, 1e-30)
    return _radial_tangent(coef, cpt, d)


def activated_strain(s, x, nu, delta_s, m, center=(0.5, 0.5),
                     radius_sq=(3.0 / 8.0) ** 4):
    """Strain of the activated Navier-Stokes/Euler law.

    Inside the activation disk: D = (delta_s (1-exp(-M|S|))/|S| + 1/(2 nu)) S;
    outside: D = S / (2 nu).
    """
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    inside = _inside_disk(x, center, radius_sq)
    t = frob_norm(s)
    coef = np.where(inside, delta_s * _papa_factor(t, m), 0.0) + 0.5 / nu
    return coef[..., None] * s


def _activated_tangent(s, x, nu, delta_s, m, center, radius_sq):
    s = np.asarray(s, dtype=float)
    inside = _inside_disk(np.asarray(x, dtype=float), center, radius_sq)
    t = frob_norm(s)
    coef = np.where(inside, delta_s * _papa_factor(t, m), 0.0) + 0.5 / nu
    cpt = np.where(inside, delta_s * _papa_factor_prime(t, m), 0.0) \
        / np.maximum(t, 1e-30)
    return _radial_tangent(coef, cpt, s)


def _inside_disk(x, center, radius_sq):
    dx = x[..., 0] - center[0]
    dy = x[..., 1] - center[1]
    return dx * dx + dy * dy <= radius_sq


# -- models ----------------------------------------------------------------

@dataclass(frozen=True)
class Newtonian:
    nu: float
    orientation = "stress"
    r = 2.0

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("nu must be positive")

    def stress(self, d, x=None):
        return 2.0 * self.nu * np.asarray(d, dtype=float)

    def stress_tangent(self, d, x=None):
        d = np.asarray(d, dtype=float)
        return np.broadcast_to(2.0 * self.nu * _EYE3, d.shape + (3,)).copy()


@dataclass(frozen=True)
class Carreau:
    nu: float
    eps: float
    r: float
    orientation = "stress"

    def __post_init__(self):
        if self.nu <= 0 or self.eps < 0 or self.r <= 1:
            raise ValueError("require nu > 0, eps >= 0, r > 1")

    def stress(self, d, x=None):
        return carreau_stress(d, self.nu, self.eps, self.r)

    def stress_tangent(self, d, x=None):
        return _carreau_tangent(d, self.nu, self.eps, self.r)


@dataclass(frozen=True)
class BinghamPapanastasiou:
    bn: float
    m: float
    orientation = "stress"
    r = 2.0

    def __post_init__(self):
        if self.bn < 0 or self.m <= 0:
            raise ValueError("require Bn >= 0 and M > 0")

    def stress(self, d, x=None):
        return bingham_papanastasiou_stress(d, self.bn, self.m)

    def stress_tangent(self, d, x=None):
        return _bingham_tangent(d, self.bn, self.m)


@dataclass(frozen=True)
class ActivatedEulerNS:
    nu: float
    delta_s: float
    m: float
    center: tuple = (0.5, 0.5)
    radius_sq: float = (3.0 / 8.0) ** 4
    orientation = "strain"
    r = 2.0

    def __post_init__(self):
        if self.nu <= 0 or self.delta_s < 0 or self.m <= 0:
            raise ValueError("require nu > 0, delta_s >= 0, M > 0")

    def strain(self, s, x):
        return activated_strain(s, x, self.nu, self.delta_s, self.m,
                                self.center, self.radius_sq)

    def strain_tangent(self, s, x):
        return _activated_tangent(s, x, self.nu, self.delta_s, self.m,
                                  self.center, self.radius_sq)


# -- generic interface -------------------------------------------------------

def eval_residual(model, s, d, x=None):
    """G(S, D) as a component triple; zero iff (D, S) is on the graph."""
    if model.orientation == "stress":
        return np.asarray(s, dtype=float) - model.stress(d, x)
    return model.strain(s, x) - np.asarray(d, dtype=float)


def eval_tangents(model, s, d, x=None):
    """(dG/dS, dG/dD), each mapping component triples to component triples."""
    s = np.asarray(s, dtype=float)
    d = np.asarray(d, dtype=float)
    if model.orientation == "stress":
        dgds = np.broadcast_to(_EYE3, s.shape + (3,)).copy()
        dgdd = -model.stress_tangent(d, x)
    else:
        dgds = model.strain_tangent(s, x)
        dgdd = np.broadcast_to(-_EYE3, d.shape + (3,)).copy()
    return dgds, dgdd


def graph_sample(model, rng, n, magnitude=10.0, lo=0.0, x=None):
    """Random (D, S, x) triples on the regularized graph.

    Magnitudes are uniform in [0, magnitude], or log-uniform in
    [lo, magnitude] when lo > 0.
    """
    free = rng.uniform(-1.0, 1.0, size=(n, 3))
    free /= np.maximum(frob_norm(free), 1e-30)[:, None]
    if lo > 0.0:
        scale = np.exp(rng.uniform(np.log(lo), np.log(magnitude), size=(n, 1)))
    else:
        scale = magnitude * rng.uniform(0.0, 1.0, size=(n, 1))
    free = free * scale
    if x is None:
        x = rng.uniform(0.0, 1.0, size=(n, 2))
    if model.orientation == "stress":
        d = free
        s = model.stress(d, x)
    else:
        s = free
        d = model.strain(s, x)
    return d, s, x


@dataclass
class MonotonicityReport:
    passed: bool
    min_inner: float
    witness: tuple | None = None


def check_monotone(model, sample_count=10000, seed=0, magnitude=10.0):
    """Check (S1-S2):(D1-D2) >= -1e-12 over random graph pairs."""
    rng = np.random.default_rng(seed)
    d1, s1, x = graph_sample(model, rng, sample_count, magnitude)
    free2 = rng.uniform(-1.0, 1.0, size=(sample_count, 3)) \
        * magnitude * rng.uniform(0.0, 1.0, size=(sample_count, 1))
    if model.orientation == "stress":
        d2, s2 = free2, model.stress(free2, x)
    else:
        s2, d2 = free2, model.strain(free2, x)
    inner = frob_inner(s1 - s2, d1 - d2)
    k = int(np.argmin(inner))
    lo = float(inner[k])
    witness = (d1[k], s1[k], d2[k], s2[k], x[k]) if lo < -1e-12 else None
    return MonotonicityReport(lo >= -1e-12, lo, witness)


@dataclass
class CoercivityReport:
    passed: bool
    c: float
    m: float


def check_coercive(model, r, sample_count=10000, seed=0, magnitude=10.0,
                   lo=0.0):
    """Fit S:D >= -m + c(|D|^r + |S|^r') over graph samples; fail if c = 0."""
    rng = np.random.default_rng(seed)
    d, s, _ = graph_sample(model, rng, sample_count, magnitude, lo)
    rp = r / (r - 1.0)
    power = frob_inner(s, d)
    denom = frob_norm(d) ** r + frob_norm(s) ** rp
    m = max(0.0, -float(power.min()))
    mask = denom > 1e-14
    if not mask.any():
        return CoercivityReport(False, 0.0, m)
    c = float(((power[mask] + m) / denom[mask]).min())
    c = max(c, 0.0)
    return CoercivityReport(c > 0.0, c, m)
