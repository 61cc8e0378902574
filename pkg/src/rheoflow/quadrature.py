"""Quadrature on the reference triangle {xi, eta >= 0, xi + eta <= 1}.

Low degrees use the classical symmetric rules; higher degrees fall back to a
collapsed Gauss-Legendre product (Duffy transform), which is exact for any
requested total degree. A geometrically graded composite rule is provided for
integrands with a point singularity at one vertex of the cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

MAX_DEGREE = 20


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray    # (nq, 2)
    weights: np.ndarray   # (nq,), sum to 1/2
    degree: int


def _gauss01(n):
    x, w = leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _collapsed_rule(degree):
    # xi = a, eta = b*(1-a); the Jacobian (1-a) raises the a-degree by one
    na = (degree + 2 + 1) // 2
    nb = (degree + 1 + 1) // 2
    a, wa = _gauss01(na)
    b, wb = _gauss01(nb)
    xi = np.repeat(a, nb)
    eta = np.tile(b, na) * (1.0 - xi)
    w = np.repeat(wa * (1.0 - a), nb) * np.tile(wb, na)
    return np.column_stack([xi, eta]), w


def triangle_rule(degree):
    """Rule exact for polynomials of the given total degree, 1..20."""
    if not 1 <= degree <= MAX_DEGREE:
        raise ValueError(f"unsupported quadrature degree {degree}")
    if degree == 1:
        pts = np.array([[1 / 3, 1 / 3]])
        wts = np.array([0.5])
    elif degree == 2:
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        wts = np.full(3, 1 / 6)
    else:
        pts, wts = _collapsed_rule(degree)
    return QuadratureRule(pts, wts, degree)


def graded_vertex_rule(vertex, degree=10, levels=24, ratio=0.5):
    """Composite rule geometrically refined toward one reference vertex.

    The triangle is split into a sequence of annular slabs shrinking by
    `ratio` toward the vertex, plus a final tiny cap; the base rule is mapped
    onto every piece. Intended for integrands singular at that vertex
    (quadrature points stay interior, so values remain finite).
    """
    if vertex not in (0, 1, 2):
        raise ValueError("vertex must be 0, 1 or 2")
    base = triangle_rule(degree)
    ref = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    # permute so the singular corner is local vertex 0
    perm = {0: [0, 1, 2], 1: [1, 2, 0], 2: [2, 0, 1]}[vertex]
    v0, v1, v2 = ref[perm]

    pts, wts = [], []

    def add_piece(a, b, c):
        lin = np.stack([b - a, c - a], axis=-1)
        det = lin[0, 0] * lin[1, 1] - lin[0, 1] * lin[1, 0]
        pts.append(base.points @ lin.T + a)
        wts.append(base.weights * abs(det))

    s = 1.0
    for _ in range(levels):
        t = s * ratio
        # slab between scales s and t: quad (v0+t*e1, v0+s*e1, v0+s*e2, v0+t*e2)
        p1t, p1s = v0 + t * (v1 - v0), v0 + s * (v1 - v0)
        p2t, p2s = v0 + t * (v2 - v0), v0 + s * (v2 - v0)
        add_piece(p1t, p1s, p2s)
        add_piece(p1t, p2s, p2t)
        s = t
    add_piece(v0, v0 + s * (v1 - v0), v0 + s * (v2 - v0))

    points = np.concatenate(pts)
    weights = np.concatenate(wts)
    weights *= 0.5 / weights.sum()   # exact unit-cell measure
    return QuadratureRule(points, weights, degree)
