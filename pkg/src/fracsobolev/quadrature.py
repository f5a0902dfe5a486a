"""Reference quadrature rules on the unit triangle and on intervals."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


def _perm3(a: float, b: float, c: float) -> list[tuple[float, float, float]]:
    out = []
    for t in ((a, b, c), (b, c, a), (c, a, b), (a, c, b), (c, b, a), (b, a, c)):
        if t not in out:
            out.append(t)
    return out


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric points and weights (summing to 1) exact to ``degree``.

    Degrees 1, 2, 4 and 5 use the classical symmetric rules; anything
    else falls back to a collapsed Gauss-Jacobi product rule.
    """
    if degree <= 1:
        pts = [(1 / 3, 1 / 3, 1 / 3)]
        wts = [1.0]
    elif degree == 2:
        pts = _perm3(2 / 3, 1 / 6, 1 / 6)
        wts = [1 / 3] * 3
    elif degree in (3, 4):
        a, wa = 0.445948490915965, 0.223381589678011
        b, wb = 0.091576213509771, 0.109951743655322
        pa = _perm3(a, a, 1 - 2 * a)
        pb = _perm3(b, b, 1 - 2 * b)
        pts = pa + pb
        wts = [wa] * len(pa) + [wb] * len(pb)
    elif degree == 5:
        a1, b1, w1 = 0.059715871789770, 0.470142064105115, 0.132394152788506
        a2, b2, w2 = 0.797426985353087, 0.101286507323456, 0.125939180544827
        p1 = _perm3(a1, b1, b1)
        p2 = _perm3(a2, b2, b2)
        pts = [(1 / 3, 1 / 3, 1 / 3)] + p1 + p2
        wts = [0.225] + [w1] * len(p1) + [w2] * len(p2)
    else:
        return _collapsed_rule(degree // 2 + 1)
    bary = np.array(pts, dtype=float)
    w = np.array(wts, dtype=float)
    return bary, w / w.sum()


def _collapsed_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    # Duffy map: x = u, y = (1 - u) v; the (1 - u) Jacobian is absorbed by Gauss-Jacobi(1, 0).
    u, wu = roots_jacobi(n, 1.0, 0.0)
    v, wv = np.polynomial.legendre.leggauss(n)
    u = (u + 1) / 2
    v = (v + 1) / 2
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv)
    x = U.ravel()
    y = ((1 - U) * V).ravel()
    bary = np.column_stack([1 - x - y, x, y])
    w = W.ravel()
    return bary, w / w.sum()


@lru_cache(maxsize=None)
def gauss_legendre01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1) / 2, w / 2


def map_rule(vertices: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Physical quadrature points and weights for a stack of triangles.

    ``vertices`` has shape (m, 3, 2); returns points (m, q, 2) and
    weights (m, q) that already include the triangle areas.
    """
    bary, w = triangle_rule(degree)
    pts = np.einsum("qk,mkd->mqd", bary, vertices)
    area = triangle_areas(vertices)
    return pts, area[:, None] * w[None, :]


def triangle_areas(vertices: np.ndarray) -> np.ndarray:
    e1 = vertices[:, 1] - vertices[:, 0]
    e2 = vertices[:, 2] - vertices[:, 0]
    return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
