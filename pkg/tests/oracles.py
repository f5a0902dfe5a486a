"""Independent reference values used by several test modules."""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, special


def full_linear_square(a: float, b: float, s: float, p: float) -> float:
    """Full seminorm of a*x + b*y on the unit square.

    With z = x - y the double integral is int |a z1 + b z2|^p |z|^(-2-sp)
    (1 - |z1|)(1 - |z2|) dz over (-1, 1)^2; in polar coordinates the radial
    part is a polynomial times r^(p-1-sp), integrated in closed form.
    """
    beta = p - 1 - s * p

    def radial(th):
        c, sn = abs(math.cos(th)), abs(math.sin(th))
        R = 1 / max(c, sn)
        return (R ** (beta + 1) / (beta + 1) - (c + sn) * R ** (beta + 2) / (beta + 2)
                + c * sn * R ** (beta + 3) / (beta + 3))

    def integrand(th):
        return abs(a * math.cos(th) + b * math.sin(th)) ** p * radial(th)

    pts = [k * math.pi / 4 for k in range(9)]
    kinks = [math.atan2(-a, b) % (2 * math.pi), (math.atan2(-a, b) + math.pi) % (2 * math.pi)]
    edges = sorted(set(pts + kinks))
    total = sum(integrate.quad(integrand, lo, hi, epsabs=0, epsrel=1e-13, limit=200)[0]
                for lo, hi in zip(edges[:-1], edges[1:]))
    return total ** (1 / p)


def abs_cos_moment(p: float) -> float:
    """int_0^{2 pi} |cos t|^p dt."""
    return 2 * math.sqrt(math.pi) * math.exp(special.gammaln((p + 1) / 2) - special.gammaln(p / 2 + 1))


def restricted_linear_square(a: float, b: float, s: float, p: float) -> float:
    """Restricted seminorm of a*x + b*y on the unit square, in closed form.

    The ball B(x, d(x)/2) stays inside the square, so the inner integral is
    |grad|^p C_p (d/2)^alpha / alpha with alpha = p - sp, and
    int d^alpha = alpha int_0^{1/2} t^(alpha-1) (1 - 2t)^2 dt.
    """
    alpha = p - s * p
    h = 0.5
    d_moment = h ** alpha - 4 * alpha / (alpha + 1) * h ** (alpha + 1) + 4 * alpha / (alpha + 2) * h ** (alpha + 2)
    power = math.hypot(a, b) ** p * abs_cos_moment(p) * d_moment / (2 ** alpha * alpha)
    return power ** (1 / p)


def dense_p2_decomposition(vertices: np.ndarray, triangles: np.ndarray, fnodes: np.ndarray, ell: float):
    """Dense P1 assembly and solve of (M + ell^2 (M + S)) c = M f for f in the FE space.

    Returns (c, ||f - h||_2 + ell ||h||_{W^{1,2}}).
    """
    n = len(vertices)
    M = np.zeros((n, n))
    S = np.zeros((n, n))
    local_mass = (np.ones((3, 3)) + np.eye(3)) / 12
    for tri in triangles:
        P = vertices[tri]
        D = np.array([P[1] - P[0], P[2] - P[0]]).T
        area = abs(np.linalg.det(D)) / 2
        # gradients of the barycentric coordinates
        Ginv = np.linalg.inv(D)
        g = np.vstack([-Ginv.sum(0), Ginv])
        M[np.ix_(tri, tri)] += area * local_mass
        S[np.ix_(tri, tri)] += area * g @ g.T
    c = np.linalg.solve(M + ell ** 2 * (M + S), M @ fnodes)
    r = fnodes - c
    value = math.sqrt(r @ M @ r) + ell * math.sqrt(c @ (M + S) @ c)
    return c, value
