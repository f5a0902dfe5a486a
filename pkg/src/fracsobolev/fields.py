"""Scalar test functions with a.e. gradients.

Every field maps an (n, 2) array of points to n values and knows its
gradient.  ``w1p_limit`` records membership in W^{1,p}: the field lies in
W^{1,p} on bounded domains exactly for p < w1p_limit (inf when Lipschitz).
Fields serialize to short expression strings such as ``"linear 1 0 0"``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ValidationError


class FieldFn:
    name: str = "field"
    w1p_limit: float = math.inf
    constant_value: float | None = None
    # points where the gradient blows up; quadrature is graded toward them
    singular_points: tuple = ()

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return self.value(np.atleast_2d(np.asarray(pts, float)))

    def value(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def in_w1p(self, p: float) -> bool:
        return p < self.w1p_limit

    def __mul__(self, c: float) -> "FieldFn":
        return Scaled(self, float(c))

    __rmul__ = __mul__

    def __sub__(self, other: "FieldFn") -> "FieldFn":
        return Combination(self, other, -1.0)

    def __add__(self, other: "FieldFn") -> "FieldFn":
        return Combination(self, other, 1.0)

    def translated(self, shift) -> "FieldFn":
        return Translated(self, np.asarray(shift, float))

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name}>"


class Constant(FieldFn):
    def __init__(self, c: float):
        self.c = float(c)
        self.constant_value = self.c
        self.name = f"const {self.c:g}"

    def value(self, pts):
        return np.full(len(pts), self.c)

    def gradient(self, pts):
        return np.zeros((len(pts), 2))


class Linear(FieldFn):
    """a*x + b*y + c."""

    def __init__(self, a: float, b: float, c: float = 0.0):
        self.a, self.b, self.c = float(a), float(b), float(c)
        self.name = f"linear {self.a:g} {self.b:g} {self.c:g}"
        if self.a == 0 and self.b == 0:
            self.constant_value = self.c

    def value(self, pts):
        return self.a * pts[:, 0] + self.b * pts[:, 1] + self.c

    def gradient(self, pts):
        return np.tile([self.a, self.b], (len(pts), 1))


def _smooth_drop(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """C^1 step from 1 (u <= 0) to 0 (u >= 1) and its derivative."""
    u = np.clip(u, 0.0, 1.0)
    return 1 - (3 * u ** 2 - 2 * u ** 3), -(6 * u - 6 * u ** 2)


class SlitAngle(FieldFn):
    """T(theta) around a slit tip, theta in (0, 2 pi) with the cut along the slit.

    T = 1 for theta <= pi/2, T = 0 for theta >= 3 pi/2, C^1 in between, so
    the field jumps across the slit and |grad| ~ 1/r near the tip.
    """

    name = "slit_angle"
    w1p_limit = 2.0

    def __init__(self, tip=(0.0, 0.0), direction: float = 0.0):
        self.tip = np.asarray(tip, float)
        self.direction = float(direction)
        self.singular_points = (tuple(self.tip),)
        if np.any(self.tip != 0) or self.direction != 0:
            self.name = f"slit_angle {self.tip[0]:g} {self.tip[1]:g} {self.direction:g}"

    def _theta(self, pts):
        d = pts - self.tip
        th = np.arctan2(d[:, 1], d[:, 0]) - self.direction
        return np.mod(th, 2 * np.pi), d

    def value(self, pts):
        th, _ = self._theta(pts)
        return _smooth_drop((th - np.pi / 2) / np.pi)[0]

    def gradient(self, pts):
        th, d = self._theta(pts)
        _, dt = _smooth_drop((th - np.pi / 2) / np.pi)
        r2 = np.maximum((d ** 2).sum(1), 1e-300)
        dth = np.column_stack([-d[:, 1], d[:, 0]]) / r2[:, None]
        return (dt / np.pi)[:, None] * dth


class Bump(FieldFn):
    """exp(1 - 1/(1 - rho^2)) with rho = |x - c| / r; equals 1 at the center."""

    def __init__(self, cx: float, cy: float, r: float):
        if r <= 0:
            raise ValidationError("bump radius must be positive")
        self.c = np.array([cx, cy], float)
        self.r = float(r)
        self.name = f"bump {cx:g} {cy:g} {r:g}"

    def _parts(self, pts):
        d = (pts - self.c) / self.r
        rho2 = (d ** 2).sum(1)
        inside = rho2 < 1
        q = np.where(inside, 1 - rho2, 1.0)
        v = np.where(inside, np.exp(1 - 1 / q), 0.0)
        return d, q, v, inside

    def value(self, pts):
        return self._parts(pts)[2]

    def gradient(self, pts):
        d, q, v, inside = self._parts(pts)
        fac = np.where(inside, -2 * v / q ** 2 / self.r, 0.0)
        return fac[:, None] * d


class GridHat(FieldFn):
    """Lagrange hat of vertex (cx, cy) on the grid of spacing w split along (1, 1) diagonals."""

    def __init__(self, cx: float, cy: float, w: float):
        if w <= 0:
            raise ValidationError("hat width must be positive")
        self.c = np.array([cx, cy], float)
        self.w = float(w)
        self.name = f"hat {cx:g} {cy:g} {w:g}"

    def value(self, pts):
        u = (pts - self.c) / self.w
        m = np.maximum(np.maximum(np.abs(u[:, 0]), np.abs(u[:, 1])), np.abs(u[:, 0] - u[:, 1]))
        return np.maximum(0.0, 1 - m)

    def gradient(self, pts):
        u = (pts - self.c) / self.w
        cand = np.stack([np.abs(u[:, 0]), np.abs(u[:, 1]), np.abs(u[:, 0] - u[:, 1])], axis=1)
        k = cand.argmax(1)
        g = np.zeros((len(pts), 2))
        s0, s1, s2 = np.sign(u[:, 0]), np.sign(u[:, 1]), np.sign(u[:, 0] - u[:, 1])
        g[k == 0, 0] = -s0[k == 0]
        g[k == 1, 1] = -s1[k == 1]
        g[k == 2, 0] = -s2[k == 2]
        g[k == 2, 1] = s2[k == 2]
        g[cand.max(1) >= 1] = 0.0
        return g / self.w


class Expression(FieldFn):
    """Smooth expression in x and y, differentiated symbolically."""

    def __init__(self, text: str):
        import sympy

        x, y = sympy.symbols("x y")
        try:
            expr = sympy.sympify(text, locals={"x": x, "y": y})
        except (sympy.SympifyError, SyntaxError, TypeError) as exc:
            raise ValidationError(f"cannot parse expression {text!r}") from exc
        extra = expr.free_symbols - {x, y}
        if extra:
            raise ValidationError(f"expression {text!r} uses unknown symbols {sorted(map(str, extra))}")
        self.name = f"expr {text}"
        self._f = sympy.lambdify((x, y), expr, "numpy")
        self._gx = sympy.lambdify((x, y), sympy.diff(expr, x), "numpy")
        self._gy = sympy.lambdify((x, y), sympy.diff(expr, y), "numpy")
        if not expr.free_symbols:
            self.constant_value = float(expr)

    def value(self, pts):
        return np.broadcast_to(np.asarray(self._f(pts[:, 0], pts[:, 1]), float), (len(pts),)).copy()

    def gradient(self, pts):
        gx = np.broadcast_to(np.asarray(self._gx(pts[:, 0], pts[:, 1]), float), (len(pts),))
        gy = np.broadcast_to(np.asarray(self._gy(pts[:, 0], pts[:, 1]), float), (len(pts),))
        return np.column_stack([gx, gy])


class Scaled(FieldFn):
    def __init__(self, base: FieldFn, c: float):
        self.base, self.c = base, c
        self.name = f"{c:g}*({base.name})"
        self.w1p_limit = base.w1p_limit if c != 0 else math.inf
        self.singular_points = base.singular_points if c != 0 else ()
        if base.constant_value is not None:
            self.constant_value = c * base.constant_value
        elif c == 0:
            self.constant_value = 0.0

    def value(self, pts):
        return self.c * self.base.value(pts)

    def gradient(self, pts):
        return self.c * self.base.gradient(pts)


class Translated(FieldFn):
    """x -> base(x - shift)."""

    def __init__(self, base: FieldFn, shift: np.ndarray):
        self.base, self.shift = base, shift
        self.name = f"({base.name}) shifted by {shift[0]:g} {shift[1]:g}"
        self.w1p_limit = base.w1p_limit
        self.constant_value = base.constant_value
        self.singular_points = tuple(tuple(np.asarray(q) + shift) for q in base.singular_points)

    def value(self, pts):
        return self.base.value(pts - self.shift)

    def gradient(self, pts):
        return self.base.gradient(pts - self.shift)


class Combination(FieldFn):
    """a + c * b."""

    def __init__(self, a: FieldFn, b: FieldFn, c: float):
        self.a, self.b, self.c = a, b, c
        op = "+" if c > 0 else "-"
        self.name = f"({a.name}) {op} ({b.name})"
        self.w1p_limit = min(a.w1p_limit, b.w1p_limit)
        self.singular_points = tuple(a.singular_points) + tuple(b.singular_points)
        if a.constant_value is not None and b.constant_value is not None:
            self.constant_value = a.constant_value + c * b.constant_value

    def value(self, pts):
        return self.a.value(pts) + self.c * self.b.value(pts)

    def gradient(self, pts):
        return self.a.gradient(pts) + self.c * self.b.gradient(pts)


class PiecewiseLinear(FieldFn):
    """Nodal coefficients on a conforming mesh, or on a partition of unity.

    With a partition the field is sum_j coeffs[j] * psi_j, which covers
    the renormalized snowflake partitions as well as plain hat bases.
    """

    def __init__(self, mesh, coeffs, partition=None, name: str = "piecewise_linear"):
        self.mesh = mesh
        self.coeffs = np.asarray(coeffs, float)
        self.partition = partition
        self.name = name
        if len(self.coeffs) and np.all(self.coeffs == self.coeffs[0]):
            self.constant_value = float(self.coeffs[0])

    def _mats(self, pts):
        if self.partition is not None:
            return self.partition.evaluate(pts)
        from .meshing import LagrangePartition

        if not hasattr(self, "_pu"):
            self._pu = LagrangePartition(self.mesh)
        return self._pu.evaluate(pts)

    def value(self, pts):
        val, _, _ = self._mats(pts)
        return val @ self.coeffs

    def gradient(self, pts):
        _, gx, gy = self._mats(pts)
        return np.column_stack([gx @ self.coeffs, gy @ self.coeffs])


def parse_field(text: str) -> FieldFn:
    """Build a field from its expression string."""
    parts = str(text).strip().split()
    if not parts:
        raise ValidationError("empty function description")
    head, args = parts[0].lower(), parts[1:]

    def nums(k_min: int, k_max: int) -> list[float]:
        if not (k_min <= len(args) <= k_max):
            raise ValidationError(f"function {head!r} takes {k_min}..{k_max} numbers, got {len(args)}")
        try:
            return [float(a) for a in args]
        except ValueError as exc:
            raise ValidationError(f"function {text!r}: non-numeric argument") from exc

    if head in ("const", "constant"):
        return Constant(*nums(1, 1))
    if head == "linear":
        return Linear(*nums(2, 3))
    if head == "slit_angle":
        v = nums(0, 3)
        return SlitAngle(tuple(v[:2]) if len(v) >= 2 else (0.0, 0.0), v[2] if len(v) == 3 else 0.0)
    if head == "bump":
        return Bump(*nums(3, 3))
    if head == "hat":
        return GridHat(*nums(3, 3))
    if head == "expr":
        return Expression(str(text).strip()[4:].strip())
    raise ValidationError(f"unknown function {head!r} (const, linear, slit_angle, bump, hat, expr)")
