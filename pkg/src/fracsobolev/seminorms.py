"""L^p, W^{1,p} and Gagliardo seminorms by singularity-aware quadrature.

Both Gagliardo seminorms are computed as an outer triangle rule over x and,
for each node x, an inner integral in polar coordinates about x:

    int |f(x) - f(y)|^p |x - y|^{-2-sp} dy
        = int_0^{2 pi} int_{r : x + r e in set} |f(x + r e) - f(x)|^p r^{-1-sp} dr dphi.

The angular range is split at every boundary-vertex direction on top of a
uniform set of sectors, so the ray-exit distance is smooth inside each
sector.  Along a ray, the interval starting at x uses t = r^(p - sp),
which turns the integrand into |f(x + r e) - f(x)|^p / r^p / (p - sp),
bounded for Lipschitz f; intervals away from x use u = r^(-sp), which
absorbs the kernel.  Slit crossings split the ray but do not end it for
the full seminorm; for the restricted one the ray stops at d(x)/2.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ValidationError
from .fields import FieldFn
from .geometry import DomainSpec, Exponents, contains_points, distance_to_boundary
from .meshing import Mesh, quadrature_mesh, refine
from .quadrature import gauss_legendre01, map_rule
from .snowflake import SnowflakeDomain


def domain_spec(domain) -> DomainSpec:
    return domain.domain if isinstance(domain, SnowflakeDomain) else domain


@dataclass
class SeminormResult:
    value: float
    refinement_level: int
    error_estimate: float
    diverging: bool
    p: float = 2.0
    history: list = field(default_factory=list)
    levels: list = field(default_factory=list)

    @property
    def power(self) -> float:
        return self.value ** self.p

    def growth_factors(self) -> list[float]:
        h = self.history
        return [b / a if a > 0 else math.inf for a, b in zip(h[:-1], h[1:])]


class MCResult(NamedTuple):
    estimate: float
    std_error: float
    unstable: bool
    max_share: float
    n_samples: int


def _mesh_levels(domain, mesh: Mesh | None, levels) -> list[tuple[int, Mesh]]:
    base = mesh if mesh is not None else quadrature_mesh(domain)
    if isinstance(levels, int):
        wanted = [levels]
    else:
        wanted = sorted(set(int(k) for k in levels))
    if not wanted or wanted[0] < 0:
        raise ValidationError("refinement levels must be non-negative")
    out = []
    cur = base
    for k in range(wanted[-1] + 1):
        if k > 0:
            cur = refine(cur)
        if k in wanted:
            out.append((k, cur))
    return out


def _nodes(mesh: Mesh, degree: int) -> tuple[np.ndarray, np.ndarray]:
    pts, w = map_rule(mesh.tri_vertices, degree)
    return pts.reshape(-1, 2), w.ravel()


def _split4(t: np.ndarray) -> np.ndarray:
    m01, m12, m20 = (t[:, 0] + t[:, 1]) / 2, (t[:, 1] + t[:, 2]) / 2, (t[:, 2] + t[:, 0]) / 2
    return np.stack([np.stack([t[:, 0], m01, m20], 1), np.stack([m01, t[:, 1], m12], 1),
                     np.stack([m20, m12, t[:, 2]], 1), np.stack([m01, m12, m20], 1)], 1).reshape(-1, 3, 2)


def graded_cells(mesh: Mesh, spec: DomainSpec, layers: int) -> np.ndarray:
    """Mesh triangles with those touching the boundary split ``layers`` more times.

    Inner integrals behave like d(x)^(p - sp) near the boundary, so the
    outer rule gains most from resolving that strip.
    """
    cells = mesh.tri_vertices
    tol = 1e-9 * max(1.0, spec.diameter)
    for _ in range(layers):
        d = distance_to_boundary(spec, cells.reshape(-1, 2)).reshape(-1, 3).min(1)
        touch = d <= tol
        if not touch.any():
            break
        cells = np.concatenate([cells[~touch], _split4(cells[touch])])
    return cells


def graded_toward(cells: np.ndarray, points, layers: int = 30) -> np.ndarray:
    """Split triangles touching any of ``points`` again and again (geometric grading)."""
    for q in points:
        q = np.asarray(q, float)
        for _ in range(layers):
            lo = cells.min(axis=1) - 1e-12
            hi = cells.max(axis=1) + 1e-12
            near = np.all((lo <= q) & (q <= hi), axis=1)
            if not near.any():
                break
            cells = np.concatenate([cells[~near], _split4(cells[near])])
    return cells


def field_nodes(f: FieldFn, cells: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes on cells, graded toward the singular points of f."""
    if f.singular_points:
        cells = graded_toward(cells, f.singular_points)
    pts, w = map_rule(cells, degree)
    return pts.reshape(-1, 2), w.ravel()


def _graded_nodes(mesh: Mesh, spec: DomainSpec, degree: int, layers: int):
    pts, w = map_rule(graded_cells(mesh, spec, layers), degree)
    return pts.reshape(-1, 2), w.ravel()


# -- L^p and W^{1,p} ----------------------------------------------------------


def _default_mesh(domain, mesh: Mesh | None, level: int) -> Mesh:
    if mesh is not None:
        return mesh
    return _mesh_levels(domain, None, level)[0][1]


def lp_norm(f: FieldFn, domain, p: float, mesh: Mesh | None = None, degree: int = 6,
            level: int = 4) -> float:
    """(int |f|^p)^(1/p) with a fixed triangle rule on the mesh."""
    if p < 1:
        raise ValidationError("p must be >= 1")
    pts, w = field_nodes(f, _default_mesh(domain, mesh, level).tri_vertices, degree)
    return float(np.sum(w * np.abs(f(pts)) ** p)) ** (1 / p)


def w1p_norm(f: FieldFn, domain, p: float, mesh: Mesh | None = None, degree: int = 6,
             level: int = 4) -> tuple[float, float]:
    """((||f||_p^p + ||grad f||_p^p)^(1/p), ||grad f||_p)."""
    if p < 1:
        raise ValidationError("p must be >= 1")
    pts, w = field_nodes(f, _default_mesh(domain, mesh, level).tri_vertices, degree)
    fp = float(np.sum(w * np.abs(f(pts)) ** p))
    g = np.linalg.norm(f.gradient(pts), axis=1)
    gp = float(np.sum(w * g ** p))
    return (fp + gp) ** (1 / p), gp ** (1 / p)


# -- polar inner integrals ----------------------------------------------------


@dataclass(frozen=True)
class PolarRule:
    """Resolution of the inner polar integral."""

    sectors: int = 16
    angular: int = 3
    radial: int = 8
    panels: int = 2
    outer_degree: int = 4
    boundary_layers: int = 2


def _ray_hits(x: np.ndarray, e: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Ray parameters r > 0 where x + r e meets each segment (inf if none).

    x: (n, 2), e: (n, m, 2), segs: (S, 2, 2) -> (n, m, S).
    """
    a = segs[:, 0]
    d = segs[:, 1] - a
    w = a[None, :, :] - x[:, None, :]                     # (n, S, 2)
    den = e[..., 0, None] * d[None, None, :, 1] - e[..., 1, None] * d[None, None, :, 0]
    num_r = w[:, None, :, 0] * d[None, None, :, 1] - w[:, None, :, 1] * d[None, None, :, 0]
    num_u = w[:, None, :, 0] * e[..., 1, None] - w[:, None, :, 1] * e[..., 0, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = num_r / den
        u = num_u / den
    ok = (np.abs(den) > 1e-300) & (u >= -1e-12) & (u < 1 + 1e-12) & (r > 0)
    return np.where(ok, r, np.inf)


def _directions(x: np.ndarray, vertices: np.ndarray, rule: PolarRule):
    """Angles (n, m) and weights, sectors split at every vertex direction."""
    uni = np.linspace(0, 2 * np.pi, rule.sectors, endpoint=False)
    if len(vertices):
        d = vertices[None] - x[:, None]
        va = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2 * np.pi)
        brk = np.concatenate([np.broadcast_to(uni, (len(x), len(uni))), va], axis=1)
    else:
        brk = np.broadcast_to(uni, (len(x), len(uni))).copy()
    brk = np.sort(brk, axis=1)
    brk = np.concatenate([brk, np.full((len(x), 1), 2 * np.pi)], axis=1)
    lo, width = brk[:, :-1], np.diff(brk, axis=1)
    g, gw = gauss_legendre01(rule.angular)
    phi = (lo[..., None] + width[..., None] * g).reshape(len(x), -1)
    wphi = (width[..., None] * gw).reshape(len(x), -1)
    return phi, wphi


def _near_interval(f: FieldFn, x, fx, e, length, alpha, p, rule: PolarRule):
    """int_0^length |f(x + r e) - f(x)|^p r^(-1-sp) dr via t = r^alpha; shape (n, m)."""
    g, gw = gauss_legendre01(rule.radial)
    P = rule.panels
    frac = ((np.arange(P)[:, None] + g[None]) / P).ravel()
    wf = np.tile(gw / P, P)
    T = length ** alpha                                   # (n, m)
    t = T[..., None] * frac                               # (n, m, q)
    r = t ** (1 / alpha)
    y = x[:, None, None, :] + r[..., None] * e[:, :, None, :]
    df = np.abs(f(y.reshape(-1, 2)).reshape(r.shape) - fx[:, None, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(r > 0, df ** p / r ** p, 0.0)
    return (val * wf).sum(-1) * T / alpha


def _far_interval(f: FieldFn, x, fx, e, a, b, sp, p, rule: PolarRule):
    """int_a^b |f(x + r e) - f(x)|^p r^(-1-sp) dr via u = r^(-sp); zero where a >= b."""
    g, gw = gauss_legendre01(rule.radial)
    P = rule.panels
    frac = ((np.arange(P)[:, None] + g[None]) / P).ravel()
    wf = np.tile(gw / P, P)
    valid = np.isfinite(b) & (b > a)
    a = np.where(valid, a, 1.0)
    b = np.where(valid, b, 2.0)
    U0 = b ** (-sp)
    U1 = a ** (-sp)
    u = U0[..., None] + (U1 - U0)[..., None] * frac
    r = u ** (-1 / sp)
    y = x[:, None, None, :] + r[..., None] * e[:, :, None, :]
    df = np.abs(f(y.reshape(-1, 2)).reshape(r.shape) - fx[:, None, None])
    out = (df ** p * wf).sum(-1) * (U1 - U0) / sp
    return np.where(valid, out, 0.0)


class _Geometry:
    def __init__(self, spec: DomainSpec):
        self.spec = spec
        self.closed = spec.closed_segments
        self.slits = spec.slit_segments
        pts = [spec.outer, *spec.holes, *spec.slits]
        self.vertices = np.unique(np.round(np.concatenate(pts), 14), axis=0)


def _full_inner(f, e_: Exponents, geo: _Geometry, x, rule: PolarRule) -> np.ndarray:
    p, sp, alpha = e_.p, e_.s * e_.p, e_.radial_exponent
    phi, wphi = _directions(x, geo.vertices, rule)
    e = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    rc = _ray_hits(x, e, geo.closed)
    if len(geo.slits):
        rs = _ray_hits(x, e, geo.slits)
        allr = np.concatenate([rc, rs], axis=-1)
        is_closed = np.concatenate([np.ones(rc.shape, bool), np.zeros(rs.shape, bool)], axis=-1)
    else:
        allr, is_closed = rc, np.ones(rc.shape, bool)
    order = np.argsort(allr, axis=-1)
    allr = np.take_along_axis(allr, order, -1)
    is_closed = np.take_along_axis(is_closed, order, -1) & np.isfinite(allr)
    # keep only crossings that matter: drop the tail of inf entries
    k_max = int(np.isfinite(allr).sum(-1).max())
    allr, is_closed = allr[..., :k_max], is_closed[..., :k_max]
    fx = f(x)
    # rays through a vertex can only come from zero-width sectors, whose weight is 0
    first = np.where(np.isfinite(allr[..., 0]), allr[..., 0], 0.0)
    total = _near_interval(f, x, fx, e, first, alpha, p, rule)
    parity = is_closed[..., 0].astype(int)
    for i in range(1, k_max):
        inside = parity % 2 == 0
        a, b = allr[..., i - 1], allr[..., i]
        b = np.where(inside, b, -np.inf)
        total = total + _far_interval(f, x, fx, e, a, b, sp, p, rule)
        parity = parity + is_closed[..., i]
    return (total * wphi).sum(-1)


def _restricted_inner(f, e_: Exponents, spec: DomainSpec, x, rule: PolarRule, dist=None) -> np.ndarray:
    p, alpha = e_.p, e_.radial_exponent
    R = (distance_to_boundary(spec, x) if dist is None else dist) / 2
    n_dir = rule.sectors * rule.angular
    phi = np.broadcast_to(np.arange(n_dir) * (2 * np.pi / n_dir), (len(x), n_dir))
    e = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    fx = f(x)
    # periodic integrand: the equispaced rule is the natural one in angle
    vals = _near_interval(f, x, fx, e, np.broadcast_to(R[:, None], phi.shape), alpha, p, rule)
    return vals.sum(-1) * (2 * np.pi / n_dir)


def _accumulate(inner, x: np.ndarray, w: np.ndarray, chunk: int, threads: int = 1) -> float:
    starts = list(range(0, len(x), chunk))

    def job(i0):
        sl = slice(i0, i0 + chunk)
        return np.sum(w[sl] * inner(x[sl]))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(job, starts))
    else:
        parts = [job(i0) for i0 in starts]
    return float(np.sum(np.array(parts)))


def detect_divergence(history: list[float], gamma: float | None = None, window: int = 3) -> bool:
    """Flag a refinement sequence whose values keep growing.

    With ``gamma`` the rule is literal: growth by at least that factor for
    ``window`` consecutive levels.  Without it, the values must increase
    for ``window`` consecutive levels while the increments fail to shrink
    (ratio of successive increments >= 0.9); a convergent quadrature of
    positive order contracts its increments by a fixed factor instead.
    """
    h = [float(v) for v in history]
    if len(h) < window + 1:
        return False
    tail = h[-(window + 1):]
    if gamma is not None:
        return all(b >= gamma * a and a > 0 for a, b in zip(tail[:-1], tail[1:]))
    inc = np.diff(tail)
    if np.any(inc <= 0):
        return False
    return bool(np.all(inc[1:] / inc[:-1] >= 0.9))


def _seminorm(kind: str, f: FieldFn, e: Exponents, domain, mesh, levels, rule: PolarRule,
              gamma, threads: int) -> SeminormResult:
    spec = domain_spec(domain)
    meshes = _mesh_levels(domain, mesh, levels)
    if f.constant_value is not None:
        n = len(meshes)
        return SeminormResult(0.0, meshes[-1][0], 0.0, False, e.p, [0.0] * n, [k for k, _ in meshes])
    geo = _Geometry(spec)
    powers = []
    for _, m in meshes:
        x, w = _graded_nodes(m, spec, rule.outer_degree, rule.boundary_layers)
        if kind == "full":
            n_dir = (rule.sectors + len(geo.vertices)) * rule.angular
            per = n_dir * (len(geo.closed) + len(geo.slits) + 1) * (rule.radial * rule.panels + 4)
            inner = lambda xs: _full_inner(f, e, geo, xs, rule)
        else:
            per = rule.sectors * rule.angular * rule.radial * rule.panels
            inner = lambda xs: _restricted_inner(f, e, spec, xs, rule)
        chunk = max(16, int(3e6 // per))
        powers.append(max(_accumulate(inner, x, w, chunk, threads), 0.0))
    values = [v ** (1 / e.p) for v in powers]
    err = abs(values[-1] - values[-2]) if len(values) > 1 else 0.0
    return SeminormResult(values[-1], meshes[-1][0], err, detect_divergence(values, gamma), e.p,
                          values, [k for k, _ in meshes])


def gagliardo_full(f: FieldFn, e: Exponents, domain, mesh: Mesh | None = None,
                   levels: int | Iterable[int] = (2, 3, 4), rule: PolarRule = PolarRule(),
                   gamma: float | None = None, threads: int = 1) -> SeminormResult:
    """(int_Omega int_Omega |f(x)-f(y)|^p / |x-y|^(2+sp))^(1/p) on refined meshes.

    ``levels`` are refinement counts of ``mesh`` (default: the coarsest
    triangle partition of the domain); the result carries the value at
    the finest level and the whole history.
    """
    return _seminorm("full", f, e, domain, mesh, levels, rule, gamma, threads)


def gagliardo_restricted(f: FieldFn, e: Exponents, domain, mesh: Mesh | None = None,
                         levels: int | Iterable[int] = (2, 3, 4), rule: PolarRule = PolarRule(),
                         gamma: float | None = None, threads: int = 1) -> SeminormResult:
    """Same with the inner integral over the ball |x - y| < d(x)/2."""
    return _seminorm("restricted", f, e, domain, mesh, levels, rule, gamma, threads)


# -- Monte Carlo oracle --------------------------------------------------------


def mc_oracle(f: FieldFn, e: Exponents, domain, restricted: bool, n_samples: int = 10 ** 6,
              seed: int = 0, chunk: int = 10 ** 6, unstable_share: float = 0.01) -> MCResult:
    """Unbiased estimate of the p-th power of a Gagliardo seminorm.

    x is uniform on the domain (sampled through its triangle partition), the
    direction uniform, and r has density proportional to r^(p - sp - 1) on
    (0, R] with R = d(x)/2 (restricted) or the domain diameter (full, where
    y outside the domain scores 0).  Chunk k draws from the substream
    SeedSequence([seed, k]), so results do not depend on scheduling.  A
    single sample carrying more than ``unstable_share`` of the total marks
    the estimate unstable (heavy-tailed, typically divergent, integrand).
    """
    if n_samples < 10 ** 4:
        raise ValidationError("mc_oracle needs at least 10^4 samples")
    if f.constant_value is not None:
        return MCResult(0.0, 0.0, False, 0.0, n_samples)
    spec = domain_spec(domain)
    tri = quadrature_mesh(domain).tri_vertices
    areas = 0.5 * np.abs((tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1])
                         - (tri[:, 1, 1] - tri[:, 0, 1]) * (tri[:, 2, 0] - tri[:, 0, 0]))
    total_area = float(areas.sum())
    cdf = np.cumsum(areas) / total_area
    alpha, p = e.radial_exponent, e.p
    diam = spec.diameter
    s1 = s2 = 0.0
    wmax = 0.0
    n_done = 0
    k = 0
    while n_done < n_samples:
        n = min(chunk, n_samples - n_done)
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        t = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right").clip(0, len(tri) - 1)
        a, b = rng.random(n), rng.random(n)
        flip = a + b > 1
        a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
        v = tri[t]
        x = v[:, 0] + a[:, None] * (v[:, 1] - v[:, 0]) + b[:, None] * (v[:, 2] - v[:, 0])
        phi = rng.random(n) * 2 * np.pi
        R = distance_to_boundary(spec, x) / 2 if restricted else np.full(n, diam)
        r = R * rng.random(n) ** (1 / alpha)
        y = x + r[:, None] * np.column_stack([np.cos(phi), np.sin(phi)])
        wgt = total_area * 2 * np.pi * R ** alpha / alpha * np.abs(f(y) - f(x)) ** p / r ** p
        if not restricted:
            wgt = np.where(contains_points(spec, y), wgt, 0.0)
        s1 += float(wgt.sum())
        s2 += float((wgt ** 2).sum())
        wmax = max(wmax, float(wgt.max()))
        n_done += n
        k += 1
    mean = s1 / n_done
    var = max(s2 / n_done - mean ** 2, 0.0)
    share = wmax / s1 if s1 > 0 else 0.0
    return MCResult(mean, math.sqrt(var / n_done), share > unstable_share, share, n_done)
