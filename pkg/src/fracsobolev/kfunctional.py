"""Upper bounds for K(ell, f) and the discretized interpolation seminorm.

K(ell, f) = inf { ||g||_p + ell ||h||_{W^{1,p}} : f = g + h }.  Every
decomposition we can write down bounds it from above, so each scale
collects candidates: the minimizer of

    Phi_p(h) = ||f - h||_p^p + ell^p (||h||_p^p + ||grad h||_p^p)

over continuous piecewise-linear h, the nodal interpolant of f, the
partition-of-unity average h = sum_j f_j psi_j, and the trivial splits
(g, h) = (f, 0) and (0, f).  A decomposition with parts (a, b) =
(||g||_p, ||h||_{W^{1,p}}) bounds K(t) <= a + t b at every t, so the
reported profile is the lower envelope of these lines over the whole
grid, which is nondecreasing and concave by construction.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalError, ValidationError
from .fields import FieldFn, PiecewiseLinear
from .geometry import DomainSpec
from .meshing import (LagrangePartition, Mesh, PartitionOfUnity, lagrange_partition,
                      snowflake_partition, triangulate, _on_grid)
from .quadrature import map_rule
from .seminorms import domain_spec, field_nodes, lp_norm, w1p_norm
from .snowflake import SnowflakeDomain

FE_VERTEX_CAP = 20000


@dataclass
class Decomposition:
    """f = g + h with g = f - h; ``value`` = ||g||_p + ell ||h||_{W^{1,p}}."""

    f: FieldFn
    h: FieldFn
    ell: float
    p: float
    g_norm: float
    h_norm: float
    method: str

    @property
    def g(self) -> FieldFn:
        return self.f - self.h

    @property
    def value(self) -> float:
        return self.g_norm + self.ell * self.h_norm

    def at(self, ell: float) -> float:
        return self.g_norm + ell * self.h_norm


@dataclass(frozen=True)
class ScaleGrid:
    tau: float
    ratio: float = 0.5
    count: int = 6

    def __post_init__(self) -> None:
        if not (0 < self.ratio < 1):
            raise ValidationError("grid ratio must lie in (0, 1)")
        if self.tau <= 0:
            raise ValidationError("grid cutoff tau must be positive")
        if self.count < 4:
            raise ValidationError("scale grid needs at least 4 scales")

    @property
    def scales(self) -> np.ndarray:
        return self.tau * self.ratio ** np.arange(self.count)


def default_grid(domain, count: int = 6, ratio: float = 0.5) -> ScaleGrid:
    return ScaleGrid(min(0.25, domain_spec(domain).diameter / 8), ratio, count)


# -- finite-element machinery ------------------------------------------------


class FESpace:
    """Continuous P1 functions on a (slit-split) mesh with a fixed quadrature."""

    def __init__(self, mesh: Mesh, degree: int = 5):
        self.mesh = mesh
        pts, w = map_rule(mesh.tri_vertices, degree)
        m, q = w.shape
        self.x = pts.reshape(-1, 2)
        self.w = w.ravel()
        from .quadrature import triangle_rule

        bary, _ = triangle_rule(degree)
        rows = np.arange(m * q)
        tri = np.repeat(mesh.triangles, q, axis=0)
        lam = np.tile(bary, (m, 1))
        nv = mesh.n_vertices
        self.B = sp.csr_matrix((lam.ravel(), (np.repeat(rows, 3), tri.ravel())), shape=(m * q, nv))
        g = mesh.barycentric_gradients
        r2 = np.arange(m)
        self.Gx = sp.csr_matrix((g[:, :, 0].ravel(), (np.repeat(r2, 3), mesh.triangles.ravel())), shape=(m, nv))
        self.Gy = sp.csr_matrix((g[:, :, 1].ravel(), (np.repeat(r2, 3), mesh.triangles.ravel())), shape=(m, nv))
        self.area = mesh.areas

    @property
    def n(self) -> int:
        return self.mesh.n_vertices

    def mass(self) -> sp.csr_matrix:
        return (self.B.T @ sp.diags(self.w) @ self.B).tocsr()

    def stiffness(self) -> sp.csr_matrix:
        A = sp.diags(self.area)
        return (self.Gx.T @ A @ self.Gx + self.Gy.T @ A @ self.Gy).tocsr()

    def interpolate(self, f: FieldFn) -> np.ndarray:
        """Nodal values, each slit copy sampled from its own side."""
        mesh = self.mesh
        inc = mesh.vertex_triangles.tocsr()
        first = inc.indices[inc.indptr[:-1]]
        toward = mesh.centroids[first] - mesh.vertices
        return f(mesh.vertices + 1e-9 * toward)

    def norms(self, fvals: np.ndarray, c: np.ndarray, p: float) -> tuple[float, float]:
        """(||f - h||_p, ||h||_{W^{1,p}}) for h with nodal values c."""
        hv = self.B @ c
        a = float(np.sum(self.w * np.abs(fvals - hv) ** p)) ** (1 / p)
        grad = np.hypot(self.Gx @ c, self.Gy @ c)
        b = float(np.sum(self.w * np.abs(hv) ** p) + np.sum(self.area * grad ** p)) ** (1 / p)
        return a, b


def _solve(H: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    try:
        x = spla.spsolve(H.tocsc(), rhs)
    except RuntimeError as exc:  # singular factorization
        raise NumericalError(f"singular finite-element system: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise NumericalError("singular finite-element system")
    return x


def minimize_surrogate(fe: FESpace, fvals: np.ndarray, ell: float, p: float, c0: np.ndarray | None = None,
                       tol: float = 1e-8, max_iter: int = 100, eps: float | None = None) -> np.ndarray:
    """Nodal values minimizing Phi_p on the FE space.

    p = 2 is one linear solve of (M + ell^2 (M + S)) c = (f, psi).  Other p
    use reweighted least squares with Newton weights on the smoothed
    integrands (r^2 + eps^2)^(p/2), with backtracking, stopping when the
    relative objective change drops below ``tol``.
    """
    if p <= 1:
        raise ValidationError("k_upper_opt needs p > 1")
    if p == 2:
        B, w = fe.B, fe.w
        M = fe.mass()
        S = fe.stiffness()
        rhs = B.T @ (w * fvals)
        return _solve(M + ell ** 2 * (M + S), rhs)
    scale = max(float(np.max(np.abs(fvals))), 1e-12)
    eps = 1e-6 * scale if eps is None else eps
    c = np.array(c0, float) if c0 is not None else minimize_surrogate(fe, fvals, ell, 2.0)
    return _irls(fe, fvals, ell, p, c, eps, tol, max_iter)


def _irls(fe: FESpace, fvals: np.ndarray, ell: float, p: float, c: np.ndarray, eps: float, tol: float,
          max_iter: int) -> np.ndarray:
    """Damped Newton on Phi_p with integrands smoothed as (r^2 + eps^2)^(p/2)."""
    B, w = fe.B, fe.w
    eps_g = eps / ell
    lp = ell ** p
    G = sp.vstack([fe.Gx, fe.Gy]).tocsr()
    A = fe.area

    def objective(c):
        r = fvals - B @ c
        hv = B @ c
        gx, gy = fe.Gx @ c, fe.Gy @ c
        g2 = gx ** 2 + gy ** 2
        return (np.sum(w * (r ** 2 + eps ** 2) ** (p / 2)) + lp * np.sum(w * (hv ** 2 + eps ** 2) ** (p / 2))
                + lp * np.sum(A * (g2 + eps_g ** 2) ** (p / 2)))

    phi = objective(c)
    history = [phi]
    for it in range(max_iter):
        r = fvals - B @ c
        hv = B @ c
        gx, gy = fe.Gx @ c, fe.Gy @ c
        q1 = r ** 2 + eps ** 2
        q2 = hv ** 2 + eps ** 2
        g2 = gx ** 2 + gy ** 2
        q3 = g2 + eps_g ** 2
        d1 = p * r * q1 ** (p / 2 - 1)
        d2 = p * hv * q2 ** (p / 2 - 1)
        k3 = p * q3 ** (p / 2 - 1)
        grad = -B.T @ (w * d1) + lp * (B.T @ (w * d2) + fe.Gx.T @ (A * k3 * gx) + fe.Gy.T @ (A * k3 * gy))
        h1 = p * q1 ** (p / 2 - 2) * ((p - 1) * r ** 2 + eps ** 2)
        h2 = p * q2 ** (p / 2 - 2) * ((p - 1) * hv ** 2 + eps ** 2)
        hxx = A * k3 * (1 + (p - 2) * gx ** 2 / q3)
        hyy = A * k3 * (1 + (p - 2) * gy ** 2 / q3)
        hxy = A * k3 * (p - 2) * gx * gy / q3
        blk = sp.bmat([[sp.diags(hxx), sp.diags(hxy)], [sp.diags(hxy), sp.diags(hyy)]])
        H = B.T @ sp.diags(w * (h1 + lp * h2)) @ B + lp * (G.T @ blk @ G)
        step = _solve(H.tocsr(), -grad)
        # backtrack to an Armijo step, then keep halving while that still
        # helps: near r = 0 the curvature of |r|^p (p < 2) varies too fast
        # for the quadratic model, and full steps overshoot
        t = 1.0
        cand = c + step
        phi_new = objective(cand)
        while phi_new > phi + 1e-4 * t * float(grad @ step) and t >= 1e-10:
            t *= 0.5
            cand = c + t * step
            phi_new = objective(cand)
        while t >= 1e-10:
            trial = c + 0.5 * t * step
            phi_trial = objective(trial)
            if phi_trial >= phi_new:
                break
            t, cand, phi_new = 0.5 * t, trial, phi_trial
        if phi_new > phi:
            break
        change = (phi - phi_new) / max(abs(phi), 1e-300)
        c, phi = cand, phi_new
        history.append(phi)
        if change < tol:
            return c
    else:
        raise NumericalError(
            f"reweighted least squares did not converge in {max_iter} iterations "
            f"(last objective values {history[-3:]})")
    return c


# -- per-scale decompositions -------------------------------------------------


def k_upper_opt(f: FieldFn, ell: float, mesh: Mesh, p: float, strict: bool = True,
                extra: list | None = None) -> Decomposition:
    """Best of the FE surrogate minimizer, the interpolant and the trivial splits.

    ``extra`` may hold further candidate decompositions (for example the
    constructive one), so the result never exceeds any of them.
    """
    if strict and mesh.target_scale > ell / 2 * (1 + 1e-9):
        raise ValidationError(f"FE mesh size {mesh.target_scale:g} does not resolve scale {ell:g} (need <= ell/2)")
    fe = FESpace(mesh)
    fv = f(fe.x)
    cands = []
    c_int = fe.interpolate(f)
    a, b = fe.norms(fv, c_int, p)
    cands.append(Decomposition(f, PiecewiseLinear(mesh, c_int, name="interpolant"), ell, p, a, b, "interpolant"))
    c_opt = minimize_surrogate(fe, fv, ell, p, c0=c_int if p != 2 else None)
    a, b = fe.norms(fv, c_opt, p)
    cands.append(Decomposition(f, PiecewiseLinear(mesh, c_opt, name="fe_minimizer"), ell, p, a, b, "fe_minimizer"))
    cands.extend(trivial_decompositions(f, ell, p, *field_norms(f, mesh.tri_vertices, p)))
    cands.extend(extra or [])
    return min(cands, key=lambda d: d.at(ell))


def trivial_decompositions(f: FieldFn, ell: float, p: float, fp: float, w1p: float | None) -> list[Decomposition]:
    """(g, h) = (f, 0) and, when f lies in W^{1,p}, (0, f)."""
    from .fields import Constant

    out = [Decomposition(f, Constant(0.0), ell, p, fp, 0.0, "g=f")]
    if w1p is not None:
        out.append(Decomposition(f, f, ell, p, 0.0, w1p, "h=f"))
    return out


def field_norms(f: FieldFn, cells: np.ndarray, p: float, degree: int = 6) -> tuple[float, float | None]:
    """(||f||_p, ||f||_{W^{1,p}} or None) with quadrature graded at singular points."""
    x, w = field_nodes(f, cells, degree)
    fp = float(np.sum(w * np.abs(f(x)) ** p))
    if not f.in_w1p(p):
        return fp ** (1 / p), None
    gp = float(np.sum(w * np.linalg.norm(f.gradient(x), axis=1) ** p))
    return fp ** (1 / p), (fp + gp) ** (1 / p)


def _ball_rule(n_r: int = 4, n_theta: int = 8):
    """Unit-disc nodes and weights of a smooth radial bump of unit mass."""
    x, wx = np.polynomial.legendre.leggauss(n_r)
    r = (x + 1) / 2
    wr = wx / 2
    th = np.arange(n_theta) * 2 * np.pi / n_theta
    R, T = np.meshgrid(r, th, indexing="ij")
    bump = np.exp(1 - 1 / (1 - R ** 2))
    W = (wr[:, None] * R * bump) * (2 * np.pi / n_theta)
    W = W / W.sum()
    pts = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()])
    return pts, W.ravel()


def local_averages(f: FieldFn, pu: PartitionOfUnity) -> np.ndarray:
    """f_j = bump-weighted average of f over B(x_j, rho_j / 2)."""
    if f.constant_value is not None:
        return np.full(pu.n_functions, float(f.constant_value))
    pts, w = _ball_rule()
    y = pu.john_centers[:, None, :] + (pu.john_radii / 2)[:, None, None] * pts[None]
    return (f(y.reshape(-1, 2)).reshape(y.shape[:2]) * w).sum(1)


def k_upper_constructive(f: FieldFn, ell: float, pu: PartitionOfUnity, p: float, degree: int = 5) -> Decomposition:
    """h = sum_j f_j psi_j with f_j local averages on the John balls."""
    coeffs = local_averages(f, pu)
    cells = pu.quadrature_cells()
    pts, w = map_rule(cells, degree)
    x, w = pts.reshape(-1, 2), w.ravel()
    val, gx, gy = pu.evaluate(x)
    fv = f(x)
    hv = val @ coeffs
    a = float(np.sum(w * np.abs(fv - hv) ** p)) ** (1 / p)
    grad = np.hypot(gx @ coeffs, gy @ coeffs)
    b = float(np.sum(w * (np.abs(hv) ** p + grad ** p))) ** (1 / p)
    h = PiecewiseLinear(pu.mesh, coeffs, partition=pu, name="partition_average")
    return Decomposition(f, h, ell, p, a, b, "constructive")


# -- meshes per scale ---------------------------------------------------------


def _dyadic_at_most(x: float) -> float:
    return 2.0 ** math.floor(math.log2(x) + 1e-12)


def fe_mesh(domain, ell: float, cap: int = FE_VERTEX_CAP) -> tuple[Mesh, bool]:
    """FE mesh of size <= ell/2 (or the finest within ``cap`` vertices)."""
    spec = domain_spec(domain)
    h = ell / 2
    resolved = True
    # estimated vertex count of a quality mesh of size h
    h_cap = math.sqrt(1.3 * spec.area / cap)
    if h < h_cap:
        h, resolved = h_cap, False
    hd = _dyadic_at_most(h)
    if _on_grid(spec, hd) and (resolved is False or hd <= ell / 2):
        if resolved or spec.area / hd ** 2 <= 1.2 * cap:
            return triangulate(spec, hd, scheme="structured", strict=False), resolved
        hd = 2 * hd
        return triangulate(spec, hd, scheme="structured", strict=False), resolved
    return triangulate(spec, h, scheme="delaunay", strict=False), resolved


def partition_at(domain, ell: float) -> PartitionOfUnity:
    if isinstance(domain, SnowflakeDomain):
        return snowflake_partition(domain, ell)[1]
    spec = domain
    scheme = "structured" if _on_grid(spec, ell) else "delaunay"
    return lagrange_partition(triangulate(spec, ell, scheme=scheme, strict=False))


# -- profiles -------------------------------------------------------------------


@dataclass
class KProfile:
    scales: list
    k_opt: list
    k_constructive: list
    p: float
    s: float | None = None
    method: str = "opt"
    interp_value: float | None = None
    tail_bound: float | None = None
    head_gap: float | None = None
    head_unbounded: bool = False
    lp_norm: float = 0.0
    w1p_norm: float | None = None
    resolved: list = field(default_factory=list)
    fe_vertices: list = field(default_factory=list)
    winners: list = field(default_factory=list)
    lines_opt: list = field(default_factory=list)
    lines_constructive: list = field(default_factory=list)
    ratio: float = 0.5
    tau: float = 0.25
    fn_id: str = ""
    domain_id: str = ""

    @property
    def surrogate_factor(self) -> float:
        return 2 ** (1 - 1 / self.p)

    def k(self, method: str | None = None) -> list:
        return self.k_opt if (method or self.method) == "opt" else self.k_constructive

    def with_exponent(self, s: float, method: str = "opt") -> "KProfile":
        """Interpolation value for smoothness s from the stored K estimates."""
        if not (0 < s < 1):
            raise ValidationError("s must lie in (0, 1)")
        p = self.p
        ks = np.array(self.k(method))
        ells = np.array(self.scales)
        body = float(np.sum((ells ** (-s) * ks) ** p)) * math.log(1 / self.ratio)
        tail = self.lp_norm ** p * self.tau ** (-s * p) / (s * p)
        if self.w1p_norm is not None:
            head = self.w1p_norm ** p * ells.min() ** ((1 - s) * p) / ((1 - s) * p)
            unbounded = False
        else:
            head, unbounded = math.inf, True
        out = KProfile(**{**self.__dict__})
        out.s, out.method = s, method
        out.interp_value = (body + tail) ** (1 / p)
        out.tail_bound, out.head_gap, out.head_unbounded = tail, head, unbounded
        return out

    def to_json_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "fn_id": self.fn_id,
            "s": self.s,
            "p": self.p,
            "method": self.method,
            "tau": self.tau,
            "ratio": self.ratio,
            "scales": list(map(float, self.scales)),
            "k_opt": list(map(float, self.k_opt)),
            "k_constructive": list(map(float, self.k_constructive)),
            "interp_value": self.interp_value,
            "tail_bound": self.tail_bound,
            "head_gap": None if self.head_unbounded else self.head_gap,
            "head_unbounded": self.head_unbounded,
            "surrogate_factor": self.surrogate_factor,
            "lp_norm": self.lp_norm,
            "w1p_norm": self.w1p_norm,
            "fe_resolved": list(map(bool, self.resolved)),
            "fe_vertices": list(map(int, self.fe_vertices)),
            "best_candidate": list(self.winners),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["domain_id", "fn_id", "p", "scale", "k_opt", "k_constructive", "scaled_k_opt",
                     "scaled_k_constructive", "fe_resolved"])
        s = self.s if self.s is not None else 0.0
        for ell, ko, kc, res in zip(self.scales, self.k_opt, self.k_constructive, self.resolved):
            wr.writerow([self.domain_id, self.fn_id, repr(self.p), repr(float(ell)), repr(float(ko)),
                         repr(float(kc)), repr(float(ell ** -s * ko)), repr(float(ell ** -s * kc)), int(res)])
        return buf.getvalue()


def _envelope(lines: list[tuple[float, float]], ells: np.ndarray) -> np.ndarray:
    a = np.array([l[0] for l in lines])
    b = np.array([l[1] for l in lines])
    return (a[None, :] + ells[:, None] * b[None, :]).min(axis=1)


def k_profile(f: FieldFn, p: float, grid: ScaleGrid, domain, methods: tuple = ("opt", "constructive"),
              cap: int = FE_VERTEX_CAP, norms_level: int = 4) -> KProfile:
    """K estimates over the grid; independent of s, so one profile serves every s."""
    ells = grid.scales
    spec = domain_spec(domain)
    fp = lp_norm(f, domain, p, level=norms_level)
    w1p = w1p_norm(f, domain, p, level=norms_level)[0] if f.in_w1p(p) else None
    base = [(fp, 0.0)] + ([(0.0, w1p)] if w1p is not None else [])
    lines_c = list(base)
    lines_o = list(base)
    cons: list = []
    resolved, nverts, winners = [], [], []
    for k, ell in enumerate(ells):
        try:
            dc = None
            if "constructive" in methods:
                dc = k_upper_constructive(f, float(ell), partition_at(domain, float(ell)), p)
                lines_c.append((dc.g_norm, dc.h_norm))
            if "opt" in methods:
                mesh, ok = fe_mesh(domain, float(ell), cap)
                d = k_upper_opt(f, float(ell), mesh, p, strict=False, extra=[dc] if dc is not None else None)
                lines_o.append((d.g_norm, d.h_norm))
                resolved.append(ok)
                nverts.append(mesh.n_vertices)
                winners.append(d.method)
            else:
                resolved.append(True)
                nverts.append(0)
                winners.append("constructive")
        except (NumericalError, ValidationError) as exc:
            raise type(exc)(f"scale index {k} (ell={ell:g}): {exc}") from exc
    k_c = _envelope(lines_c, ells) if "constructive" in methods else np.full(len(ells), np.nan)
    k_o = _envelope(lines_o + lines_c, ells) if "opt" in methods else k_c
    return KProfile(list(map(float, ells)), list(map(float, k_o)), list(map(float, k_c)), p,
                    lp_norm=fp, w1p_norm=w1p, resolved=resolved, fe_vertices=nverts, winners=winners,
                    lines_opt=lines_o, lines_constructive=lines_c, ratio=grid.ratio, tau=grid.tau,
                    fn_id=f.name, domain_id=spec.name)


def interp_seminorm(f: FieldFn, e, grid: ScaleGrid, domain, method: str = "opt",
                    profile: KProfile | None = None, cap: int = FE_VERTEX_CAP) -> KProfile:
    """Discretized (int_0^tau (ell^-s K(ell, f))^p dell/ell)^(1/p) plus the tail above tau."""
    if method not in ("opt", "constructive"):
        raise ValidationError(f"unknown K method {method!r}")
    if profile is None:
        methods = ("opt", "constructive") if method == "opt" else ("constructive",)
        profile = k_profile(f, e.p, grid, domain, methods, cap)
    return profile.with_exponent(e.s, method)
