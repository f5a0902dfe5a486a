"""Scale-ell triangulations, vertex patches and Lagrange partitions of unity.

Vertices on a slit are split into one copy per side, so the hat function
of an upper copy lives only on triangles above the slit.  A slit tip
keeps a single vertex because the triangles around it stay connected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import MeshError, ValidationError
from .geometry import (BOUNDARY_TOL, DomainSpec, _dist_to_segments, contains_points,
                       interior_point, segment_distance)
from .quadrature import triangle_areas
from .snowflake import SnowflakeDomain, SnowflakePlan, build_snowflake, snowflake_domain


@dataclass
class Mesh:
    """Triangle mesh; ``side_tags`` is +1/-1 for the two copies of a slit vertex.

    ``conforming`` is False for quadrature-only collections of disjoint
    triangles that need not share edges.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    target_scale: float
    side_tags: np.ndarray | None = None
    dup_pairs: np.ndarray | None = None
    conforming: bool = True

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.side_tags is None:
            self.side_tags = np.zeros(len(self.vertices), dtype=np.int8)
        if self.dup_pairs is None:
            self.dup_pairs = np.zeros((0, 2), dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def tri_vertices(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @cached_property
    def areas(self) -> np.ndarray:
        return triangle_areas(self.tri_vertices)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.tri_vertices.mean(axis=1)

    @cached_property
    def diameters(self) -> np.ndarray:
        t = self.tri_vertices
        e = np.stack([t[:, 1] - t[:, 0], t[:, 2] - t[:, 1], t[:, 0] - t[:, 2]], axis=1)
        return np.linalg.norm(e, axis=2).max(axis=1)

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique edges (k, 2) and the (m, 3) map from local edge to edge id.

        Local edge i of a triangle is opposite to its vertex i.
        """
        t = self.triangles
        loc = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]], axis=1).reshape(-1, 2)
        key = np.sort(loc, axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        return uniq, inv.reshape(-1, 3)

    @cached_property
    def boundary_edge_mask(self) -> np.ndarray:
        _, tri_edges = self.edges
        counts = np.bincount(tri_edges.ravel(), minlength=tri_edges.max() + 1)
        return counts == 1

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """Gradients of the three barycentric coordinates, shape (m, 3, 2)."""
        t = self.tri_vertices
        return _bary_gradients(t)

    @cached_property
    def locator(self) -> "TriLocator":
        return TriLocator(self.tri_vertices)

    @cached_property
    def vertex_triangles(self) -> sp.csr_matrix:
        """Incidence matrix vertices x triangles."""
        m = self.n_triangles
        rows = self.triangles.ravel()
        cols = np.repeat(np.arange(m), 3)
        return sp.csr_matrix((np.ones(3 * m), (rows, cols)), shape=(self.n_vertices, m))

    def incircles(self) -> tuple[np.ndarray, np.ndarray]:
        return incircles(self.tri_vertices)

    def circumradii(self) -> np.ndarray:
        t = self.tri_vertices
        a = np.linalg.norm(t[:, 1] - t[:, 2], axis=1)
        b = np.linalg.norm(t[:, 2] - t[:, 0], axis=1)
        c = np.linalg.norm(t[:, 0] - t[:, 1], axis=1)
        return a * b * c / (4 * self.areas)


def _bary_gradients(t: np.ndarray) -> np.ndarray:
    e1 = t[:, 1] - t[:, 0]
    e2 = t[:, 2] - t[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    # rows of inverse Jacobian give gradients of lambda_1, lambda_2
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    g0 = -g1 - g2
    return np.stack([g0, g1, g2], axis=1)


def incircles(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Incenters (m, 2) and inradii (m,) of stacked triangles."""
    a = np.linalg.norm(t[:, 1] - t[:, 2], axis=1)
    b = np.linalg.norm(t[:, 2] - t[:, 0], axis=1)
    c = np.linalg.norm(t[:, 0] - t[:, 1], axis=1)
    per = a + b + c
    center = (a[:, None] * t[:, 0] + b[:, None] * t[:, 1] + c[:, None] * t[:, 2]) / per[:, None]
    return center, 2 * triangle_areas(t) / per


# -- point location -----------------------------------------------------------


class TriLocator:
    """Bucket-grid point location for a stack of triangles."""

    def __init__(self, tri: np.ndarray, tol: float = 1e-10):
        self.tri = tri
        self.tol = tol
        lo = tri.min(axis=(0, 1))
        hi = tri.max(axis=(0, 1))
        span = np.maximum(hi - lo, 1e-12)
        size = math.sqrt(max(float(triangle_areas(tri).mean()), 1e-300)) * 1.5
        nx, ny = (np.ceil(span / size).astype(int) + 1).tolist()
        nx, ny = min(nx, 4096), min(ny, 4096)
        self.lo = lo
        self.cell = np.maximum(span / max(nx, 1), 1e-12) * 1.0000001
        self.nx, self.ny = nx, ny
        tlo = np.floor((tri.min(axis=1) - lo) / self.cell).astype(int)
        thi = np.floor((tri.max(axis=1) - lo) / self.cell).astype(int)
        tlo = np.clip(tlo, 0, [nx - 1, ny - 1])
        thi = np.clip(thi, 0, [nx - 1, ny - 1])
        cells, owners = [], []
        wx = thi[:, 0] - tlo[:, 0] + 1
        wy = thi[:, 1] - tlo[:, 1] + 1
        for dx in range(int(wx.max())):
            for dy in range(int(wy.max())):
                ok = (dx < wx) & (dy < wy)
                ids = np.flatnonzero(ok)
                cells.append((tlo[ids, 0] + dx) * ny + tlo[ids, 1] + dy)
                owners.append(ids)
        cells = np.concatenate(cells)
        owners = np.concatenate(owners)
        order = np.argsort(cells, kind="stable")
        self.owners = owners[order]
        self.start = np.searchsorted(cells[order], np.arange(nx * ny + 1))
        self.grad = _bary_gradients(tri)

    def locate(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Triangle index (-1 if none) and barycentric coordinates."""
        pts = np.atleast_2d(pts)
        ij = np.floor((pts - self.lo) / self.cell).astype(int)
        inside_grid = (ij[:, 0] >= 0) & (ij[:, 0] < self.nx) & (ij[:, 1] >= 0) & (ij[:, 1] < self.ny)
        cell = np.where(inside_grid, ij[:, 0] * self.ny + ij[:, 1], 0)
        s0 = self.start[cell]
        cnt = np.where(inside_grid, self.start[cell + 1] - s0, 0)
        found = np.full(len(pts), -1, dtype=np.int64)
        bary = np.zeros((len(pts), 3))
        best = np.full(len(pts), -np.inf)
        for k in range(int(cnt.max(initial=0))):
            idx = np.flatnonzero((cnt > k) & (best < 0))
            if len(idx) == 0:
                break
            t = self.owners[s0[idx] + k]
            lam = self.barycentric(t, pts[idx])
            score = lam.min(axis=1)
            better = score > best[idx]
            upd = idx[better]
            best[upd] = score[better]
            found[upd] = t[better]
            bary[upd] = lam[better]
        found[best < -self.tol] = -1
        return found, bary

    def barycentric(self, t: np.ndarray, pts: np.ndarray) -> np.ndarray:
        g = self.grad[t]
        v0 = self.tri[t, 0]
        d = pts - v0
        l1 = (g[:, 1] * d).sum(1)
        l2 = (g[:, 2] * d).sum(1)
        return np.column_stack([1 - l1 - l2, l1, l2])


# -- construction -------------------------------------------------------------


def _on_grid(domain: DomainSpec, h: float) -> bool:
    x0, y0, _, _ = domain.bbox
    pts = np.concatenate([domain.outer, *domain.holes, *domain.slits]) if (domain.holes or domain.slits) \
        else domain.outer
    q = (pts - [x0, y0]) / h
    if not np.allclose(q, np.round(q), atol=1e-9):
        return False
    seg = domain.segments
    d = seg[:, 1] - seg[:, 0]
    return bool(np.all((np.abs(d[:, 0]) < 1e-12) | (np.abs(d[:, 1]) < 1e-12)))


def feature_size(domain: DomainSpec) -> tuple[float, str]:
    """Shortest segment or smallest gap between non-adjacent segments."""
    seg = domain.segments
    lengths = np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1)
    k = int(lengths.argmin())
    best, what = float(lengths[k]), f"boundary segment {k} of length {lengths[k]:.6g}"
    if len(seg) <= 4096:
        n = len(seg)
        for i0 in range(0, n, 256):
            a = seg[i0:i0 + 256]
            d = segment_distance(a[:, None], seg[None])
            share = np.zeros_like(d, dtype=bool)
            for u in range(2):
                for v in range(2):
                    share |= np.linalg.norm(a[:, None, u] - seg[None, :, v], axis=-1) < 1e-12
            # touching pairs (shared vertices, slit ends on the boundary) are junctions, not gaps
            d = np.where(share | (d <= 1e-12), np.inf, d)
            j = np.unravel_index(np.argmin(d), d.shape)
            if d[j] < best:
                best = float(d[j])
                what = f"gap {best:.6g} between boundary segments {i0 + j[0]} and {j[1]}"
    return best, what


def structured_mesh(domain: DomainSpec, h: float) -> Mesh:
    """Grid of squares split along the (i, j)-(i+1, j+1) diagonal."""
    x0, y0, x1, y1 = domain.bbox
    nx = int(round((x1 - x0) / h))
    ny = int(round((y1 - y0) / h))
    I, J = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
    verts = np.column_stack([x0 + I.ravel() * h, y0 + J.ravel() * h])
    vid = (I * (ny + 1) + J)
    a = vid[:-1, :-1].ravel()
    b = vid[1:, :-1].ravel()
    c = vid[1:, 1:].ravel()
    d = vid[:-1, 1:].ravel()
    tris = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    cent = verts[tris].mean(axis=1)
    tris = tris[contains_points(domain, cent)]
    return _compress(verts, tris, h)


def _compress(verts: np.ndarray, tris: np.ndarray, scale: float) -> Mesh:
    used = np.unique(tris)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(verts[used], remap[tris], scale)


def _pslg(domain: DomainSpec) -> dict:
    verts: list = []
    segs: list = []
    index: dict = {}

    def vid(p) -> int:
        key = (round(float(p[0]), 12), round(float(p[1]), 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    slit_pts = np.concatenate(domain.slits) if domain.slits else np.zeros((0, 2))

    def add_closed(chain):
        n = len(chain)
        for i in range(n):
            a, b = chain[i], chain[(i + 1) % n]
            inner = [q for q in slit_pts
                     if _dist_to_segments(q[None], np.array([[a, b]]))[0] <= BOUNDARY_TOL
                     and np.linalg.norm(q - a) > BOUNDARY_TOL and np.linalg.norm(q - b) > BOUNDARY_TOL]
            inner.sort(key=lambda q: np.linalg.norm(q - a))
            pts = [a, *inner, b]
            for u, v in zip(pts[:-1], pts[1:]):
                segs.append((vid(u), vid(v)))

    add_closed(domain.outer)
    for h in domain.holes:
        add_closed(h)
    for s in domain.slits:
        for u, v in zip(s[:-1], s[1:]):
            segs.append((vid(u), vid(v)))
    data = {"vertices": np.array(verts), "segments": np.array(segs, dtype=np.int32)}
    if domain.holes:
        data["holes"] = np.array([interior_point(h) for h in domain.holes])
    return data


def _triangle_mesh(domain: DomainSpec, h: float, min_angle: float = 28.0,
                   keep_boundary: bool = False) -> Mesh:
    import triangle

    data = _pslg(domain)
    area = h * h * math.sqrt(3) / 4
    opts = f"pq{min_angle}a{area:.20f}" + ("Y" if keep_boundary else "") + "Q"
    out = triangle.triangulate(data, opts)
    tris = out["triangles"].astype(np.int64)
    verts = out["vertices"]
    t = verts[tris]
    e1 = t[:, 1] - t[:, 0]
    e2 = t[:, 2] - t[:, 0]
    flip = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return _compress(verts, tris, h)


def triangulate(domain: DomainSpec, ell: float, scheme: str = "auto", strict: bool = True,
                keep_boundary: bool = False) -> Mesh:
    """Conforming quality mesh at scale ``ell`` with slit vertices split.

    ``scheme`` is "structured" (axis-aligned domains on an ell-grid),
    "delaunay" (constrained quality Delaunay) or "auto".  With ``strict``
    the scale must not exceed the smallest geometric feature.
    """
    if ell <= 0:
        raise ValidationError("mesh scale must be positive")
    if strict:
        size, what = feature_size(domain)
        if ell > size * (1 + 1e-9):
            raise MeshError(f"scale exceeds feature size: ell={ell:.6g} > {what}")
    if scheme == "auto":
        scheme = "structured" if _on_grid(domain, ell) else "delaunay"
    if scheme == "structured":
        if not _on_grid(domain, ell):
            raise MeshError("structured scheme needs an axis-aligned domain with vertices on the ell-grid")
        mesh = structured_mesh(domain, ell)
    elif scheme == "delaunay":
        mesh = _triangle_mesh(domain, ell, keep_boundary=keep_boundary)
    else:
        raise ValidationError(f"unknown mesh scheme {scheme!r}")
    return split_slit_vertices(mesh, domain)


def split_slit_vertices(mesh: Mesh, domain: DomainSpec) -> Mesh:
    """Give every slit vertex one copy per connected side of its fan."""
    if not domain.slits:
        return mesh
    slit_segs = domain.slit_segments
    verts = mesh.vertices
    tris = mesh.triangles.copy()
    on_slit = _dist_to_segments(verts, slit_segs) <= 1e-9 * max(1.0, domain.diameter)
    if not on_slit.any():
        return mesh
    edges, tri_edges = mesh.edges
    mid = verts[edges].mean(axis=1)
    is_slit_edge = on_slit[edges[:, 0]] & on_slit[edges[:, 1]] & \
        (_dist_to_segments(mid, slit_segs) <= 1e-9 * max(1.0, domain.diameter))
    slit_edge_set = {tuple(e) for e in edges[is_slit_edge].tolist()}
    inc = mesh.vertex_triangles.tocsr()
    new_verts = [verts]
    tags = np.zeros(len(verts), dtype=np.int8)
    tag_list = []
    dups = []
    next_id = len(verts)
    cent = mesh.centroids
    for v in np.flatnonzero(on_slit):
        fan = inc.indices[inc.indptr[v]:inc.indptr[v + 1]]
        if len(fan) == 0:
            continue
        # union-find over the fan, joined across non-slit edges through v
        parent = {int(t): int(t) for t in fan}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        by_edge: dict = {}
        for t in fan:
            for w in tris[t]:
                if w == v:
                    continue
                key = (min(v, w), max(v, w))
                if key in slit_edge_set:
                    continue
                by_edge.setdefault(key, []).append(int(t))
        for ts in by_edge.values():
            for t in ts[1:]:
                ra, rb = find(ts[0]), find(t)
                if ra != rb:
                    parent[ra] = rb
        comps: dict = {}
        for t in fan:
            comps.setdefault(find(int(t)), []).append(int(t))
        if len(comps) < 2:
            continue
        groups = sorted(comps.values(), key=lambda g: min(g))
        sides = [_side_of(verts[v], cent[g].mean(axis=0), slit_segs) for g in groups]
        tags[v] = sides[0]
        ids = [v]
        for g, side in zip(groups[1:], sides[1:]):
            nid = next_id
            next_id += 1
            new_verts.append(verts[v][None])
            tag_list.append(side)
            for t in g:
                tris[t][tris[t] == v] = nid
            ids.append(nid)
        for other in ids[1:]:
            dups.append((v, other))
    all_verts = np.concatenate(new_verts)
    all_tags = np.concatenate([tags, np.array(tag_list, dtype=np.int8)])
    return Mesh(all_verts, tris, mesh.target_scale, all_tags, np.array(dups, dtype=np.int64).reshape(-1, 2))


def _side_of(v: np.ndarray, c: np.ndarray, slit_segs: np.ndarray) -> int:
    d = _dist_to_segments(v[None], slit_segs)
    seg_d = np.array([_dist_to_segments(v[None], s[None])[0] for s in slit_segs])
    near = np.flatnonzero(seg_d <= d[0] + 1e-12)
    a, b = slit_segs[near[0]]
    u = b - a
    w = c - a
    return 1 if u[0] * w[1] - u[1] * w[0] > 0 else -1


def refine(mesh: Mesh) -> Mesh:
    """Red refinement; children of triangle t are 4t .. 4t+3."""
    verts = mesh.vertices
    edges, tri_edges = mesh.edges
    mids = verts[edges].mean(axis=1)
    n = len(verts)
    e_id = tri_edges + n  # local edge i is opposite vertex i
    t = mesh.triangles
    v0, v1, v2 = t[:, 0], t[:, 1], t[:, 2]
    m12, m20, m01 = e_id[:, 0], e_id[:, 1], e_id[:, 2]
    kids = np.stack([
        np.column_stack([v0, m01, m20]),
        np.column_stack([m01, v1, m12]),
        np.column_stack([m20, m12, v2]),
        np.column_stack([m01, m12, m20]),
    ], axis=1).reshape(-1, 3)
    tags = mesh.side_tags
    mid_tags = np.where(tags[edges[:, 0]] == tags[edges[:, 1]], tags[edges[:, 0]], 0).astype(np.int8)
    # a midpoint inherits a side only if one endpoint is tagged and the other lies on the same side
    one = (tags[edges[:, 0]] != 0) ^ (tags[edges[:, 1]] != 0)
    mid_tags = np.where(one, tags[edges[:, 0]] + tags[edges[:, 1]], mid_tags).astype(np.int8)
    new_verts = np.concatenate([verts, mids])
    new_tags = np.concatenate([tags, mid_tags])
    out = Mesh(new_verts, kids, mesh.target_scale / 2, new_tags, None, mesh.conforming)
    out.dup_pairs = _coincident_pairs(out) if len(mesh.dup_pairs) else np.zeros((0, 2), np.int64)
    return out


def _coincident_pairs(mesh: Mesh) -> np.ndarray:
    tagged = np.flatnonzero(mesh.side_tags != 0)
    if len(tagged) == 0:
        return np.zeros((0, 2), np.int64)
    key = np.round(mesh.vertices[tagged] * 1e9).astype(np.int64)
    order = np.lexsort((mesh.side_tags[tagged], key[:, 1], key[:, 0]))
    k = key[order]
    same = np.all(k[1:] == k[:-1], axis=1)
    i = tagged[order[:-1][same]]
    j = tagged[order[1:][same]]
    return np.column_stack([i, j])


def refine_times(mesh: Mesh, k: int) -> Mesh:
    for _ in range(k):
        mesh = refine(mesh)
    return mesh


def triangle_soup(tri: np.ndarray, scale: float) -> Mesh:
    """Quadrature-only mesh from independent triangles (oriented CCW)."""
    tri = np.asarray(tri, float).copy()
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    flip = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    verts = tri.reshape(-1, 2)
    tris = np.arange(len(verts)).reshape(-1, 3)
    return Mesh(verts, tris, scale, conforming=False)


def quadrature_mesh(domain) -> Mesh:
    """Coarsest triangle partition of the domain, the level-0 quadrature mesh."""
    if isinstance(domain, SnowflakeDomain):
        base = np.array([[[0, 0], [1, 0], [1, 1]], [[0, 0], [1, 1], [0, 1]]], float)
        return triangle_soup(np.concatenate([base, domain.tree.triangles]), 1.0)
    for h in (1.0, 0.5, 0.25, 0.125):
        if _on_grid(domain, h):
            return triangulate(domain, h, scheme="structured", strict=False)
    size, _ = feature_size(domain)
    return triangulate(domain, size, scheme="delaunay", strict=False)


# -- partitions of unity ------------------------------------------------------


class PartitionOfUnity:
    """Common interface of the Lagrange and snowflake partitions."""

    scale: float
    n_functions: int

    def evaluate(self, pts: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
        """Values and x/y derivatives of every function at the points."""
        raise NotImplementedError

    def quadrature_cells(self) -> np.ndarray:
        """Triangles covering the domain on which every function is smooth."""
        raise NotImplementedError

    def patch_cells(self, j: int) -> np.ndarray:
        raise NotImplementedError

    def covering_patches(self, pts: np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError

    john_centers: np.ndarray
    john_radii: np.ndarray

    def patch_diameters(self) -> np.ndarray:
        out = np.empty(self.n_functions)
        for j in range(self.n_functions):
            pts = self.patch_cells(j).reshape(-1, 2)
            d = pts[:, None] - pts[None]
            out[j] = np.sqrt((d ** 2).sum(-1).max())
        return out

    def gradient_sup(self) -> np.ndarray:
        raise NotImplementedError

    def overlap(self, pts: np.ndarray) -> np.ndarray:
        return np.array([len(c) for c in self.covering_patches(pts)])


class LagrangePartition(PartitionOfUnity):
    """Hat functions of a (slit-split) mesh; patch j = star of vertex j."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.scale = mesh.target_scale
        self.n_functions = mesh.n_vertices
        inc = mesh.vertex_triangles.tocsr()
        self._star = inc
        centers, radii = mesh.incircles()
        self.john_centers = np.empty((self.n_functions, 2))
        self.john_radii = np.empty(self.n_functions)
        for j in range(self.n_functions):
            star = inc.indices[inc.indptr[j]:inc.indptr[j + 1]]
            k = star[np.argmax(radii[star])]
            self.john_centers[j] = centers[k]
            self.john_radii[j] = radii[k]

    def star(self, j: int) -> np.ndarray:
        return self._star.indices[self._star.indptr[j]:self._star.indptr[j + 1]]

    def patch_cells(self, j: int) -> np.ndarray:
        return self.mesh.tri_vertices[self.star(j)]

    def quadrature_cells(self) -> np.ndarray:
        return self.mesh.tri_vertices

    def evaluate(self, pts):
        pts = np.atleast_2d(pts)
        tri, lam = self.mesh.locator.locate(pts)
        ok = tri >= 0
        rows = np.repeat(np.flatnonzero(ok), 3)
        cols = self.mesh.triangles[tri[ok]].ravel()
        g = self.mesh.barycentric_gradients[tri[ok]]
        shape = (len(pts), self.n_functions)
        val = sp.csr_matrix((lam[ok].ravel(), (rows, cols)), shape=shape)
        gx = sp.csr_matrix((g[:, :, 0].ravel(), (rows, cols)), shape=shape)
        gy = sp.csr_matrix((g[:, :, 1].ravel(), (rows, cols)), shape=shape)
        return val, gx, gy

    def gradient_sup(self) -> np.ndarray:
        g = np.linalg.norm(self.mesh.barycentric_gradients, axis=2)
        out = np.zeros(self.n_functions)
        np.maximum.at(out, self.mesh.triangles.ravel(), g.ravel())
        return out

    def covering_patches(self, pts):
        tri, _ = self.mesh.locator.locate(np.atleast_2d(pts))
        return [self.mesh.triangles[t] if t >= 0 else np.zeros(0, np.int64) for t in tri]

    def patch_diameters(self) -> np.ndarray:
        tv = self.mesh.tri_vertices
        out = np.zeros(self.n_functions)
        inc = self._star
        for j in range(self.n_functions):
            pts = tv[inc.indices[inc.indptr[j]:inc.indptr[j + 1]]].reshape(-1, 2)
            d = pts[:, None] - pts[None]
            out[j] = math.sqrt(float((d ** 2).sum(-1).max()))
        return out


def lagrange_partition(mesh: Mesh) -> LagrangePartition:
    if not mesh.conforming:
        raise MeshError("a Lagrange partition needs a conforming mesh")
    return LagrangePartition(mesh)


class SnowflakePartition(PartitionOfUnity):
    """Hat functions of D_N extended over descendant tents and renormalized."""

    def __init__(self, sdomain: SnowflakeDomain, N: int, mesh: Mesh):
        self.sdomain = sdomain
        self.N = N
        self.mesh = mesh
        self.base = LagrangePartition(mesh)
        self.scale = mesh.target_scale
        self.n_functions = mesh.n_vertices
        self.john_centers = self.base.john_centers
        self.john_radii = self.base.john_radii
        curve, tree = sdomain.curve, sdomain.tree
        n_seg = len(curve.history[N])
        # boundary edge k of D_N joins vertices k and k+1 (no boundary Steiner points)
        edge_tri = _edge_owner(mesh, n_seg)
        self.segment_triangle = edge_tri
        deep = np.flatnonzero(tree.generation > N)
        self.tents = tree.triangles[deep]
        if len(deep):
            hosts = tree.host[deep]
            gens = tree.generation[deep]
            root = np.empty(len(deep), dtype=np.int64)
            for g in np.unique(gens):
                sel = gens == g
                root[sel] = curve.ancestor_segment(int(g) - 1, hosts[sel], N)
        else:
            root = np.zeros(0, np.int64)
        self.tent_segment = root
        self.tent_triangle = edge_tri[root]
        self.tent_locator = TriLocator(self.tents) if len(deep) else None
        # patches: star of vertex j plus tents attached to any triangle of the star
        tri_tents: dict = {}
        for i, t in enumerate(self.tent_triangle.tolist()):
            tri_tents.setdefault(t, []).append(i)
        self._tri_tents = tri_tents

    def attached_tents(self, j: int) -> np.ndarray:
        out = []
        for t in self.base.star(j).tolist():
            out.extend(self._tri_tents.get(t, []))
        return np.array(sorted(out), dtype=np.int64)

    def patch_cells(self, j: int) -> np.ndarray:
        return np.concatenate([self.base.patch_cells(j), self.tents[self.attached_tents(j)]])

    def quadrature_cells(self) -> np.ndarray:
        tents = self.tents
        if len(tents):
            tents = refine_times(triangle_soup(tents, 1.0), 2).tri_vertices
        return np.concatenate([self.mesh.tri_vertices, tents])

    def _tent_values(self, pts: np.ndarray, tent: np.ndarray):
        k = self.tent_triangle[tent]
        seg = self.tent_segment[tent]
        n_seg = len(self.segment_triangle)
        a = seg
        b = (seg + 1) % n_seg
        tv = self.mesh.tri_vertices[k]
        g = self.mesh.barycentric_gradients[k]
        lam = _barycentric(tv, g, pts)
        tri = self.mesh.triangles[k]
        la = np.where(tri == a[:, None], lam, 0).sum(1)
        lb = np.where(tri == b[:, None], lam, 0).sum(1)
        ga = np.where((tri == a[:, None])[..., None], g, 0).sum(1)
        gb = np.where((tri == b[:, None])[..., None], g, 0).sum(1)
        pa = np.maximum(la, 0.0)
        pb = np.maximum(lb, 0.0)
        ga = ga * (la > 0)[:, None]
        gb = gb * (lb > 0)[:, None]
        s = pa + pb
        gs = ga + gb
        va, vb = pa / s, pb / s
        dva = (ga * s[:, None] - pa[:, None] * gs) / (s ** 2)[:, None]
        dvb = (gb * s[:, None] - pb[:, None] * gs) / (s ** 2)[:, None]
        return a, b, va, vb, dva, dvb

    def evaluate(self, pts):
        pts = np.atleast_2d(pts)
        val, gx, gy = self.base.evaluate(pts)
        if self.tent_locator is None:
            return val, gx, gy
        tri, _ = self.mesh.locator.locate(pts)
        out = np.flatnonzero(tri < 0)
        if len(out) == 0:
            return val, gx, gy
        tent, _ = self.tent_locator.locate(pts[out])
        ok = tent >= 0
        rows = out[ok]
        a, b, va, vb, dva, dvb = self._tent_values(pts[rows], tent[ok])
        r = np.concatenate([rows, rows])
        c = np.concatenate([a, b])
        shape = val.shape
        val = val + sp.csr_matrix((np.concatenate([va, vb]), (r, c)), shape=shape)
        gx = gx + sp.csr_matrix((np.concatenate([dva[:, 0], dvb[:, 0]]), (r, c)), shape=shape)
        gy = gy + sp.csr_matrix((np.concatenate([dva[:, 1], dvb[:, 1]]), (r, c)), shape=shape)
        return val, gx, gy

    def gradient_sup(self, samples_per_tent: int = 24) -> np.ndarray:
        out = self.base.gradient_sup()
        if len(self.tents) == 0:
            return out
        rng = np.random.default_rng(0)
        u = rng.dirichlet([1, 1, 1], size=samples_per_tent)
        pts = np.einsum("sk,tkd->tsd", u, self.tents).reshape(-1, 2)
        tent = np.repeat(np.arange(len(self.tents)), samples_per_tent)
        a, b, _, _, dva, dvb = self._tent_values(pts, tent)
        np.maximum.at(out, a, np.linalg.norm(dva, axis=1))
        np.maximum.at(out, b, np.linalg.norm(dvb, axis=1))
        return out

    def covering_patches(self, pts):
        pts = np.atleast_2d(pts)
        tri, _ = self.mesh.locator.locate(pts)
        res = []
        tent = np.full(len(pts), -1)
        miss = np.flatnonzero(tri < 0)
        if len(miss) and self.tent_locator is not None:
            tent[miss], _ = self.tent_locator.locate(pts[miss])
        for i in range(len(pts)):
            if tri[i] >= 0:
                res.append(self.mesh.triangles[tri[i]])
            elif tent[i] >= 0:
                res.append(self.mesh.triangles[self.tent_triangle[tent[i]]])
            else:
                res.append(np.zeros(0, np.int64))
        return res


def _barycentric(tv: np.ndarray, g: np.ndarray, pts: np.ndarray) -> np.ndarray:
    d = pts - tv[:, 0]
    l1 = (g[:, 1] * d).sum(1)
    l2 = (g[:, 2] * d).sum(1)
    return np.column_stack([1 - l1 - l2, l1, l2])


def _edge_owner(mesh: Mesh, n_seg: int) -> np.ndarray:
    """Triangle containing boundary edge (k, k+1) for each polygon segment k."""
    edges, tri_edges = mesh.edges
    lookup = {tuple(e): i for i, e in enumerate(edges.tolist())}
    owner_of_edge = np.full(len(edges), -1, dtype=np.int64)
    owner_of_edge[tri_edges.ravel()] = np.repeat(np.arange(mesh.n_triangles), 3)
    out = np.empty(n_seg, dtype=np.int64)
    for k in range(n_seg):
        key = (min(k, (k + 1) % n_seg), max(k, (k + 1) % n_seg))
        if key not in lookup:
            raise MeshError(f"boundary segment {k} of D_N was split by the mesher")
        out[k] = owner_of_edge[lookup[key]]
    return out


def generation_for_scale(p: float, ell: float) -> int:
    ratio = math.log(ell) / math.log(p)
    n = math.ceil(ratio - 1e-9)
    return int(n)


def snowflake_partition(plan: SnowflakePlan | SnowflakeDomain, ell: float) -> tuple[Mesh, SnowflakePartition]:
    """Mesh of D_N with p^N ~ ell and the extended, renormalized partition on D."""
    sdomain = plan if isinstance(plan, SnowflakeDomain) else snowflake_domain(plan)
    p = sdomain.plan.p
    N = generation_for_scale(p, ell)
    if N < 1:
        raise ValidationError(f"scale {ell} too large: need p^N ~ ell with N >= 1")
    if N > sdomain.plan.N:
        raise ValidationError(
            f"plan too shallow: scale {ell} needs generation {N} but the plan has N_max={sdomain.plan.N}")
    poly = sdomain.curve.history[N]
    seg = np.linalg.norm(np.roll(poly, -1, axis=0) - poly, axis=1)
    h = float(seg.min())
    dom_n = DomainSpec(poly.copy(), name=f"snowflake_D{N}", validate=False)
    mesh = _triangle_mesh(dom_n, h, min_angle=25.0, keep_boundary=True)
    # triangle keeps input vertices first; _compress preserves that order when all are used
    if not np.allclose(mesh.vertices[:len(poly)], poly):
        raise MeshError("mesher reordered the boundary vertices of D_N")
    mesh.target_scale = ell
    return mesh, SnowflakePartition(sdomain, N, mesh)


# -- audits -------------------------------------------------------------------


def mesh_quality(mesh: Mesh, partition: PartitionOfUnity | None = None,
                 n_samples: int = 2000, seed: int = 0) -> tuple[float, float, int]:
    """(min inradius / ell, max circumradius / ell, max patch overlap)."""
    ell = mesh.target_scale
    _, r_in = mesh.incircles()
    r_out = mesh.circumradii()
    if partition is None:
        overlap = 3 if mesh.n_triangles else 0
    else:
        cells = partition.quadrature_cells()
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, len(cells), n_samples)
        u = rng.dirichlet([1, 1, 1], size=n_samples)
        pts = np.einsum("sk,skd->sd", u, cells[idx])
        overlap = int(partition.overlap(pts).max())
    return float(r_in.min() / ell), float(r_out.max() / ell), overlap


# -- file formats -------------------------------------------------------------


def write_mesh(mesh: Mesh, path: str | Path) -> None:
    lines = [f"# scale {mesh.target_scale!r}"]
    for (x, y), tag in zip(mesh.vertices.tolist(), mesh.side_tags.tolist()):
        lines.append(f"v {x!r} {y!r}" + (f" {tag}" if tag else ""))
    for i, j, k in mesh.triangles.tolist():
        lines.append(f"t {i} {j} {k}")
    for i, j in mesh.dup_pairs.tolist():
        lines.append(f"dup {i} {j}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path: str | Path) -> Mesh:
    verts, tags, tris, dups = [], [], [], []
    scale = float("nan")
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        try:
            if parts[0] == "#" and len(parts) >= 3 and parts[1] == "scale":
                scale = float(parts[2])
            elif parts[0] == "v":
                verts.append((float(parts[1]), float(parts[2])))
                tags.append(int(parts[3]) if len(parts) > 3 else 0)
            elif parts[0] == "t":
                tris.append(tuple(int(x) for x in parts[1:4]))
            elif parts[0] == "dup":
                dups.append((int(parts[1]), int(parts[2])))
            elif parts[0].startswith("#"):
                continue
            else:
                raise ValueError(parts[0])
        except (ValueError, IndexError) as exc:
            raise ValidationError(f"mesh file line {n}: cannot parse {raw!r}") from exc
    return Mesh(np.array(verts), np.array(tris, dtype=np.int64), scale,
                np.array(tags, dtype=np.int8), np.array(dups, dtype=np.int64).reshape(-1, 2))


def partition_to_json(pu: PartitionOfUnity) -> dict:
    mesh = pu.mesh
    out = {
        "scale": pu.scale,
        "vertices": mesh.vertices.tolist(),
        "triangles": mesh.triangles.tolist(),
        "functions": [],
    }
    for j in range(pu.n_functions):
        star = pu.base.star(j) if isinstance(pu, SnowflakePartition) else pu.star(j)
        patch_vertices = np.unique(mesh.triangles[star])
        entry = {
            "vertex": j,
            "patch_triangles": star.tolist(),
            "patch_vertices": patch_vertices.tolist(),
            "coefficients": (patch_vertices == j).astype(float).tolist(),
            "john_center": pu.john_centers[j].tolist(),
            "john_radius": float(pu.john_radii[j]),
        }
        if isinstance(pu, SnowflakePartition):
            entry["extension_tents"] = pu.attached_tents(j).tolist()
        out["functions"].append(entry)
    if isinstance(pu, SnowflakePartition):
        out["tents"] = pu.tents.tolist()
    return out


def write_partition(pu: PartitionOfUnity, path: str | Path) -> None:
    Path(path).write_text(json.dumps(partition_to_json(pu)))
