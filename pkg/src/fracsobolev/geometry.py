"""Planar polygonal domains with holes and slits.

A domain is the open set bounded by an outer polygon, minus the closed
hole polygons, minus the slits (open polylines of zero width).  All
queries here treat both sides of a slit alike; the meshing module is
the only place where the two sides are told apart.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, ValidationError

BOUNDARY_TOL = 1e-12

Point2 = tuple[float, float]


@dataclass(frozen=True)
class Exponents:
    """Smoothness ``s`` in (0, 1) and integrability ``p`` in [1, inf)."""

    s: float
    p: float

    def __post_init__(self) -> None:
        if not (0.0 < self.s < 1.0):
            raise ValidationError(f"s must lie in (0, 1), got {self.s}")
        if not (1.0 <= self.p < math.inf):
            raise ValidationError(f"p must lie in [1, inf), got {self.p}")

    @property
    def conjugate(self) -> float:
        return math.inf if self.p == 1.0 else self.p / (self.p - 1.0)

    @property
    def radial_exponent(self) -> float:
        """p - s p, the power of r left after the polar Jacobian."""
        return self.p - self.s * self.p


def signed_area(chain: np.ndarray) -> float:
    x, y = chain[:, 0], chain[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _as_chain(points, name: str, min_len: int) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError(f"{name}: expected a list of [x, y] pairs")
    if len(arr) < min_len:
        raise ValidationError(f"{name}: needs at least {min_len} vertices, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite coordinate")
    return arr


def _closed_segments(chain: np.ndarray) -> np.ndarray:
    return np.stack([chain, np.roll(chain, -1, axis=0)], axis=1)


def _open_segments(chain: np.ndarray) -> np.ndarray:
    return np.stack([chain[:-1], chain[1:]], axis=1)


@dataclass(frozen=True, eq=False)
class DomainSpec:
    """Outer polygon (CCW), holes (CW) and slits, as float arrays.

    Use :meth:`from_lists` or :func:`load_domain` to build one; the
    constructor validates and normalizes orientation.
    """

    outer: np.ndarray
    holes: tuple[np.ndarray, ...] = ()
    slits: tuple[np.ndarray, ...] = ()
    name: str = "custom"
    validate: bool = field(default=True, repr=False)

    def __post_init__(self) -> None:
        outer = _as_chain(self.outer, "outer", 3)
        if signed_area(outer) < 0:
            outer = outer[::-1].copy()
        holes = []
        for k, h in enumerate(self.holes):
            h = _as_chain(h, f"holes[{k}]", 3)
            if signed_area(h) > 0:
                h = h[::-1].copy()
            holes.append(h)
        slits = tuple(_as_chain(s, f"slits[{k}]", 2) for k, s in enumerate(self.slits))
        object.__setattr__(self, "outer", outer)
        object.__setattr__(self, "holes", tuple(holes))
        object.__setattr__(self, "slits", slits)
        if self.validate:
            self._check()

    @classmethod
    def from_lists(cls, outer, holes=(), slits=(), name: str = "custom") -> "DomainSpec":
        return cls(np.asarray(outer, float), tuple(np.asarray(h, float) for h in holes),
                   tuple(np.asarray(s, float) for s in slits), name=name)

    # -- derived geometry -------------------------------------------------

    @cached_property
    def closed_segments(self) -> np.ndarray:
        """Segments of the outer polygon and holes, shape (m, 2, 2)."""
        segs = [_closed_segments(self.outer)] + [_closed_segments(h) for h in self.holes]
        return np.concatenate(segs, axis=0)

    @cached_property
    def slit_segments(self) -> np.ndarray:
        if not self.slits:
            return np.zeros((0, 2, 2))
        return np.concatenate([_open_segments(s) for s in self.slits], axis=0)

    @cached_property
    def segments(self) -> np.ndarray:
        """Every boundary segment (outer, holes, slits), shape (m, 2, 2)."""
        return np.concatenate([self.closed_segments, self.slit_segments], axis=0)

    @cached_property
    def area(self) -> float:
        return signed_area(self.outer) + sum(signed_area(h) for h in self.holes)

    @cached_property
    def bbox(self) -> tuple[float, float, float, float]:
        x, y = self.outer[:, 0], self.outer[:, 1]
        return float(x.min()), float(y.min()), float(x.max()), float(y.max())

    @cached_property
    def diameter(self) -> float:
        pts = self.outer
        d = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())

    @cached_property
    def min_segment_length(self) -> float:
        seg = self.segments
        return float(np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1).min())

    def translated(self, shift) -> "DomainSpec":
        v = np.asarray(shift, float)
        return DomainSpec(self.outer + v, tuple(h + v for h in self.holes),
                          tuple(s + v for s in self.slits), name=self.name, validate=False)

    def rotated(self, angle: float, center=(0.0, 0.0)) -> "DomainSpec":
        c = np.asarray(center, float)
        R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])

        def rot(a):
            return (a - c) @ R.T + c

        return DomainSpec(rot(self.outer), tuple(rot(h) for h in self.holes),
                          tuple(rot(s) for s in self.slits), name=self.name, validate=False)

    # -- validation --------------------------------------------------------

    def _check(self) -> None:
        seg = self.segments
        lengths = np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1)
        if np.any(lengths <= BOUNDARY_TOL):
            raise ValidationError("zero-length boundary segment")
        chains = [("outer", _closed_segments(self.outer), True)]
        chains += [(f"holes[{k}]", _closed_segments(h), True) for k, h in enumerate(self.holes)]
        chains += [(f"slits[{k}]", _open_segments(s), False) for k, s in enumerate(self.slits)]
        for name, segs, closed in chains:
            if not closed:
                # slit endpoints may touch other chains
                segs = _trim_ends(segs)
            if _self_intersects(segs, closed):
                raise ValidationError(f"{name}: chain is not simple")
        for i in range(len(chains)):
            for j in range(i + 1, len(chains)):
                a, b = chains[i][1], chains[j][1]
                a = a if chains[i][2] else _trim_ends(a)
                b = b if chains[j][2] else _trim_ends(b)
                if _chains_cross(a, b):
                    raise ValidationError(f"{chains[i][0]} and {chains[j][0]} cross")
        for k, h in enumerate(self.holes):
            if not np.all(_inside_polygon(self.outer, h)):
                raise ValidationError(f"holes[{k}] is not strictly inside outer")
            for j, other in enumerate(self.holes):
                if j != k and np.any(_inside_polygon(other, h)):
                    raise ValidationError(f"holes[{k}] overlaps holes[{j}]")
        closed = self.closed_segments
        for k, s in enumerate(self.slits):
            inside = _inside_polygon(self.outer, s) | (_dist_to_segments(s, closed) <= BOUNDARY_TOL)
            if not np.all(inside):
                raise ValidationError(f"slits[{k}] leaves the outer polygon")
            for h in self.holes:
                if np.any(_inside_polygon(h, s) & (_dist_to_segments(s, closed) > BOUNDARY_TOL)):
                    raise ValidationError(f"slits[{k}] enters a hole")
            others = np.concatenate([closed] + [_open_segments(t) for j, t in enumerate(self.slits) if j != k])
            ends = s[[0, -1]]
            touching = _dist_to_segments(ends, others) <= BOUNDARY_TOL
            if np.all(touching):
                raise ValidationError(f"slits[{k}] touches the boundary at both ends; interior would be disconnected")

    # -- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "outer": self.outer.tolist(),
            "holes": [h.tolist() for h in self.holes],
            "slits": [s.tolist() for s in self.slits],
        }


def load_domain(source: str | Path | dict, name: str | None = None) -> DomainSpec:
    """Parse domain JSON (path, JSON text, or already-decoded dict)."""
    if isinstance(source, dict):
        data = source
    else:
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"domain JSON, line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict) or "outer" not in data:
        raise ValidationError("domain JSON: missing field 'outer'")
    for key in ("holes", "slits"):
        if key in data and not isinstance(data[key], list):
            raise ValidationError(f"domain JSON: field '{key}' must be a list of chains")
    return DomainSpec.from_lists(data["outer"], data.get("holes", []), data.get("slits", []),
                                 name=name or data.get("name", "custom"))


def dump_domain(domain: DomainSpec) -> str:
    return json.dumps(domain.to_json_dict())


def unit_square() -> DomainSpec:
    return DomainSpec.from_lists([[0, 0], [1, 0], [1, 1], [0, 1]], name="square")


def slit_domain() -> DomainSpec:
    """(-1, 1)^2 minus the slit (0, 1) x {0}."""
    return DomainSpec.from_lists([[-1, -1], [1, -1], [1, 1], [-1, 1]],
                                 slits=[[[0, 0], [1, 0]]], name="slit")


# -- vectorized kernels -----------------------------------------------------


def _dist_to_segments(pts: np.ndarray, segs: np.ndarray, chunk: int = 1 << 22) -> np.ndarray:
    """Minimum Euclidean distance from each point to a set of segments."""
    pts = np.atleast_2d(np.asarray(pts, float))
    if len(segs) == 0:
        return np.full(len(pts), np.inf)
    a = segs[:, 0]
    ab = segs[:, 1] - a
    ab2 = (ab ** 2).sum(1)
    out = np.empty(len(pts))
    step = max(1, chunk // len(segs))
    for i in range(0, len(pts), step):
        p = pts[i:i + step, None, :]
        ap = p - a[None]
        t = np.clip((ap * ab[None]).sum(-1) / ab2[None], 0.0, 1.0)
        d = ap - t[..., None] * ab[None]
        out[i:i + step] = np.sqrt((d ** 2).sum(-1).min(1))
    return out


def _crossing_parity(pts: np.ndarray, segs: np.ndarray, chunk: int = 1 << 22) -> np.ndarray:
    """Even-odd ray casting (ray towards +x) against closed-chain segments."""
    out = np.zeros(len(pts), dtype=bool)
    x0, y0 = segs[:, 0, 0], segs[:, 0, 1]
    x1, y1 = segs[:, 1, 0], segs[:, 1, 1]
    step = max(1, chunk // max(len(segs), 1))
    for i in range(0, len(pts), step):
        px = pts[i:i + step, 0:1]
        py = pts[i:i + step, 1:2]
        straddle = (y0[None] > py) != (y1[None] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x0[None] + (py - y0[None]) * (x1 - x0)[None] / (y1 - y0)[None]
        hit = straddle & (xc > px)
        out[i:i + step] = (hit.sum(1) % 2) == 1
    return out


def _inside_polygon(chain: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(pts)
    segs = _closed_segments(chain)
    inside = _crossing_parity(pts, segs)
    on = _dist_to_segments(pts, segs) <= BOUNDARY_TOL
    return inside & ~on


def _orient(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def segments_intersect(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Pairwise closed-segment intersection test with broadcasting.

    ``s1`` (..., 2, 2) and ``s2`` (..., 2, 2); collinear overlaps count.
    """
    p1, p2 = s1[..., 0, :], s1[..., 1, :]
    q1, q2 = s2[..., 0, :], s2[..., 1, :]
    scale = max(1.0, float(np.abs(s1).max(initial=0)), float(np.abs(s2).max(initial=0)))
    eps = 1e-13 * scale * scale
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    proper = (((d1 > eps) & (d2 < -eps)) | ((d1 < -eps) & (d2 > eps))) & \
             (((d3 > eps) & (d4 < -eps)) | ((d3 < -eps) & (d4 > eps)))

    def on_seg(a, b, c, d):
        within = (np.minimum(a[..., 0], b[..., 0]) - 1e-12 <= c[..., 0]) & \
                 (c[..., 0] <= np.maximum(a[..., 0], b[..., 0]) + 1e-12) & \
                 (np.minimum(a[..., 1], b[..., 1]) - 1e-12 <= c[..., 1]) & \
                 (c[..., 1] <= np.maximum(a[..., 1], b[..., 1]) + 1e-12)
        return (np.abs(d) <= eps) & within

    touch = on_seg(q1, q2, p1, d1) | on_seg(q1, q2, p2, d2) | on_seg(p1, p2, q1, d3) | on_seg(p1, p2, q2, d4)
    return proper | touch


def segment_distance(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Distance between closed segments, broadcasting over leading axes."""
    s1, s2 = np.broadcast_arrays(s1, s2)

    def pd(p, a, b):
        ab = b - a
        t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab ** 2).sum(-1), 1e-300), 0, 1)
        return np.linalg.norm(p - a - t[..., None] * ab, axis=-1)

    d = np.minimum.reduce([
        pd(s1[..., 0, :], s2[..., 0, :], s2[..., 1, :]),
        pd(s1[..., 1, :], s2[..., 0, :], s2[..., 1, :]),
        pd(s2[..., 0, :], s1[..., 0, :], s1[..., 1, :]),
        pd(s2[..., 1, :], s1[..., 0, :], s1[..., 1, :]),
    ])
    return np.where(segments_intersect(s1, s2), 0.0, d)


def _self_intersects(segs: np.ndarray, closed: bool, block: int = 512) -> bool:
    n = len(segs)
    if n > 2000:
        import shapely

        coords = segs[:, 0].tolist() + ([] if closed else [segs[-1, 1].tolist()])
        geom = shapely.LinearRing(coords) if closed else shapely.LineString(coords)
        return not geom.is_simple
    for i0 in range(0, n, block):
        a = segs[i0:i0 + block]
        hit = segments_intersect(a[:, None], segs[None, :])
        ii = np.arange(i0, i0 + len(a))[:, None]
        jj = np.arange(n)[None, :]
        adjacent = np.abs(ii - jj) <= 1
        if closed:
            adjacent |= np.abs(ii - jj) == n - 1
        hit &= ~adjacent & (jj > ii)
        if hit.any():
            return True
    # adjacent segments may only share their common endpoint
    return _adjacent_overlap(segs, closed)


def _adjacent_overlap(segs: np.ndarray, closed: bool) -> bool:
    nxt = np.roll(segs, -1, axis=0) if closed else segs[1:]
    cur = segs if closed else segs[:-1]
    u = cur[:, 1] - cur[:, 0]
    v = nxt[:, 1] - nxt[:, 0]
    cross = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
    dot = (u * v).sum(1)
    return bool(np.any((np.abs(cross) <= 1e-14 * np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)) & (dot < 0)))


def _trim_ends(segs: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    segs = segs.copy()
    d0 = segs[0, 1] - segs[0, 0]
    d1 = segs[-1, 0] - segs[-1, 1]
    segs[0, 0] += eps * d0 / np.linalg.norm(d0)
    segs[-1, 1] += eps * d1 / np.linalg.norm(d1)
    return segs


def _chains_cross(a: np.ndarray, b: np.ndarray, block: int = 512) -> bool:
    for i0 in range(0, len(a), block):
        if segments_intersect(a[i0:i0 + block, None], b[None, :]).any():
            return True
    return False


# -- public queries -----------------------------------------------------------


# above this many segments the GEOS kernels beat the numpy broadcast ones
_GEOS_SEGMENTS = 64


def _geos_parts(domain: DomainSpec):
    cached = domain.__dict__.get("_geos")
    if cached is None:
        import shapely

        rings = [shapely.LinearRing(domain.outer), *(shapely.LinearRing(h) for h in domain.holes)]
        lines = [shapely.LineString(sl) for sl in domain.slits]
        poly = shapely.Polygon(domain.outer, [h for h in domain.holes])
        shapely.prepare(poly)
        cached = (rings + lines, poly)
        domain.__dict__["_geos"] = cached
    return cached


def contains_points(domain: DomainSpec, pts) -> np.ndarray:
    """Vectorized :func:`contains` for an (n, 2) array."""
    pts = np.atleast_2d(np.asarray(pts, float))
    if len(domain.segments) > _GEOS_SEGMENTS:
        import shapely

        inside = shapely.contains_xy(_geos_parts(domain)[1], pts[:, 0], pts[:, 1])
    else:
        inside = _crossing_parity(pts, domain.closed_segments)
    near = distance_to_boundary(domain, pts) <= BOUNDARY_TOL
    return inside & ~near


def contains(domain: DomainSpec, pt) -> bool:
    """True iff ``pt`` lies in the open interior (slits count as boundary)."""
    return bool(contains_points(domain, np.asarray(pt, float)[None])[0])


def distance_to_boundary(domain: DomainSpec, pts) -> np.ndarray:
    """d(x) for many points, without checking membership."""
    pts = np.atleast_2d(np.asarray(pts, float))
    if len(domain.segments) > _GEOS_SEGMENTS:
        import shapely

        geoms = shapely.points(pts)
        return np.min([shapely.distance(geoms, g) for g in _geos_parts(domain)[0]], axis=0)
    return _dist_to_segments(pts, domain.segments)


def boundary_distance(domain: DomainSpec, pt) -> float:
    """Exact distance from an interior point to the nearest boundary chain."""
    if not contains(domain, pt):
        raise DomainError(f"point {tuple(pt)} is not in the open domain")
    return float(distance_to_boundary(domain, np.asarray(pt, float)[None])[0])


def in_restricted_pair(domain: DomainSpec, x, y) -> bool:
    """|x - y| < d(x) / 2 (asymmetric in x and y)."""
    d = boundary_distance(domain, x)
    return bool(math.dist(tuple(x), tuple(y)) < d / 2)


def restricted_pairs(domain: DomainSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = distance_to_boundary(domain, x)
    return np.linalg.norm(np.asarray(y) - np.asarray(x), axis=1) < d / 2


def segment_in_domain(domain: DomainSpec, x, y) -> bool:
    """True iff the closed segment [x, y] lies in the open interior."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if not (contains(domain, x) and contains(domain, y)):
        return False
    seg = np.stack([x, y])[None]
    d = segment_distance(seg, domain.segments)
    return bool(d.min() > BOUNDARY_TOL)


def segments_in_domain(domain: DomainSpec, x: np.ndarray, y: np.ndarray, block: int = 4096) -> np.ndarray:
    """Vectorized :func:`segment_in_domain` over matching rows of x and y."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    ok = contains_points(domain, x) & contains_points(domain, y)
    segs = np.stack([x, y], axis=1)
    bsegs = domain.segments
    for i in range(0, len(x), block):
        d = segment_distance(segs[i:i + block, None], bsegs[None])
        ok[i:i + block] &= d.min(1) > BOUNDARY_TOL
    return ok


def interior_point(chain: np.ndarray) -> np.ndarray:
    """A point strictly inside a simple polygon (used for hole markers)."""
    n = len(chain)
    for i in range(n):
        a, b, c = chain[i - 1], chain[i], chain[(i + 1) % n]
        for t in (0.5, 0.25, 0.1, 0.01):
            cand = b + t * ((a - b) + (c - b)) / 2
            if _inside_polygon(chain, cand[None])[0]:
                return cand
    raise ValidationError("could not find an interior point of a polygon")


def chains_of(domain: DomainSpec) -> Iterable[tuple[str, np.ndarray]]:
    yield "outer", domain.outer
    for h in domain.holes:
        yield "hole", h
    for s in domain.slits:
        yield "slit", s


def as_points(seq: Sequence) -> np.ndarray:
    return np.atleast_2d(np.asarray(seq, float))
