"""Snowflake-type curves built from the unit square by segment replacement.

Each generation replaces every segment of length L either by four
collinear quarters ("straight") or by a symmetric tent made of four
segments of length pL ("bump").  The two outer pieces of a bump stay on
the original line and the two inner ones rise to an apex above the
midpoint, so the apex height is L * sqrt(p^2 - (1/2 - p)^2), real for
1/4 < p < 1/2.  Every bump adds one triangle, recorded in a
:class:`TriangleTree` together with the tent whose side it grew on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import ConstructionError, ValidationError
from .geometry import DomainSpec

BUMP = "bump"
STRAIGHT = "straight"

Rule = Union[str, Sequence[str]]

UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def _norm_rule(r: str) -> str:
    key = str(r).strip().lower()
    if key not in (BUMP, STRAIGHT):
        raise ValidationError(f"unknown snowflake rule {r!r} (expected 'bump' or 'straight')")
    return key


@dataclass(frozen=True)
class SnowflakePlan:
    p: float
    rules: tuple = ()

    def __post_init__(self) -> None:
        if not (0.25 < self.p < 0.5):
            raise ValidationError(f"snowflake parameter p must lie in (1/4, 1/2), got {self.p}")
        rules = []
        for g, r in enumerate(self.rules):
            if isinstance(r, str):
                rules.append(_norm_rule(r))
            else:
                entry = tuple(_norm_rule(x) for x in r)
                expected = 4 * 4 ** g
                if len(entry) != expected:
                    raise ValidationError(
                        f"rules[{g}]: per-segment list needs {expected} entries, got {len(entry)}")
                rules.append(entry)
        object.__setattr__(self, "rules", tuple(rules))

    @property
    def N(self) -> int:
        return len(self.rules)

    @classmethod
    def uniform(cls, p: float, rule: str, N: int) -> "SnowflakePlan":
        return cls(p, (rule,) * N)

    def truncated(self, n: int) -> "SnowflakePlan":
        return SnowflakePlan(self.p, self.rules[:n])

    def ratio(self, g: int) -> float:
        """Length ratio of generation ``g`` (1-based) for uniform generations."""
        r = self.rules[g - 1]
        if not isinstance(r, str):
            raise ValidationError(f"generation {g} uses per-segment rules")
        return self.p if r == BUMP else 0.25

    def to_json_dict(self) -> dict:
        return {"p": self.p, "rules": [r if isinstance(r, str) else list(r) for r in self.rules]}


def load_plan(source: str | Path | dict) -> SnowflakePlan:
    if isinstance(source, dict):
        data = source
    else:
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"plan JSON, line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict) or "p" not in data or "rules" not in data:
        raise ValidationError("plan JSON needs fields 'p' and 'rules'")
    if not isinstance(data["rules"], list):
        raise ValidationError("plan JSON: 'rules' must be a list")
    return SnowflakePlan(float(data["p"]), tuple(data["rules"]))


@dataclass
class SnowflakeCurve:
    """Closed CCW polygon of the final generation, plus the full history.

    ``history[g]`` holds the vertices of generation g (segment k runs from
    vertex k to vertex k+1, cyclically); ``parents[g][k]`` is the index of
    the generation g-1 segment that segment k of generation g came from,
    and ``owners[g][k]`` the tent whose side contains it (-1 if none).
    """

    vertices: np.ndarray
    generation: int
    history: list = field(default_factory=list)
    parents: list = field(default_factory=list)
    owners: list = field(default_factory=list)

    @property
    def segments(self) -> np.ndarray:
        v = self.vertices
        return np.stack([v, np.roll(v, -1, axis=0)], axis=1)

    @property
    def segment_lengths(self) -> np.ndarray:
        seg = self.segments
        return np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1)

    @property
    def perimeter(self) -> float:
        return float(self.segment_lengths.sum())

    def area(self, generation: int | None = None) -> float:
        v = self.vertices if generation is None else self.history[generation]
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    def ancestor_segment(self, generation: int, index, target: int):
        """Index of the generation-``target`` segment containing a segment."""
        idx = np.asarray(index)
        for g in range(generation, target, -1):
            idx = self.parents[g][idx]
        return idx


@dataclass
class TriangleTree:
    """Tent triangles (P1, apex, P2) with parent links.

    ``host[i]`` is the index of the segment of generation
    ``generation[i] - 1`` that the tent replaced.
    """

    triangles: np.ndarray
    generation: np.ndarray
    parent: np.ndarray
    host: np.ndarray

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def roots(self) -> np.ndarray:
        return np.flatnonzero(self.parent < 0)

    def children(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.parent == i)

    def descendants(self, i: int) -> np.ndarray:
        out = []
        stack = [i]
        while stack:
            kids = self.children(stack.pop())
            out.extend(kids.tolist())
            stack.extend(kids.tolist())
        return np.array(sorted(out), dtype=int)


def _tent_height(p: float) -> float:
    return math.sqrt(p * p - (0.5 - p) ** 2)


def build_snowflake(plan: SnowflakePlan, check_simple: bool = True) -> tuple[SnowflakeCurve, TriangleTree]:
    """Apply the plan to the unit square, generation by generation."""
    verts = UNIT_SQUARE.copy()
    history = [verts]
    parents: list = [None]
    owners: list = [np.full(4, -1, dtype=int)]
    tris, gens, tparent, thost = [], [], [], []
    height = _tent_height(plan.p)
    n_tents = 0
    for g, rule in enumerate(plan.rules, start=1):
        a = verts
        b = np.roll(verts, -1, axis=0)
        m = len(a)
        d = b - a
        normal = np.column_stack([d[:, 1], -d[:, 0]])  # outward for CCW chains
        bump = np.array([rule == BUMP] * m) if isinstance(rule, str) else np.array([r == BUMP for r in rule])
        new = np.empty((m, 4, 2))
        new[:, 0] = a
        fr = np.array([0.25, 0.5, 0.75])
        new[:, 1:] = a[:, None, :] + fr[None, :, None] * d[:, None, :]
        if bump.any():
            ab, db, nb = a[bump], d[bump], normal[bump]
            p1 = ab + plan.p * db
            p2 = ab + (1 - plan.p) * db
            apex = ab + 0.5 * db + height * nb
            new[bump, 1] = p1
            new[bump, 2] = apex
            new[bump, 3] = p2
            tris.append(np.stack([p1, apex, p2], axis=1))
            gens.append(np.full(len(p1), g))
            prev_owner = owners[-1][bump]
            tparent.append(prev_owner)
            thost.append(np.flatnonzero(bump))
        seg_parent = np.repeat(np.arange(m), 4)
        owner = np.repeat(owners[-1], 4)
        if bump.any():
            ids = n_tents + np.arange(bump.sum())
            rows = np.flatnonzero(bump)
            owner[4 * rows + 1] = ids
            owner[4 * rows + 2] = ids
            n_tents += len(ids)
        verts = new.reshape(-1, 2)
        history.append(verts)
        parents.append(seg_parent)
        owners.append(owner)
    curve = SnowflakeCurve(verts, plan.N, history, parents, owners)
    if tris:
        tree = TriangleTree(np.concatenate(tris), np.concatenate(gens), np.concatenate(tparent),
                            np.concatenate(thost))
    else:
        tree = TriangleTree(np.zeros((0, 3, 2)), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
    if check_simple and not is_simple_closed(verts):
        raise ConstructionError(f"snowflake curve self-intersects (p={plan.p}, N={plan.N})")
    return curve, tree


def is_simple_closed(vertices: np.ndarray) -> bool:
    """Pairwise non-adjacent segment intersection test (GEOS-backed)."""
    import shapely

    ring = shapely.LinearRing(vertices)
    return bool(ring.is_simple)


def snowflake_stats(plan: SnowflakePlan) -> tuple[int, float, float]:
    """(segment_count, perimeter, min_segment_length) in closed form."""
    count = 4 * 4 ** plan.N
    # multiset of segment lengths, tracked as ratio -> multiplicity
    lengths = {1.0: 4}
    for g, rule in enumerate(plan.rules):
        if isinstance(rule, str):
            r = plan.p if rule == BUMP else 0.25
            lengths = {L * r: 4 * k for L, k in lengths.items()}
        else:
            lengths = None
            break
    if lengths is not None:
        perimeter = 4.0
        min_len = 1.0
        for g in range(1, plan.N + 1):
            r = plan.ratio(g)
            perimeter *= 4 * r
            min_len *= r
        return count, perimeter, min_len
    curve, _ = build_snowflake(plan, check_simple=False)
    seg = curve.segment_lengths
    return count, float(seg.sum()), float(seg.min())


def curve_to_domain(curve: SnowflakeCurve, name: str = "snowflake") -> DomainSpec:
    return DomainSpec(curve.vertices.copy(), name=name, validate=False)


@dataclass
class SnowflakeDomain:
    """A snowflake polygon together with its construction record."""

    plan: SnowflakePlan
    curve: SnowflakeCurve
    tree: TriangleTree
    domain: DomainSpec

    @property
    def name(self) -> str:
        return self.domain.name


def snowflake_domain(plan: SnowflakePlan, name: str = "snowflake") -> SnowflakeDomain:
    curve, tree = build_snowflake(plan)
    return SnowflakeDomain(plan, curve, tree, curve_to_domain(curve, name))
